"""Command-line surface: analyze corpora, plan stages, simulate, report bounds.

Exit codes: 0 success, 1 internal failure, 2 user or input error. Every
subcommand is deterministic given its inputs, flags, and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affinity import VARIANTS, AffinityMatrices, build_matrices
from .corpus import (
    DomainVectorizer,
    EmbeddingConfig,
    TokenizerConfig,
    load_corpus,
    load_precomputed_embeddings,
)
from .errors import InputError, ParameterError, ParseError, StageplanError, TrainingError
from .partition import (
    ObjectiveParams,
    Partition,
    StagePlan,
    make_stage_plan,
    multisource_risk_bound,
    random_partition,
    solve_partition,
    stage_risk_bound,
)
from .synth import (
    DomainData,
    SyntheticDomainSpec,
    affinity_from_plan,
    probe_tasks_from_stats,
    standard_suite,
    synth_domains,
)
from .trainer import ToyModelConfig, extend_plan, run_plan

_CONFIG_SECTIONS = {
    "objective": {
        "synergy_weight", "backbone_cap_weight", "adapter_cap_weight",
        "backbone_budget", "adapter_budget", "max_stages", "discrepancy_coef",
        "loss_lipschitz", "output_lipschitz", "confidence", "pair_average",
    },
    "tokenizer": {"lowercase", "strip_punct", "max_tokens_per_doc"},
    "embedding": {"dim", "hash_seed", "weighting"},
    "model": {"d_in", "d_out", "rank", "seed", "loss", "adapter_init_scale"},
    "training": {"step_size", "epochs"},
}
_CONFIG_SCALARS = {"seed", "input", "output"}


@dataclass
class RunConfig:
    """File-backed defaults for subcommand parameters; flags override."""

    objective: dict = field(default_factory=dict)
    tokenizer: dict = field(default_factory=dict)
    embedding: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    seed: int | None = None
    input: str | None = None
    output: str | None = None

    def to_dict(self) -> dict:
        out: dict = {}
        for section in _CONFIG_SECTIONS:
            values = getattr(self, section)
            if values:
                out[section] = dict(values)
        for key in _CONFIG_SCALARS:
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - set(_CONFIG_SECTIONS) - _CONFIG_SCALARS
        if unknown:
            raise ParseError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict = {}
        for section, allowed in _CONFIG_SECTIONS.items():
            values = payload.get(section, {})
            if not isinstance(values, dict):
                raise ParseError(f"config section {section!r} must be an object")
            bad = set(values) - allowed
            if bad:
                raise ParseError(f"unknown keys in config section {section!r}: {sorted(bad)}")
            kwargs[section] = dict(values)
        for key in _CONFIG_SCALARS:
            kwargs[key] = payload.get(key)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file does not exist: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=exc.lineno) from exc
        return cls.from_dict(payload)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config)
    return RunConfig()


def _pick(flag_value, config_section: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in config_section:
        return config_section[key]
    return default


def _objective_params(args, cfg: RunConfig) -> ObjectiveParams:
    section = cfg.objective
    return ObjectiveParams(
        synergy_weight=_pick(getattr(args, "synergy_weight", None), section, "synergy_weight", 0.5),
        backbone_cap_weight=_pick(getattr(args, "mu_theta", None), section, "backbone_cap_weight", 1.0),
        adapter_cap_weight=_pick(getattr(args, "mu_phi", None), section, "adapter_cap_weight", 1.0),
        backbone_budget=_pick(getattr(args, "rho_theta", None), section, "backbone_budget", 0.1),
        adapter_budget=_pick(getattr(args, "rho_phi", None), section, "adapter_budget", 0.1),
        max_stages=_pick(getattr(args, "stages", None), section, "max_stages", 2),
        discrepancy_coef=section.get("discrepancy_coef", 1.0),
        loss_lipschitz=section.get("loss_lipschitz", 1.0),
        output_lipschitz=section.get("output_lipschitz", 1.0),
        confidence=_pick(getattr(args, "delta", None), section, "confidence", 0.05),
        pair_average=bool(
            _pick(getattr(args, "pair_average", None) or None, section, "pair_average", False)
        ),
    )


def _seed(args, cfg: RunConfig) -> int:
    return int(_pick(getattr(args, "seed", None), {}, "seed", cfg.seed if cfg.seed is not None else 0))


def _resolve_spec(args, cfg: RunConfig, seed: int):
    """Synthetic data source for simulate/correlate: --spec file, --corpus
    probe tasks, or the standard suite."""
    spec_path = getattr(args, "spec", None)
    corpus_path = getattr(args, "corpus", None)
    if spec_path and corpus_path:
        raise InputError("give either --spec or --corpus, not both")
    if spec_path:
        return SyntheticDomainSpec.from_json(spec_path)
    if corpus_path:
        corpora = load_corpus(corpus_path)
        vectorizer = DomainVectorizer(
            tokenizer=TokenizerConfig(**cfg.tokenizer) if cfg.tokenizer else None,
            embedding=EmbeddingConfig(**cfg.embedding) if cfg.embedding else None,
        )
        stats = vectorizer.fit(corpora).transform(corpora)
        spec, _ = probe_tasks_from_stats(stats, seed=seed)
        return spec
    return standard_suite()


def _model_config(args, cfg: RunConfig, spec: SyntheticDomainSpec, seed: int) -> ToyModelConfig:
    section = dict(cfg.model)
    section.pop("d_in", None)
    section.pop("d_out", None)
    rank = _pick(getattr(args, "rank", None), section, "rank", 1)
    section.pop("rank", None)
    section.pop("seed", None)
    return ToyModelConfig(d_in=spec.d_in, d_out=spec.d_out, rank=int(rank), seed=seed, **section)


def _training(args, cfg: RunConfig) -> tuple[float, int]:
    step = float(_pick(getattr(args, "step_size", None), cfg.training, "step_size", 0.05))
    epochs = int(_pick(getattr(args, "epochs", None), cfg.training, "epochs", 150))
    return step, epochs


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    source = args.source or cfg.input
    if not source:
        raise InputError("analyze needs a corpus source (positional or config 'input')")
    corpora = load_corpus(source, args.format)
    precomputed = None
    if args.embeddings:
        precomputed = load_precomputed_embeddings(args.embeddings)
    tokenizer = TokenizerConfig(**cfg.tokenizer) if cfg.tokenizer else TokenizerConfig()
    emb_kwargs = dict(cfg.embedding)
    if args.dim is not None:
        emb_kwargs["dim"] = args.dim
    embedding = EmbeddingConfig(**emb_kwargs) if emb_kwargs else EmbeddingConfig()
    vectorizer = DomainVectorizer(
        tokenizer=tokenizer,
        embedding=embedding,
        ngram_pooling=args.ngram_pooling,
        precomputed_embeddings=precomputed,
    )
    stats = vectorizer.fit(corpora).transform(corpora)
    matrices = build_matrices(stats, variant=args.variant)
    out = Path(args.out or cfg.output or "affinity.json")
    matrices.to_json(out)
    csv_path = out.with_suffix(".csv")
    matrices.to_csv(csv_path)
    _print_json(
        {
            "domains": list(matrices.domain_ids),
            "k": matrices.k,
            "variant": matrices.variant,
            "affinity_json": str(out),
            "affinity_csv": str(csv_path),
        }
    )
    return 0


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    affinity_path = args.affinity or cfg.input
    if not affinity_path:
        raise InputError("plan needs an affinity file (positional or config 'input')")
    if not Path(affinity_path).exists():
        raise InputError(f"affinity file does not exist: {affinity_path}")
    matrices = AffinityMatrices.from_json(affinity_path)
    params = _objective_params(args, cfg)
    partition, score, used = solve_partition(matrices, params, solver=args.solver)
    plan = make_stage_plan(partition, params=params, matrices=matrices)
    out = Path(args.out or cfg.output or "plan.json")
    plan.to_json(out)
    _print_json(
        {
            "stages": [list(s) for s in plan.stages],
            "solver": used,
            "G": plan.g_value,
            "G_pair_averaged": plan.g_pair_averaged,
            "bound": plan.bound,
            "plan_json": str(out),
        }
    )
    return 0


def _load_extension_dataset(path: str | Path, domain_id: str) -> DomainData:
    path = Path(path)
    if not path.exists():
        raise InputError(f"extension dataset does not exist: {path}")
    xs, ys = [], []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=lineno) from exc
            for key in ("x", "y"):
                if key not in record:
                    raise ParseError(f"record lacks required field {key!r}", path=str(path), line=lineno)
            xs.append(record["x"])
            ys.append(record["y"])
    if not xs:
        raise InputError(f"no records in {path}")
    return DomainData(domain_id, np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    plan_path = args.plan or cfg.input
    if not plan_path:
        raise InputError("simulate needs a plan file (positional or config 'input')")
    if not Path(plan_path).exists():
        raise InputError(f"plan file does not exist: {plan_path}")
    plan = StagePlan.from_json(plan_path)
    seed = _seed(args, cfg)
    spec = _resolve_spec(args, cfg, seed)
    missing = [d for d in plan.domain_ids if d not in spec.domain_ids]
    if missing:
        raise InputError(f"plan domains missing from the data spec: {missing}")
    data = synth_domains(spec, seed=seed)
    matrices = affinity_from_plan(spec)
    model_cfg = _model_config(args, cfg, spec, seed)
    step, epochs = _training(args, cfg)

    report = run_plan(plan, data, model_cfg, step, epochs, matrices=matrices)
    out = Path(args.out or cfg.output or "report.json")
    report.to_json(out)
    report.trajectories_to_csv(out.with_suffix(".csv"))
    summary = {
        "report_json": str(out),
        "trajectories_csv": str(out.with_suffix(".csv")),
        "R_max": report.worst_stage_risk,
        "risks": report.final_risks,
        "G_posthoc": report.g_posthoc,
        "seed": seed,
    }

    if args.compare:
        comparisons = {}
        wanted = [w.strip() for w in args.compare.split(",") if w.strip()]
        unknown = [w for w in wanted if w not in ("random", "single")]
        if unknown:
            raise InputError(f"unknown --compare values: {unknown} (expected random, single)")
        params = _objective_params(args, cfg)
        # Reindex the spec-ordered matrices onto the plan's domain order.
        order = [matrices.domain_ids.index(d) for d in plan.domain_ids]
        idx = np.ix_(order, order)
        alt_matrices = AffinityMatrices(
            domain_ids=plan.domain_ids,
            discrepancy=matrices.discrepancy[idx],
            synergy=matrices.synergy[idx],
            variant=matrices.variant,
            counts=tuple(matrices.counts[i] for i in order) if matrices.counts else None,
        )
        for which in wanted:
            if which == "random":
                rng = np.random.default_rng(seed)
                partition = random_partition(len(plan.domain_ids), max(2, plan.n_stages), rng)
            else:
                partition = Partition((tuple(range(len(plan.domain_ids))),))
            alt_plan = make_stage_plan(partition, params=params, matrices=alt_matrices)
            alt_report = run_plan(alt_plan, data, model_cfg, step, epochs, matrices=alt_matrices)
            alt_path = out.with_name(out.stem + f".{which}.json")
            alt_report.to_json(alt_path)
            comparisons[which] = {
                "stages": [list(s) for s in alt_plan.stages],
                "R_max": alt_report.worst_stage_risk,
                "report_json": str(alt_path),
            }
        summary["compare"] = comparisons

    if args.extend:
        new_domain = _load_extension_dataset(args.extend, Path(args.extend).stem)
        rho_theta = plan.rho_theta if args.rho_theta is None else args.rho_theta
        rho_phi = plan.rho_phi if args.rho_phi is None else args.rho_phi
        _, extended = extend_plan(
            report.final_state,
            report,
            data,
            new_domain,
            budgets=(rho_theta, rho_phi),
            step_size=step,
            epochs=epochs,
        )
        ext_path = out.with_name(out.stem + ".extended.json")
        extended.to_json(ext_path)
        summary["extend"] = {
            "new_domain": new_domain.domain_id,
            "drift": extended.drift,
            "mean_relative_drift": float(np.mean(list(extended.drift.values()))),
            "new_domain_risk": extended.incremental,
            "report_json": str(ext_path),
        }

    _print_json(summary)
    return 0


def cmd_bound(args) -> int:
    cfg = _load_config(args)
    params = _objective_params(args, cfg)
    matrices = None
    if args.affinity:
        if not Path(args.affinity).exists():
            raise InputError(f"affinity file does not exist: {args.affinity}")
        matrices = AffinityMatrices.from_json(args.affinity)
    report = multisource_risk_bound(
        empirical=args.empirical,
        matrices=matrices,
        params=params,
        n_total=args.n,
        g_value=args.g,
    )
    payload = report.to_dict()
    payload["stage_bound_of_G"] = stage_risk_bound(args.g, args.n, params.confidence)
    _print_json(payload)
    for key in (
        "empirical_term",
        "complexity_term",
        "discrepancy_term",
        "statistical_term",
        "total",
        "stage_bound",
    ):
        value = payload[key]
        print(f"{key:>18}: {value:.6g}" if value is not None else f"{key:>18}: -")
    return 0


def cmd_correlate(args) -> int:
    cfg = _load_config(args)
    if args.trials < 10:
        raise ParameterError(f"correlate needs at least 10 trials, got {args.trials}")
    seed = _seed(args, cfg)
    spec = _resolve_spec(args, cfg, seed)
    if args.affinity:
        if not Path(args.affinity).exists():
            raise InputError(f"affinity file does not exist: {args.affinity}")
        matrices = AffinityMatrices.from_json(args.affinity)
        if set(matrices.domain_ids) != set(spec.domain_ids):
            raise InputError("affinity domains do not match the data spec")
    else:
        matrices = affinity_from_plan(spec)
    params = _objective_params(args, cfg)
    data = synth_domains(spec, seed=seed)
    model_cfg = _model_config(args, cfg, spec, seed)
    step, epochs = _training(args, cfg)
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(args.trials):
        partition = random_partition(matrices.k, params.max_stages, rng)
        plan = make_stage_plan(partition, params=params, matrices=matrices)
        report = run_plan(plan, data, model_cfg, step, epochs)
        rows.append((trial, plan.g_value, report.worst_stage_risk, plan.stages))
    g_values = [r[1] for r in rows]
    r_values = [r[2] for r in rows]
    pearson = float(np.corrcoef(g_values, r_values)[0, 1])
    out = Path(args.out or cfg.output or "correlation.csv")
    with out.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["trial", "G", "R_max", "stages"])
        for trial, g, r, stages in rows:
            writer.writerow([trial, f"{g:.8g}", f"{r:.8g}", json.dumps([list(s) for s in stages])])
    _print_json({"trials": args.trials, "pearson": pearson, "seed": seed, "scatter_csv": str(out)})
    return 0


def _add_objective_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda", dest="synergy_weight", type=float, default=None,
                        help="synergy weight in the stage objective")
    parser.add_argument("--mu-theta", dest="mu_theta", type=float, default=None,
                        help="backbone capacity weight")
    parser.add_argument("--mu-phi", dest="mu_phi", type=float, default=None,
                        help="adapter capacity weight")
    parser.add_argument("--rho-theta", dest="rho_theta", type=float, default=None,
                        help="backbone norm budget per stage")
    parser.add_argument("--rho-phi", dest="rho_phi", type=float, default=None,
                        help="adapter norm budget")
    parser.add_argument("--stages", dest="stages", type=int, default=None, metavar="M",
                        help="maximum number of stages")
    parser.add_argument("--delta", dest="delta", type=float, default=None,
                        help="confidence level of the bound terms")
    parser.add_argument("--pair-average", dest="pair_average", action="store_true", default=None,
                        help="average intra-stage sums by pair count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stageplan",
        description="Plan synergy-driven training stages and verify them on a synthetic adapter model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="reduce corpora to affinity matrices")
    p.add_argument("source", nargs="?", help="corpus directory or JSONL file")
    p.add_argument("--format", choices=("auto", "per-domain-directory", "jsonl"), default="auto")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--embeddings", help="JSONL of precomputed document embeddings")
    p.add_argument("--dim", type=int, default=None, help="hashed embedding dimension")
    p.add_argument("--ngram-pooling", choices=("events", "split"), default="events")
    p.add_argument("--out", help="output affinity JSON path")
    p.add_argument("--config", help="RunConfig JSON file")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("plan", help="solve the stage partition for an affinity file")
    p.add_argument("affinity", nargs="?", help="affinity JSON from `analyze`")
    p.add_argument("--solver", choices=("auto", "exact", "agglomerative"), default="auto")
    _add_objective_flags(p)
    p.add_argument("--out", help="output plan JSON path")
    p.add_argument("--config", help="RunConfig JSON file")
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("simulate", help="execute a stage plan on synthetic domains")
    p.add_argument("plan", nargs="?", help="plan JSON from `plan`")
    p.add_argument("--spec", help="synthetic domain spec JSON (default: standard suite)")
    p.add_argument("--corpus", help="derive probe tasks from a corpus instead of a spec")
    p.add_argument("--compare", help="comma list of baselines to run: random,single")
    p.add_argument("--extend", help="JSONL dataset for an incremental stage")
    p.add_argument("--rank", type=int, default=None, help="adapter rank")
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_objective_flags(p)
    p.add_argument("--out", help="output report JSON path")
    p.add_argument("--config", help="RunConfig JSON file")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("bound", help="evaluate the risk-bound calculators")
    p.add_argument("--empirical", type=float, default=0.0, help="weighted empirical risk")
    p.add_argument("--n", type=int, default=10000, help="total sample count")
    p.add_argument("--g", type=float, default=0.0, help="partition objective value")
    p.add_argument("--affinity", help="affinity JSON for the discrepancy term")
    _add_objective_flags(p)
    p.add_argument("--config", help="RunConfig JSON file")
    p.set_defaults(handler=cmd_bound)

    p = sub.add_parser("correlate", help="correlate the objective with trained worst-stage risk")
    p.add_argument("--affinity", help="affinity JSON (default: derived from the spec)")
    p.add_argument("--spec", help="synthetic domain spec JSON (default: standard suite)")
    p.add_argument("--corpus", help="derive probe tasks from a corpus instead of a spec")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_objective_flags(p)
    p.add_argument("--out", help="scatter CSV path")
    p.add_argument("--config", help="RunConfig JSON file")
    p.set_defaults(handler=cmd_correlate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
