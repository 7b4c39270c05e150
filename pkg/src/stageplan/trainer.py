"""Desk-scale executor for multi-stage adapter tuning.

The toy model is a shared linear backbone plus one low-rank additive
adapter per domain: predictions for domain j are (backbone + A_j) @ x
with A_j = left_j @ right_j^T. Stages run in plan order; each stage does
full-batch gradient descent on its weighted empirical risk, projecting
the backbone deviation (from the stage-entry snapshot) and every
trainable adapter back onto their norm balls after every step. Adapters
of domains outside the running stage are never touched.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .affinity import AffinityMatrices
from .errors import InputError, ParameterError, TrainingError
from .partition import ObjectiveParams, Partition, StagePlan, partition_objective
from .synth import DomainData

_PROJECTION_SLACK = 1.0 + 1e-12  # makes the radial projection exactly idempotent


@dataclass(frozen=True)
class ToyModelConfig:
    d_in: int
    d_out: int
    rank: int = 1
    seed: int = 0
    loss: str = "squared-error"
    adapter_init_scale: float = 0.1

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ParameterError("d_in and d_out must be >= 1")
        if self.rank < 1:
            raise ParameterError("rank must be >= 1")
        if self.loss != "squared-error":
            raise ParameterError(f"unsupported loss {self.loss!r}")


@dataclass(frozen=True)
class Adapter:
    """Low-rank additive update, stored as its two factors."""

    left: np.ndarray   # (d_out, rank)
    right: np.ndarray  # (d_in, rank)

    def compose(self) -> np.ndarray:
        return self.left @ self.right.T

    def norm(self) -> float:
        return float(np.linalg.norm(self.compose()))


@dataclass(frozen=True)
class ModelState:
    """Backbone, per-domain adapters, and the current stage-entry snapshot."""

    config: ToyModelConfig
    domain_ids: tuple[str, ...]
    backbone: np.ndarray
    backbone_ref: np.ndarray
    adapters: tuple[Adapter, ...]

    def backbone_deviation(self) -> float:
        return float(np.linalg.norm(self.backbone - self.backbone_ref))

    def adapter_norms(self) -> dict[str, float]:
        return {d: a.norm() for d, a in zip(self.domain_ids, self.adapters)}


def _new_adapter(cfg: ToyModelConfig, index: int) -> Adapter:
    # Left factor deterministic with equal norm across domains and
    # distinct columns, right factor zero: the adapter starts as the zero
    # map but still receives gradient through the right factor, and no
    # domain gets a luckier starting speed than another.
    left = np.zeros((cfg.d_out, cfg.rank))
    for c in range(cfg.rank):
        left[c % cfg.d_out, c] = cfg.adapter_init_scale
    right = np.zeros((cfg.d_in, cfg.rank))
    return Adapter(left=left, right=right)


def init_state(cfg: ToyModelConfig, domain_ids: Sequence[str]) -> ModelState:
    ids = tuple(domain_ids)
    if len(set(ids)) != len(ids):
        raise InputError("duplicate domain_ids")
    backbone = np.zeros((cfg.d_out, cfg.d_in))
    return ModelState(
        config=cfg,
        domain_ids=ids,
        backbone=backbone,
        backbone_ref=backbone.copy(),
        adapters=tuple(_new_adapter(cfg, j) for j in range(len(ids))),
    )


def predict(state: ModelState, domain_index: int, x: np.ndarray) -> np.ndarray:
    effective = state.backbone + state.adapters[domain_index].compose()
    return np.asarray(x, dtype=float) @ effective.T


def domain_risk(state: ModelState, data: DomainData, domain_index: int) -> float:
    """Mean squared residual norm of the domain's effective model on its data."""
    if data.n_samples == 0:
        raise InputError("domain_risk needs a non-empty dataset")
    residual = predict(state, domain_index, data.x) - data.y
    return float(np.mean(np.sum(residual**2, axis=1)))


def project_norms(
    state: ModelState,
    rho_theta: float,
    rho_phi: float,
    trainable: Sequence[int] | None = None,
) -> ModelState:
    """Radially project the backbone deviation and the trainable adapters.

    The backbone deviation is measured from the stage-entry snapshot and
    rescaled to norm rho_theta when it exceeds the budget; each trainable
    adapter's composed map is rescaled to norm rho_phi by scaling both
    factors by the square root. Interior points pass through unchanged,
    so the projection is idempotent.
    """
    if rho_theta < 0 or rho_phi < 0:
        raise ParameterError("norm budgets must be >= 0")
    backbone = state.backbone
    deviation = backbone - state.backbone_ref
    dev_norm = float(np.linalg.norm(deviation))
    if dev_norm > rho_theta * _PROJECTION_SLACK:
        backbone = state.backbone_ref + deviation * (rho_theta / dev_norm)
    adapters = list(state.adapters)
    indices = range(len(adapters)) if trainable is None else trainable
    for j in indices:
        adapter = adapters[j]
        norm = adapter.norm()
        if norm > rho_phi * _PROJECTION_SLACK:
            factor = float(np.sqrt(rho_phi / norm))
            adapters[j] = Adapter(left=adapter.left * factor, right=adapter.right * factor)
    return replace(state, backbone=backbone, adapters=tuple(adapters))


def _stage_gradients(
    state: ModelState,
    items: Sequence[tuple[int, DomainData, float]],
) -> tuple[float, np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Weighted stage loss and gradients for the backbone and each stage adapter."""
    grad_backbone = np.zeros_like(state.backbone)
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    loss = 0.0
    for j, data, weight in items:
        adapter = state.adapters[j]
        effective = state.backbone + adapter.compose()
        residual = data.x @ effective.T - data.y
        n = data.n_samples
        loss += weight * float(np.mean(np.sum(residual**2, axis=1)))
        grad_p = (2.0 / n) * residual.T @ data.x
        grad_backbone += weight * grad_p
        grads[j] = (weight * grad_p @ adapter.right, weight * grad_p.T @ adapter.left)
    return loss, grad_backbone, grads


@dataclass(frozen=True)
class StageRecord:
    index: int
    domains: tuple[str, ...]
    alpha: dict[str, float]
    loss_trajectory: dict[str, tuple[float, ...]]
    stage_loss: tuple[float, ...]
    delta_backbone_norm: float
    adapter_norms: dict[str, float]
    realized_capacity: float
    max_backbone_deviation: float
    max_adapter_norm: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "domains": list(self.domains),
            "alpha": dict(self.alpha),
            "losses": {d: list(v) for d, v in self.loss_trajectory.items()},
            "stage_loss": list(self.stage_loss),
            "delta_theta_norm": self.delta_backbone_norm,
            "adapter_norms": dict(self.adapter_norms),
            "realized_cap": self.realized_capacity,
            "max_backbone_deviation": self.max_backbone_deviation,
            "max_adapter_norm": self.max_adapter_norm,
        }


@dataclass(frozen=True)
class TrainingReport:
    """Everything a run produced, plus the final model state.

    `worst_stage_risk` is the maximum over stages of the stage's
    weight-averaged final risks, all measured with the final model.
    """

    stages: tuple[StageRecord, ...]
    final_risks: dict[str, float]
    worst_stage_risk: float
    g_posthoc: float | None
    seed: int
    final_state: ModelState = field(repr=False)
    drift: dict[str, float] | None = None
    incremental: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "stages": [s.to_dict() for s in self.stages],
            "risks": dict(self.final_risks),
            "R_max": self.worst_stage_risk,
            "realized_cap": [s.realized_capacity for s in self.stages],
            "G_posthoc": self.g_posthoc,
            "seed": self.seed,
        }
        if self.drift is not None:
            out["drift"] = dict(self.drift)
        if self.incremental is not None:
            out["incremental"] = dict(self.incremental)
        return out

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def trajectories_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["stage", "epoch", "domain", "risk"])
            for record in self.stages:
                for domain, series in record.loss_trajectory.items():
                    for epoch, value in enumerate(series):
                        writer.writerow([record.index, epoch, domain, f"{value:.10g}"])


def _resolve_data(plan_domains: Sequence[str], data: Sequence[DomainData]) -> dict[str, DomainData]:
    by_id = {d.domain_id: d for d in data}
    if len(by_id) != len(data):
        raise InputError("duplicate domain_ids in data")
    missing = [d for d in plan_domains if d not in by_id]
    if missing:
        raise InputError(f"plan domains missing from data: {missing}")
    return by_id


def _weighted_stage_risk(plan: StagePlan, risks: Mapping[str, float]) -> float:
    worst = 0.0
    for stage, weights in zip(plan.stages, plan.alpha):
        worst = max(worst, sum(weights[d] * risks[d] for d in stage))
    return worst


def run_plan(
    plan: StagePlan,
    data: Sequence[DomainData],
    cfg: ToyModelConfig | None = None,
    step_size: float = 0.05,
    epochs: int = 100,
    *,
    objective_params: ObjectiveParams | None = None,
    matrices: AffinityMatrices | None = None,
    state: ModelState | None = None,
) -> TrainingReport:
    """Execute a stage plan and report risks, norms, and trajectories.

    Deterministic given (plan, data, cfg.seed). The final model state is
    attached to the report for incremental extension. When `matrices` is
    supplied, the plan's partition is re-scored post hoc with the realized
    per-stage capacity costs in place of the planning proxies.
    """
    if epochs < 1:
        raise ParameterError("epochs must be >= 1")
    if step_size <= 0:
        raise ParameterError("step_size must be > 0")
    by_id = _resolve_data(plan.domain_ids, data)
    first = by_id[plan.domain_ids[0]]
    if cfg is None:
        cfg = ToyModelConfig(d_in=first.x.shape[1], d_out=first.y.shape[1])
    for d in plan.domain_ids:
        dd = by_id[d]
        if dd.x.shape[1] != cfg.d_in or dd.y.shape[1] != cfg.d_out:
            raise InputError(f"domain {d!r} data does not match model dims")
    params = objective_params or ObjectiveParams(
        backbone_budget=plan.rho_theta,
        adapter_budget=plan.rho_phi,
        synergy_weight=plan.synergy_weight,
        max_stages=max(1, plan.n_stages),
    )
    if state is None:
        state = init_state(cfg, plan.domain_ids)
    position = {d: i for i, d in enumerate(state.domain_ids)}

    records: list[StageRecord] = []
    for t, (stage, weights) in enumerate(zip(plan.stages, plan.alpha)):
        items = [(position[d], by_id[d], weights[d]) for d in stage]
        state = replace(state, backbone_ref=state.backbone.copy())
        trajectory: dict[str, list[float]] = {d: [] for d in stage}
        stage_losses: list[float] = []
        max_dev = 0.0
        max_adapter = 0.0
        for epoch in range(epochs):
            loss, grad_backbone, grads = _stage_gradients(state, items)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at stage {t}, epoch {epoch}")
            adapters = list(state.adapters)
            for j, (g_left, g_right) in grads.items():
                adapters[j] = Adapter(
                    left=adapters[j].left - step_size * g_left,
                    right=adapters[j].right - step_size * g_right,
                )
            state = replace(
                state,
                backbone=state.backbone - step_size * grad_backbone,
                adapters=tuple(adapters),
            )
            state = project_norms(
                state, plan.rho_theta, plan.rho_phi, trainable=[j for j, _, _ in items]
            )
            max_dev = max(max_dev, state.backbone_deviation())
            for j, dd, _ in items:
                max_adapter = max(max_adapter, state.adapters[j].norm())
            stage_losses.append(
                sum(w * domain_risk(state, dd, j) for j, dd, w in items)
            )
            for j, dd, _ in items:
                trajectory[state.domain_ids[j]].append(domain_risk(state, dd, j))
        stage_adapter_norms = {state.domain_ids[j]: state.adapters[j].norm() for j, _, _ in items}
        realized = params.backbone_cap_weight * state.backbone_deviation() ** 2 + (
            params.adapter_cap_weight * sum(v**2 for v in stage_adapter_norms.values())
        )
        records.append(
            StageRecord(
                index=t,
                domains=tuple(stage),
                alpha=dict(weights),
                loss_trajectory={d: tuple(v) for d, v in trajectory.items()},
                stage_loss=tuple(stage_losses),
                delta_backbone_norm=state.backbone_deviation(),
                adapter_norms=stage_adapter_norms,
                realized_capacity=realized,
                max_backbone_deviation=max_dev,
                max_adapter_norm=max_adapter,
            )
        )

    final_risks = {
        d: domain_risk(state, by_id[d], position[d]) for d in plan.domain_ids
    }
    g_posthoc = None
    if matrices is not None:
        index_of = {d: i for i, d in enumerate(matrices.domain_ids)}
        stages_idx = Partition(
            tuple(tuple(index_of[d] for d in stage) for stage in plan.stages)
        )
        g_posthoc = partition_objective(
            stages_idx, matrices, params,
            stage_capacities=[r.realized_capacity for r in records],
        )
    return TrainingReport(
        stages=tuple(records),
        final_risks=final_risks,
        worst_stage_risk=_weighted_stage_risk(plan, final_risks),
        g_posthoc=g_posthoc,
        seed=cfg.seed,
        final_state=state,
    )


def gradient_cosine_matrix(
    state: ModelState,
    data: Sequence[DomainData],
    probe_size: int = 32,
) -> np.ndarray:
    """Pairwise cosine of per-domain backbone gradients at the current state.

    Symmetric with unit diagonal. A domain with a zero gradient gets zero
    off-diagonal entries and triggers a warning.
    """
    if probe_size < 1:
        raise ParameterError("probe_size must be >= 1")
    position = {d: i for i, d in enumerate(state.domain_ids)}
    grads = []
    for dd in data:
        j = position[dd.domain_id]
        probe = DomainData(dd.domain_id, dd.x[:probe_size], dd.y[:probe_size])
        _, grad_backbone, _ = _stage_gradients(state, [(j, probe, 1.0)])
        grads.append(grad_backbone.ravel())
    k = len(grads)
    out = np.eye(k)
    norms = [float(np.linalg.norm(g)) for g in grads]
    for i in range(k):
        if norms[i] == 0.0:
            warnings.warn(
                f"zero gradient for domain {data[i].domain_id!r}; cosine entries set to 0",
                stacklevel=2,
            )
    for i in range(k):
        for j in range(i + 1, k):
            if norms[i] == 0.0 or norms[j] == 0.0:
                value = 0.0
            else:
                value = float(np.dot(grads[i], grads[j]) / (norms[i] * norms[j]))
            out[i, j] = out[j, i] = value
    return out


def extend_plan(
    state: ModelState,
    report: TrainingReport,
    data: Sequence[DomainData],
    new_domain: DomainData,
    budgets: tuple[float, float] = (0.1, 0.1),
    step_size: float = 0.05,
    epochs: int = 100,
    objective_params: ObjectiveParams | None = None,
) -> tuple[ModelState, TrainingReport]:
    """Append one incremental stage that trains only the new domain.

    All prior adapters are frozen; the backbone may move within a fresh
    budget measured from its current position. The returned report keeps
    the prior stages and adds per-domain risk drift bookkeeping.
    """
    if new_domain.domain_id in state.domain_ids:
        raise InputError(f"domain {new_domain.domain_id!r} already exists")
    rho_theta, rho_phi = budgets
    cfg = state.config
    if new_domain.x.shape[1] != cfg.d_in or new_domain.y.shape[1] != cfg.d_out:
        raise InputError("new domain data does not match model dims")
    by_id = _resolve_data(state.domain_ids, data)
    params = objective_params or ObjectiveParams(
        backbone_budget=rho_theta, adapter_budget=rho_phi, max_stages=1
    )

    old_ids = state.domain_ids
    position = {d: i for i, d in enumerate(old_ids)}
    risks_before = {d: domain_risk(state, by_id[d], position[d]) for d in old_ids}

    new_index = len(old_ids)
    extended = ModelState(
        config=cfg,
        domain_ids=old_ids + (new_domain.domain_id,),
        backbone=state.backbone,
        backbone_ref=state.backbone.copy(),
        adapters=state.adapters + (_new_adapter(cfg, new_index),),
    )
    new_risk_before = domain_risk(extended, new_domain, new_index)

    trajectory: list[float] = []
    max_dev = 0.0
    max_adapter = 0.0
    for epoch in range(epochs):
        loss, grad_backbone, grads = _stage_gradients(extended, [(new_index, new_domain, 1.0)])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss in incremental stage, epoch {epoch}")
        g_left, g_right = grads[new_index]
        adapters = list(extended.adapters)
        adapters[new_index] = Adapter(
            left=adapters[new_index].left - step_size * g_left,
            right=adapters[new_index].right - step_size * g_right,
        )
        extended = replace(
            extended,
            backbone=extended.backbone - step_size * grad_backbone,
            adapters=tuple(adapters),
        )
        extended = project_norms(extended, rho_theta, rho_phi, trainable=[new_index])
        max_dev = max(max_dev, extended.backbone_deviation())
        max_adapter = max(max_adapter, extended.adapters[new_index].norm())
        trajectory.append(domain_risk(extended, new_domain, new_index))

    risks_after = {d: domain_risk(extended, by_id[d], position[d]) for d in old_ids}
    new_risk_after = domain_risk(extended, new_domain, new_index)
    drift = {
        d: abs(risks_after[d] - risks_before[d]) / max(risks_before[d], 1e-12)
        for d in old_ids
    }

    adapter_norm = extended.adapters[new_index].norm()
    record = StageRecord(
        index=len(report.stages),
        domains=(new_domain.domain_id,),
        alpha={new_domain.domain_id: 1.0},
        loss_trajectory={new_domain.domain_id: tuple(trajectory)},
        stage_loss=tuple(trajectory),
        delta_backbone_norm=extended.backbone_deviation(),
        adapter_norms={new_domain.domain_id: adapter_norm},
        realized_capacity=(
            params.backbone_cap_weight * extended.backbone_deviation() ** 2
            + params.adapter_cap_weight * adapter_norm**2
        ),
        max_backbone_deviation=max_dev,
        max_adapter_norm=max_adapter,
    )
    final_risks = dict(risks_after)
    final_risks[new_domain.domain_id] = new_risk_after
    all_records = report.stages + (record,)
    worst = max(
        sum(rec.alpha[d] * final_risks[d] for d in rec.domains) for rec in all_records
    )
    extended_report = TrainingReport(
        stages=all_records,
        final_risks=final_risks,
        worst_stage_risk=worst,
        g_posthoc=report.g_posthoc,
        seed=report.seed,
        final_state=extended,
        drift=drift,
        incremental={
            "new_domain": new_domain.domain_id,
            "risk_before": new_risk_before,
            "risk_after": new_risk_after,
        },
    )
    return extended, extended_report


def gradient_check(
    state: ModelState,
    data: DomainData,
    domain_index: int = 0,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    Checks the backbone and the domain's adapter factors coordinate-wise;
    `max_coords` caps the number of sampled coordinates per array.
    """
    if not 1e-8 < eps < 1e-2:
        raise ParameterError("eps must lie in (1e-8, 1e-2)")
    j = domain_index

    def loss_for(backbone: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
        effective = backbone + left @ right.T
        residual = data.x @ effective.T - data.y
        return float(np.mean(np.sum(residual**2, axis=1)))

    _, grad_backbone, grads = _stage_gradients(state, [(j, data, 1.0)])
    g_left, g_right = grads[j]
    arrays = [
        (state.backbone.copy(), grad_backbone),
        (state.adapters[j].left.copy(), g_left),
        (state.adapters[j].right.copy(), g_right),
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for which, (base, analytic) in enumerate(arrays):
        coords = list(np.ndindex(base.shape))
        if max_coords is not None and len(coords) > max_coords:
            picked = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picked]
        for coord in coords:
            original = base[coord]
            base[coord] = original + eps
            plus = _loss_with(state, j, which, base, loss_for)
            base[coord] = original - eps
            minus = _loss_with(state, j, which, base, loss_for)
            base[coord] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[coord])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def _loss_with(state: ModelState, j: int, which: int, array: np.ndarray, loss_for) -> float:
    backbone = state.backbone
    left = state.adapters[j].left
    right = state.adapters[j].right
    if which == 0:
        return loss_for(array, left, right)
    if which == 1:
        return loss_for(backbone, array, right)
    return loss_for(backbone, left, array)


class MultiStageAdapterModel(BaseEstimator):
    """Estimator wrapper around the stage-plan executor.

    `fit(data)` runs the configured plan over the per-domain datasets;
    `predict(X, domain_id)` applies the backbone plus that domain's
    adapter. The fitted report lives in `report_`, the model in `state_`.
    """

    def __init__(
        self,
        plan: StagePlan | None = None,
        rank: int = 1,
        step_size: float = 0.05,
        epochs: int = 100,
        seed: int = 0,
    ):
        self.plan = plan
        self.rank = rank
        self.step_size = step_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X: Sequence[DomainData], y=None):
        if self.plan is None:
            raise ParameterError("MultiStageAdapterModel requires a plan")
        data = list(X)
        first = data[0]
        cfg = ToyModelConfig(
            d_in=first.x.shape[1], d_out=first.y.shape[1], rank=self.rank, seed=self.seed
        )
        self.report_ = run_plan(
            self.plan, data, cfg, step_size=self.step_size, epochs=self.epochs
        )
        self.state_ = self.report_.final_state
        return self

    def predict(self, X: np.ndarray, domain_id: str) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise InputError("model must be fitted before predict")
        try:
            j = self.state_.domain_ids.index(domain_id)
        except ValueError as exc:
            raise InputError(f"unknown domain {domain_id!r}") from exc
        return predict(self.state_, j, np.asarray(X, dtype=float))
