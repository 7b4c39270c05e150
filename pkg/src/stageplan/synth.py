"""Synthetic multi-domain regression suites with controllable affinity.

Each domain is a linear teacher; pairwise teacher cosines are planted to
match a similarity plan, so the relationship structure the partitioner
reasons about is known exactly. A standard four-domain suite (two
synergistic pairs, hostile across pairs) is provided for experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .affinity import AffinityMatrices
from .corpus import DomainStats
from .errors import InputError, ParameterError, SynthesisError


@dataclass(frozen=True)
class DomainData:
    """One domain's regression sample: inputs (n, d_in), targets (n, d_out)."""

    domain_id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise InputError(f"domain {self.domain_id!r}: x and y must be 2-d with matching rows")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_samples(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for k teacher-generated regression domains.

    Either explicit `teachers` (one d_out x d_in matrix per domain) or a
    `similarity_plan` of pairwise cosine targets (realized exactly via a
    Gram factorization over an orthonormal matrix basis). Teacher norms
    equal `teacher_scale`.
    """

    k: int
    d_in: int
    d_out: int
    n_samples: tuple[int, ...]
    noise: float = 0.0
    teacher_scale: float = 1.0
    similarity_plan: np.ndarray | None = None
    teachers: tuple[np.ndarray, ...] | None = None
    domain_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.d_in < 1 or self.d_out < 1:
            raise ParameterError("d_in and d_out must be >= 1")
        n = tuple(int(v) for v in self.n_samples)
        if len(n) != self.k:
            raise ParameterError("n_samples must give one count per domain")
        if any(v < 8 for v in n):
            raise ParameterError("each domain needs at least 8 samples")
        object.__setattr__(self, "n_samples", n)
        if self.noise < 0:
            raise ParameterError("noise must be >= 0")
        if self.teacher_scale <= 0:
            raise ParameterError("teacher_scale must be > 0")
        if self.teachers is None and self.similarity_plan is None:
            raise ParameterError("spec needs teachers or a similarity_plan")
        if self.similarity_plan is not None:
            plan = np.asarray(self.similarity_plan, dtype=float)
            if plan.shape != (self.k, self.k):
                raise ParameterError(f"similarity_plan must be {self.k}x{self.k}")
            if not np.allclose(plan, plan.T, atol=1e-9):
                raise ParameterError("similarity_plan must be symmetric")
            if not np.allclose(np.diag(plan), 1.0, atol=1e-9):
                raise ParameterError("similarity_plan diagonal must be 1")
            plan.setflags(write=False)
            object.__setattr__(self, "similarity_plan", plan)
        if self.teachers is not None:
            teachers = tuple(np.asarray(t, dtype=float) for t in self.teachers)
            if len(teachers) != self.k:
                raise ParameterError("teachers must give one matrix per domain")
            for t in teachers:
                if t.shape != (self.d_out, self.d_in):
                    raise ParameterError(f"teacher shape {t.shape} != ({self.d_out}, {self.d_in})")
            object.__setattr__(self, "teachers", teachers)
        ids = self.domain_ids or tuple(f"dom{i}" for i in range(self.k))
        if len(ids) != self.k or len(set(ids)) != self.k:
            raise ParameterError("domain_ids must be k unique labels")
        object.__setattr__(self, "domain_ids", tuple(ids))

    def to_dict(self) -> dict:
        out = {
            "k": self.k,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "n_samples": list(self.n_samples),
            "noise": self.noise,
            "teacher_scale": self.teacher_scale,
            "domain_ids": list(self.domain_ids),
        }
        if self.similarity_plan is not None:
            out["similarity_plan"] = self.similarity_plan.tolist()
        if self.teachers is not None:
            out["teachers"] = [t.tolist() for t in self.teachers]
        return out

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SyntheticDomainSpec":
        known = {
            "k", "d_in", "d_out", "n_samples", "noise", "teacher_scale",
            "domain_ids", "similarity_plan", "teachers",
        }
        unknown = set(payload) - known
        if unknown:
            raise ParameterError(f"unknown spec keys: {sorted(unknown)}")
        n_samples = payload["n_samples"]
        if isinstance(n_samples, int):
            n_samples = [n_samples] * int(payload["k"])
        return cls(
            k=int(payload["k"]),
            d_in=int(payload["d_in"]),
            d_out=int(payload["d_out"]),
            n_samples=tuple(n_samples),
            noise=float(payload.get("noise", 0.0)),
            teacher_scale=float(payload.get("teacher_scale", 1.0)),
            similarity_plan=(
                np.asarray(payload["similarity_plan"], dtype=float)
                if payload.get("similarity_plan") is not None
                else None
            ),
            teachers=(
                tuple(np.asarray(t, dtype=float) for t in payload["teachers"])
                if payload.get("teachers") is not None
                else None
            ),
            domain_ids=tuple(payload["domain_ids"]) if payload.get("domain_ids") else None,
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticDomainSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _orthonormal_basis(count: int, d_out: int, d_in: int, rng: np.random.Generator) -> np.ndarray:
    """`count` orthonormal matrices under the flattened inner product."""
    space = d_out * d_in
    if count > space:
        raise SynthesisError(
            f"cannot build {count} orthonormal teachers in a {d_out}x{d_in} space"
        )
    raw = rng.standard_normal((space, count))
    q, _ = np.linalg.qr(raw)
    return q.T.reshape(count, d_out, d_in)


def plan_teachers(
    plan: np.ndarray, d_in: int, d_out: int, scale: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Teacher matrices whose pairwise cosines equal the plan exactly.

    Factor the target Gram matrix and mix an orthonormal matrix basis by
    the factor rows; an indefinite plan is infeasible and raises.
    """
    k = plan.shape[0]
    eigvals, eigvecs = np.linalg.eigh(plan)
    if eigvals.min() < -1e-8:
        raise SynthesisError(
            f"similarity plan is not positive semidefinite (min eigenvalue {eigvals.min():.3g})"
        )
    factor = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None)))
    basis = _orthonormal_basis(k, d_out, d_in, rng)
    return [scale * np.tensordot(factor[i], basis, axes=(0, 0)) for i in range(k)]


def teacher_cosines(teachers: Sequence[np.ndarray]) -> np.ndarray:
    flat = np.stack([t.ravel() for t in teachers])
    norms = np.linalg.norm(flat, axis=1)
    return (flat @ flat.T) / np.outer(norms, norms)


def synth_domains(spec: SyntheticDomainSpec, seed: int = 0) -> list[DomainData]:
    """Draw the spec's datasets: x standard Gaussian, y = teacher @ x + noise."""
    rng = np.random.default_rng(seed)
    if spec.teachers is not None:
        teachers = list(spec.teachers)
    else:
        teachers = plan_teachers(spec.similarity_plan, spec.d_in, spec.d_out, spec.teacher_scale, rng)
    data = []
    for i, teacher in enumerate(teachers):
        n = spec.n_samples[i]
        x = rng.standard_normal((n, spec.d_in))
        y = x @ teacher.T
        if spec.noise > 0:
            y = y + spec.noise * rng.standard_normal((n, spec.d_out))
        data.append(DomainData(domain_id=spec.domain_ids[i], x=x, y=y))
    return data


def spec_teachers(spec: SyntheticDomainSpec, seed: int = 0) -> list[np.ndarray]:
    """The teacher matrices a given (spec, seed) pair generates."""
    rng = np.random.default_rng(seed)
    if spec.teachers is not None:
        return list(spec.teachers)
    return plan_teachers(spec.similarity_plan, spec.d_in, spec.d_out, spec.teacher_scale, rng)


def affinity_from_plan(spec: SyntheticDomainSpec) -> AffinityMatrices:
    """Affinity matrices implied by a similarity plan (cosine-only scoring)."""
    if spec.similarity_plan is None:
        plan = teacher_cosines(spec.teachers)
    else:
        plan = spec.similarity_plan
    s = np.clip(plan, 0.0, 1.0)
    d = 1.0 - s
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(s, 1.0)
    return AffinityMatrices(
        domain_ids=spec.domain_ids,
        discrepancy=d,
        synergy=s,
        variant="embed-only",
        counts=spec.n_samples,
    )


def standard_suite(
    n_small: int = 32,
    n_big: int = 128,
    noise: float = 0.25,
    d_in: int = 6,
    d_out: int = 4,
) -> SyntheticDomainSpec:
    """The standard four-domain suite.

    A small synergistic pair (planted teacher cosine 0.9) next to a bulky
    pair that is hostile to it (cosine 0, four times the samples), echoing
    real multi-domain mixes where corpus sizes differ widely. The bulky
    pair is internally coherent, so a two-stage plan has one natural home
    for each pair.
    """
    plan = np.array(
        [
            [1.0, 0.9, 0.0, 0.0],
            [0.9, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.9],
            [0.0, 0.0, 0.9, 1.0],
        ]
    )
    return SyntheticDomainSpec(
        k=4,
        d_in=d_in,
        d_out=d_out,
        n_samples=(n_small, n_small, n_big, n_big),
        noise=noise,
        teacher_scale=1.0,
        similarity_plan=plan,
        domain_ids=("pair_a", "pair_b", "bulk_a", "bulk_b"),
    )


def probe_tasks_from_stats(
    stats: Sequence[DomainStats],
    d_in: int = 6,
    d_out: int = 4,
    n_per_domain: int = 64,
    noise: float = 1.0,
    teacher_scale: float = 1.0,
    seed: int = 0,
) -> tuple[SyntheticDomainSpec, list[DomainData]]:
    """Approximate a corpus run by linear-probe regression tasks.

    Teachers are rank-one maps built from each domain's projected mean
    embedding, so domains with close centroids get close teachers. This is
    a coarse stand-in for fine-tuning on the real text.
    """
    rng = np.random.default_rng(seed)
    dim = stats[0].dim
    projection = rng.standard_normal((d_in, dim)) / np.sqrt(dim)
    out_dir = rng.standard_normal(d_out)
    out_dir /= np.linalg.norm(out_dir)
    teachers = []
    for st in stats:
        direction = projection @ st.mean_embedding
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            raise SynthesisError(f"domain {st.domain_id!r} has a zero centroid; no probe task")
        direction /= norm
        teachers.append(teacher_scale * np.outer(out_dir, direction))
    spec = SyntheticDomainSpec(
        k=len(stats),
        d_in=d_in,
        d_out=d_out,
        n_samples=tuple(n_per_domain for _ in stats),
        noise=noise,
        teacher_scale=teacher_scale,
        teachers=tuple(teachers),
        domain_ids=tuple(st.domain_id for st in stats),
    )
    return spec, synth_domains(spec, seed=seed)
