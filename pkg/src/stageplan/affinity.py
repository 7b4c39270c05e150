"""Pairwise domain affinity: the discrepancy and synergy matrices.

Discrepancy between two domains is the Jensen-Shannon divergence of their
pooled unigram+bigram token distributions, normalized to [0, 1] by log 2.
Synergy averages lexical overlap (vocabulary Jaccard) with semantic
closeness (mean-embedding cosine, clamped to [0, 1]).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import DomainStats, TokenDistribution
from .errors import AffinityError, ParameterError

VARIANTS = ("full", "js-only", "embed-only")

_LN2 = math.log(2.0)


def _probs(dist) -> Mapping[str, float]:
    if isinstance(dist, TokenDistribution):
        return dist.probs
    return dist


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in [0, 1].

    Computed with natural logs against the even mixture of the two
    distributions, then divided by ln 2, which equals the base-2 value.
    Zero exactly for identical inputs, one for disjoint supports.
    """
    pp, qp = _probs(p), _probs(q)
    acc = 0.0
    for key in pp.keys() | qp.keys():
        pv = pp.get(key, 0.0)
        qv = qp.get(key, 0.0)
        m = 0.5 * (pv + qv)
        if pv > 0.0:
            acc += 0.5 * pv * math.log(pv / m)
        if qv > 0.0:
            acc += 0.5 * qv * math.log(qv / m)
    return acc / _LN2


def jaccard(vocab_i: set, vocab_j: set) -> float:
    """Vocabulary overlap |intersection| / |union|."""
    if not vocab_i and not vocab_j:
        raise AffinityError("jaccard is undefined for two empty vocabularies")
    union = len(vocab_i | vocab_j)
    return len(vocab_i & vocab_j) / union


def embedding_cosine(mu_i: np.ndarray, mu_j: np.ndarray) -> float:
    """Cosine similarity of two mean embeddings, clamped to [0, 1].

    Negative cosines clamp to zero: anti-aligned domains carry no synergy.
    """
    u = np.asarray(mu_i, dtype=float)
    v = np.asarray(mu_j, dtype=float)
    if u.shape != v.shape:
        raise AffinityError(f"embedding dimensions differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 and nv == 0.0:
        raise AffinityError("cosine is undefined for two zero embeddings")
    if nu == 0.0 or nv == 0.0:
        return 0.0
    cos = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(0.0, cos))


def synergy(stats_i: DomainStats, stats_j: DomainStats) -> float:
    """Mean of vocabulary Jaccard and clamped embedding cosine."""
    return 0.5 * (
        jaccard(stats_i.vocab, stats_j.vocab)
        + embedding_cosine(stats_i.mean_embedding, stats_j.mean_embedding)
    )


@dataclass(frozen=True)
class AffinityMatrices:
    """Symmetric k x k discrepancy and synergy matrices over named domains.

    `counts` optionally carries per-domain sample counts so downstream
    planning can derive mixing weights without re-reading the corpora.
    """

    domain_ids: tuple[str, ...]
    discrepancy: np.ndarray
    synergy: np.ndarray
    variant: str
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        ids = tuple(self.domain_ids)
        object.__setattr__(self, "domain_ids", ids)
        if len(set(ids)) != len(ids):
            raise AffinityError("duplicate domain_ids")
        k = len(ids)
        d = np.asarray(self.discrepancy, dtype=float)
        s = np.asarray(self.synergy, dtype=float)
        for name, mat in (("discrepancy", d), ("synergy", s)):
            if mat.shape != (k, k):
                raise AffinityError(f"{name} matrix must be {k}x{k}, got {mat.shape}")
            if not np.allclose(mat, mat.T, atol=1e-9):
                raise AffinityError(f"{name} matrix is not symmetric")
            if mat.min() < -1e-9 or mat.max() > 1.0 + 1e-9:
                raise AffinityError(f"{name} entries must lie in [0, 1]")
        if not np.allclose(np.diag(d), 0.0, atol=1e-9):
            raise AffinityError("discrepancy diagonal must be zero")
        if not np.allclose(np.diag(s), 1.0, atol=1e-9):
            raise AffinityError("synergy diagonal must be one")
        if self.counts is not None:
            counts = tuple(int(n) for n in self.counts)
            if len(counts) != k or any(n < 1 for n in counts):
                raise AffinityError("counts must give one positive sample count per domain")
            object.__setattr__(self, "counts", counts)
        d.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "discrepancy", d)
        object.__setattr__(self, "synergy", s)

    @property
    def k(self) -> int:
        return len(self.domain_ids)

    def to_dict(self) -> dict:
        out = {
            "domain_ids": list(self.domain_ids),
            "d": self.discrepancy.tolist(),
            "s": self.synergy.tolist(),
            "variant": self.variant,
        }
        if self.counts is not None:
            out["n"] = {d: n for d, n in zip(self.domain_ids, self.counts)}
        return out

    @classmethod
    def from_dict(cls, payload: Mapping) -> "AffinityMatrices":
        try:
            ids = tuple(payload["domain_ids"])
            d = np.asarray(payload["d"], dtype=float)
            s = np.asarray(payload["s"], dtype=float)
            variant = payload["variant"]
        except KeyError as exc:
            raise AffinityError(f"affinity payload lacks field {exc.args[0]!r}") from exc
        counts = None
        if "n" in payload and payload["n"] is not None:
            counts = tuple(int(payload["n"][domain]) for domain in ids)
        return cls(domain_ids=ids, discrepancy=d, synergy=s, variant=variant, counts=counts)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "AffinityMatrices":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_csv(self, path: str | Path) -> None:
        """Long-form pair listing for eyeballing."""
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["domain_i", "domain_j", "discrepancy", "synergy"])
            for i in range(self.k):
                for j in range(i + 1, self.k):
                    writer.writerow(
                        [
                            self.domain_ids[i],
                            self.domain_ids[j],
                            f"{self.discrepancy[i, j]:.6f}",
                            f"{self.synergy[i, j]:.6f}",
                        ]
                    )


def build_matrices(stats: Sequence[DomainStats], variant: str = "full") -> AffinityMatrices:
    """Assemble the k x k matrices from per-domain statistics.

    Variants: 'full' pairs JS discrepancy with Jaccard+cosine synergy;
    'js-only' keeps JS and zeroes synergy; 'embed-only' scores both sides
    from the clamped cosine (d = 1 - cos, s = cos).
    """
    stats = list(stats)
    k = len(stats)
    if k < 2:
        raise AffinityError(f"need at least 2 domains, got {k}")
    ids = [st.domain_id for st in stats]
    if len(set(ids)) != len(ids):
        raise AffinityError("duplicate domain_ids")
    if variant not in VARIANTS:
        raise AffinityError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    dims = {st.dim for st in stats}
    if len(dims) != 1:
        raise AffinityError(f"embedding dimensions differ across domains: {sorted(dims)}")

    d = np.zeros((k, k))
    s = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            if variant == "embed-only":
                cos = embedding_cosine(stats[i].mean_embedding, stats[j].mean_embedding)
                dij, sij = 1.0 - cos, cos
            else:
                dij = js_divergence(stats[i].distribution, stats[j].distribution)
                sij = 0.0 if variant == "js-only" else synergy(stats[i], stats[j])
            d[i, j] = d[j, i] = dij
            s[i, j] = s[j, i] = sij
    # Guard against sub-ulp excursions from the float sums.
    np.clip(d, 0.0, 1.0, out=d)
    np.clip(s, 0.0, 1.0, out=s)
    return AffinityMatrices(
        domain_ids=tuple(ids),
        discrepancy=d,
        synergy=s,
        variant=variant,
        counts=tuple(st.n_docs for st in stats),
    )


def blend_gradient_affinity(
    base: AffinityMatrices, grad_cos: np.ndarray, weight: float
) -> AffinityMatrices:
    """Mix a gradient-cosine signal into the synergy matrix.

    s' = (1 - weight) * s + weight * clamp(grad_cos, 0, 1); discrepancy is
    left untouched and the variant tag records the blend weight.
    """
    if not 0.0 <= weight <= 1.0:
        raise ParameterError(f"blend weight must lie in [0, 1], got {weight}")
    grad = np.asarray(grad_cos, dtype=float)
    if grad.shape != (base.k, base.k):
        raise AffinityError(f"gradient matrix must be {base.k}x{base.k}, got {grad.shape}")
    if not np.allclose(grad, grad.T, atol=1e-9):
        raise AffinityError("gradient matrix is not symmetric")
    blended = (1.0 - weight) * base.synergy + weight * np.clip(grad, 0.0, 1.0)
    np.fill_diagonal(blended, 1.0)
    return replace(
        base,
        synergy=blended,
        variant=f"gradient-mix({weight:g})",
    )
