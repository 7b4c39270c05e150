"""Stage partitioning: objective evaluation, solvers, and risk-bound calculators.

A partition assigns the k domains to disjoint training stages. Its score
rewards intra-stage synergy, penalizes intra-stage discrepancy, and
charges a capacity cost per stage:

    score = -sum_t [ sum_{i<j in S_t} d_ij
                     - synergy_weight * sum_{i<j in S_t} s_ij
                     + cap(S_t) ]

with cap(S_t) = backbone_cap_weight * backbone_budget^2
              + adapter_cap_weight * |S_t| * adapter_budget^2
at planning time (realized norms can be substituted afterwards). Two
solvers maximize the score over partitions into at most `max_stages`
blocks: exhaustive enumeration (small k) and a greedy agglomerative
search with local-move refinement.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .affinity import AffinityMatrices, build_matrices
from .corpus import DomainStats
from .errors import CapabilityError, InputError, ParameterError

# Bell(14) is about 1.9e8 candidate partitions, the practical ceiling for
# exhaustive enumeration on a desk machine.
EXACT_DOMAIN_GUARD = 14


@dataclass(frozen=True)
class ObjectiveParams:
    """Every scalar knob of the partition objective and its risk bounds.

    synergy_weight      weight on intra-stage synergy versus discrepancy
    backbone_cap_weight / adapter_cap_weight
                        capacity-cost weights on squared update norms
    backbone_budget / adapter_budget
                        norm budgets the trainer enforces per stage
    max_stages          partitions may use at most this many stages
    discrepancy_coef    multiplier on the pairwise-discrepancy bound term
    loss_lipschitz / output_lipschitz
                        Lipschitz constants entering the complexity term
    confidence          tail probability of the statistical terms
    pair_average        divide intra-stage sums by the stage's pair count
    """

    synergy_weight: float = 0.5
    backbone_cap_weight: float = 1.0
    adapter_cap_weight: float = 1.0
    backbone_budget: float = 0.1
    adapter_budget: float = 0.1
    max_stages: int = 2
    discrepancy_coef: float = 1.0
    loss_lipschitz: float = 1.0
    output_lipschitz: float = 1.0
    confidence: float = 0.05
    pair_average: bool = False

    def __post_init__(self):
        if self.synergy_weight < 0:
            raise ParameterError("synergy_weight must be >= 0")
        for name in ("backbone_cap_weight", "adapter_cap_weight", "backbone_budget", "adapter_budget"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.max_stages < 1:
            raise ParameterError("max_stages must be >= 1")
        if self.discrepancy_coef <= 0:
            raise ParameterError("discrepancy_coef must be > 0")
        if self.loss_lipschitz <= 0 or self.output_lipschitz <= 0:
            raise ParameterError("Lipschitz constants must be > 0")
        if not 0.0 < self.confidence < 1.0:
            raise ParameterError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class Partition:
    """Ordered disjoint non-empty blocks of domain indices."""

    stages: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        stages = tuple(tuple(int(i) for i in stage) for stage in self.stages)
        object.__setattr__(self, "stages", stages)
        seen: set[int] = set()
        for stage in stages:
            if not stage:
                raise ParameterError("partition stages must be non-empty")
            for i in stage:
                if i in seen:
                    raise ParameterError(f"domain index {i} appears in two stages")
                seen.add(i)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_domains(self) -> int:
        return sum(len(stage) for stage in self.stages)

    def require_cover(self, k: int) -> None:
        covered = {i for stage in self.stages for i in stage}
        if covered != set(range(k)):
            raise ParameterError(f"partition does not cover exactly 0..{k - 1}")

    def canonical(self) -> "Partition":
        blocks = sorted((tuple(sorted(stage)) for stage in self.stages), key=lambda b: b[0])
        return Partition(tuple(blocks))

    def labels(self, k: int) -> np.ndarray:
        """Stage index per domain, following this partition's stage order."""
        self.require_cover(k)
        out = np.empty(k, dtype=int)
        for t, stage in enumerate(self.stages):
            for i in stage:
                out[i] = t
        return out


def capacity_proxy(stage: Iterable[int], params: ObjectiveParams) -> float:
    """Planning-time stand-in for a stage's capacity cost, using the norm
    budgets as upper bounds on the realized update norms."""
    size = len(tuple(stage))
    if size == 0:
        raise ParameterError("stage must be non-empty")
    return (
        params.backbone_cap_weight * params.backbone_budget**2
        + params.adapter_cap_weight * size * params.adapter_budget**2
    )


def _stage_cost(
    sum_d: float,
    sum_s: float,
    size: int,
    params: ObjectiveParams,
    capacity: float | None = None,
) -> float:
    value = sum_d - params.synergy_weight * sum_s
    n_pairs = size * (size - 1) // 2
    if params.pair_average and n_pairs > 0:
        value /= n_pairs
    if capacity is None:
        capacity = (
            params.backbone_cap_weight * params.backbone_budget**2
            + params.adapter_cap_weight * size * params.adapter_budget**2
        )
    return value + capacity


def partition_objective(
    partition: Partition,
    matrices: AffinityMatrices,
    params: ObjectiveParams | None = None,
    stage_capacities: Sequence[float] | None = None,
) -> float:
    """Score of a partition under the stage objective.

    `stage_capacities` substitutes realized per-stage capacity costs for
    the planning-time proxy (used for post-hoc scoring after training).
    """
    params = params or ObjectiveParams()
    partition.require_cover(matrices.k)
    if stage_capacities is not None and len(stage_capacities) != partition.n_stages:
        raise ParameterError("stage_capacities must give one value per stage")
    d = matrices.discrepancy
    s = matrices.synergy
    n_stages = partition.n_stages
    membership = np.zeros((matrices.k, n_stages))
    sizes = np.empty(n_stages, dtype=int)
    for t, stage in enumerate(partition.stages):
        membership[list(stage), t] = 1.0
        sizes[t] = len(stage)
    # Intra-stage pair sums via one-hot projection; the synergy diagonal
    # of ones is removed by subtracting the stage size.
    sums_d = (membership * (d @ membership)).sum(axis=0) / 2.0
    sums_s = ((membership * (s @ membership)).sum(axis=0) - sizes) / 2.0
    cost = 0.0
    for t in range(n_stages):
        capacity = None if stage_capacities is None else float(stage_capacities[t])
        cost += _stage_cost(float(sums_d[t]), float(sums_s[t]), int(sizes[t]), params, capacity)
    return -cost


def iter_partitions(k: int, max_blocks: int) -> Iterator[tuple[tuple[int, ...], ...]]:
    """Yield every partition of 0..k-1 into at most `max_blocks` blocks,
    in canonical form (blocks ordered by first element)."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if max_blocks < 1:
        raise ParameterError("max_blocks must be >= 1")
    blocks: list[list[int]] = []

    def rec(i: int) -> Iterator[tuple[tuple[int, ...], ...]]:
        if i == k:
            yield tuple(tuple(b) for b in blocks)
            return
        for block in blocks:
            block.append(i)
            yield from rec(i + 1)
            block.pop()
        if len(blocks) < max_blocks:
            blocks.append([i])
            yield from rec(i + 1)
            blocks.pop()

    yield from rec(0)


def enumerate_exact(
    matrices: AffinityMatrices, params: ObjectiveParams | None = None
) -> tuple[Partition, float]:
    """Globally optimal partition by exhaustive enumeration.

    Scans every partition into at most `max_stages` blocks, maintaining
    per-block affinity sums incrementally; ties on the objective resolve
    to the lexicographically smallest canonical form. Guarded at
    k <= EXACT_DOMAIN_GUARD; beyond that, use `agglomerative_search`.
    """
    params = params or ObjectiveParams()
    k = matrices.k
    if k > EXACT_DOMAIN_GUARD:
        raise CapabilityError(
            f"exact enumeration is limited to k <= {EXACT_DOMAIN_GUARD} domains "
            f"(got {k}); use agglomerative_search instead"
        )
    max_blocks = min(params.max_stages, k)
    drow = [list(map(float, row)) for row in matrices.discrepancy]
    srow = [list(map(float, row)) for row in matrices.synergy]
    lam = params.synergy_weight
    pair_average = params.pair_average
    cap_backbone = params.backbone_cap_weight * params.backbone_budget**2
    cap_adapter = params.adapter_cap_weight * params.adapter_budget**2

    blocks: list[list[int]] = []
    sums_d: list[float] = []
    sums_s: list[float] = []
    best_score = -math.inf
    best_blocks: tuple[tuple[int, ...], ...] | None = None

    def leaf_score() -> float:
        cost = 0.0
        for members, sd, ss in zip(blocks, sums_d, sums_s):
            size = len(members)
            value = sd - lam * ss
            if pair_average and size > 1:
                value /= size * (size - 1) // 2
            cost += value + cap_backbone + cap_adapter * size
        return -cost

    def rec(i: int) -> None:
        nonlocal best_score, best_blocks
        if i == k:
            score = leaf_score()
            if score > best_score:
                best_score = score
                best_blocks = tuple(tuple(b) for b in blocks)
            elif score == best_score:
                candidate = tuple(tuple(b) for b in blocks)
                if candidate < best_blocks:
                    best_blocks = candidate
            return
        di = drow[i]
        si = srow[i]
        for b_idx, members in enumerate(blocks):
            add_d = sum(di[j] for j in members)
            add_s = sum(si[j] for j in members)
            old_d, old_s = sums_d[b_idx], sums_s[b_idx]
            members.append(i)
            sums_d[b_idx] = old_d + add_d
            sums_s[b_idx] = old_s + add_s
            rec(i + 1)
            members.pop()
            sums_d[b_idx] = old_d
            sums_s[b_idx] = old_s
        if len(blocks) < max_blocks:
            blocks.append([i])
            sums_d.append(0.0)
            sums_s.append(0.0)
            rec(i + 1)
            blocks.pop()
            sums_d.pop()
            sums_s.pop()

    rec(0)
    partition = Partition(best_blocks)
    # Report the score from the canonical evaluator so callers comparing
    # against independent evaluations see a single summation order.
    return partition, partition_objective(partition, matrices, params)


def agglomerative_search(
    matrices: AffinityMatrices,
    params: ObjectiveParams | None = None,
    refine: bool = True,
) -> tuple[Partition, float]:
    """Greedy bottom-up partition search in O(k^2 log k).

    Starts from singletons and repeatedly merges the pair of stages with
    the largest exact objective gain (priority queue over cross-stage
    affinity sums, maintained additively across merges). Merging is
    forced while the stage count exceeds `max_stages`; afterwards it
    continues only while the best merge strictly improves the objective.
    Ties pick the lowest-index pair. A bounded pass of single-domain
    relocations then polishes the result; it can only increase the score.
    """
    params = params or ObjectiveParams()
    k = matrices.k
    if k == 1:
        partition = Partition(((0,),))
        return partition, partition_objective(partition, matrices, params)
    max_blocks = min(params.max_stages, k)

    # Plain lists beat ndarray indexing by a wide margin at these sizes.
    cross_d = [row[:] for row in matrices.discrepancy.tolist()]
    cross_s = [row[:] for row in matrices.synergy.tolist()]
    for i in range(k):
        cross_d[i][i] = 0.0
        cross_s[i][i] = 0.0
    intra_d = [0.0] * k
    intra_s = [0.0] * k
    size = [1] * k
    alive = [True] * k
    members: list[list[int]] = [[i] for i in range(k)]
    n_active = k

    lam = params.synergy_weight
    cap_backbone = params.backbone_cap_weight * params.backbone_budget**2

    if params.pair_average:

        def merge_gain(a: int, b: int) -> float:
            before = _stage_cost(intra_d[a], intra_s[a], size[a], params) + _stage_cost(
                intra_d[b], intra_s[b], size[b], params
            )
            after = _stage_cost(
                intra_d[a] + intra_d[b] + cross_d[a][b],
                intra_s[a] + intra_s[b] + cross_s[a][b],
                size[a] + size[b],
                params,
            )
            return before - after

    else:
        # Raw sums telescope: merging only adds the cross-stage pair terms
        # and saves one backbone capacity charge.
        def merge_gain(a: int, b: int) -> float:
            return lam * cross_s[a][b] - cross_d[a][b] + cap_backbone

    heap = [(-merge_gain(a, b), a, b) for a in range(k) for b in range(a + 1, k)]
    heapq.heapify(heap)

    while n_active > 1:
        while heap:
            neg_gain, a, b = heap[0]
            if alive[a] and alive[b] and -neg_gain == merge_gain(a, b):
                break
            heapq.heappop(heap)
        if not heap:
            break
        gain = -heap[0][0]
        a, b = heap[0][1], heap[0][2]
        if n_active <= max_blocks and gain <= 0.0:
            break
        heapq.heappop(heap)
        intra_d[a] += intra_d[b] + cross_d[a][b]
        intra_s[a] += intra_s[b] + cross_s[a][b]
        size[a] += size[b]
        members[a].extend(members[b])
        members[b] = []
        alive[b] = False
        n_active -= 1
        row_da, row_db = cross_d[a], cross_d[b]
        row_sa, row_sb = cross_s[a], cross_s[b]
        for c in range(k):
            row_da[c] += row_db[c]
            row_sa[c] += row_sb[c]
            cross_d[c][a] = row_da[c]
            cross_s[c][a] = row_sa[c]
        row_da[a] = 0.0
        row_sa[a] = 0.0
        for c in range(k):
            if c != a and alive[c]:
                lo, hi = (a, c) if a < c else (c, a)
                heapq.heappush(heap, (-merge_gain(lo, hi), lo, hi))

    blocks = [sorted(members[c]) for c in range(k) if alive[c]]
    blocks.sort(key=lambda block: block[0])
    if refine:
        blocks = _refine_by_moves(blocks, matrices, params, max_blocks)
        partition = Partition(tuple(tuple(b) for b in blocks))
        return partition, partition_objective(partition, matrices, params)
    # Score from the maintained block sums; agrees with the canonical
    # evaluator to float accumulation error (< 1e-12 on unit-scale inputs).
    cap_adapter = params.adapter_cap_weight * params.adapter_budget**2
    pair_average = params.pair_average
    cost = 0.0
    for c in range(k):
        if not alive[c]:
            continue
        value = intra_d[c] - lam * intra_s[c]
        n_pairs = size[c] * (size[c] - 1) // 2
        if pair_average and n_pairs:
            value /= n_pairs
        cost += value + cap_backbone + cap_adapter * size[c]
    partition = Partition(tuple(tuple(b) for b in blocks))
    return partition, -cost


class _MoveState:
    """Mutable stage assignment with vectorized relocation-gain scans."""

    def __init__(self, blocks: list[list[int]], matrices: AffinityMatrices, params: ObjectiveParams):
        self.k = matrices.k
        self.d0 = matrices.discrepancy.astype(float).copy()
        self.s0 = matrices.synergy.astype(float).copy()
        np.fill_diagonal(self.d0, 0.0)
        np.fill_diagonal(self.s0, 0.0)
        self.params = params
        self.stages: list[list[int]] = [list(b) for b in blocks]
        self.assign = [0] * self.k
        for t, block in enumerate(self.stages):
            for i in block:
                self.assign[i] = t
        self.intra_d = [float(self.d0[np.ix_(b, b)].sum()) / 2.0 for b in self.stages]
        self.intra_s = [float(self.s0[np.ix_(b, b)].sum()) / 2.0 for b in self.stages]

    def snapshot(self):
        return (
            [list(b) for b in self.stages],
            list(self.assign),
            list(self.intra_d),
            list(self.intra_s),
        )

    def restore(self, snap) -> None:
        stages, assign, intra_d, intra_s = snap
        self.stages = [list(b) for b in stages]
        self.assign = list(assign)
        self.intra_d = list(intra_d)
        self.intra_s = list(intra_s)

    def n_nonempty(self) -> int:
        return sum(1 for block in self.stages if block)

    def candidate_moves(self, moved: set[int], max_blocks: int) -> list[tuple[float, int, int]]:
        """All feasible (gain, domain, target) relocations, best gain first.

        A target index equal to len(stages) opens a fresh singleton stage.
        One point-to-stage matrix product prices every candidate at once.
        """
        params = self.params
        n_slots = len(self.stages)
        membership = np.zeros((self.k, n_slots))
        for t, block in enumerate(self.stages):
            for j in block:
                membership[j, t] = 1.0
        point_d = self.d0 @ membership
        point_s = self.s0 @ membership
        sizes = [len(block) for block in self.stages]
        costs = [
            _stage_cost(self.intra_d[t], self.intra_s[t], sizes[t], params) if sizes[t] else 0.0
            for t in range(n_slots)
        ]
        can_open = self.n_nonempty() < max_blocks
        open_cost = _stage_cost(0.0, 0.0, 1, params)
        out = []
        for i in range(self.k):
            if i in moved:
                continue
            src = self.assign[i]
            if sizes[src] == 1:
                released = costs[src]
            else:
                released = costs[src] - _stage_cost(
                    self.intra_d[src] - point_d[i, src],
                    self.intra_s[src] - point_s[i, src],
                    sizes[src] - 1,
                    params,
                )
            for t in range(n_slots):
                if t == src or not sizes[t]:
                    continue
                added = _stage_cost(
                    self.intra_d[t] + point_d[i, t],
                    self.intra_s[t] + point_s[i, t],
                    sizes[t] + 1,
                    params,
                ) - costs[t]
                out.append((released - added, i, t))
            if can_open and sizes[src] > 1:
                out.append((released - open_cost, i, n_slots))
        out.sort(key=lambda c: (-c[0], c[1], c[2]))
        return out

    def apply_move(self, i: int, tgt: int) -> None:
        src = self.assign[i]
        others = self.stages[src]
        rem_d = float(self.d0[i, others].sum())
        rem_s = float(self.s0[i, others].sum())
        self.stages[src].remove(i)
        self.intra_d[src] -= rem_d
        self.intra_s[src] -= rem_s
        if tgt == len(self.stages):
            self.stages.append([i])
            self.intra_d.append(0.0)
            self.intra_s.append(0.0)
            tgt = len(self.stages) - 1
        else:
            add_d = float(self.d0[i, self.stages[tgt]].sum())
            add_s = float(self.s0[i, self.stages[tgt]].sum())
            self.stages[tgt].append(i)
            self.intra_d[tgt] += add_d
            self.intra_s[tgt] += add_s
        self.assign[i] = tgt

    def blocks(self) -> list[list[int]]:
        result = [sorted(block) for block in self.stages if block]
        result.sort(key=lambda block: block[0])
        return result


def _run_chain(
    state: _MoveState,
    first: tuple[float, int, int],
    max_blocks: int,
    max_chain: int,
) -> tuple[float, list[tuple[int, int]]]:
    """Greedy move chain seeded with `first`; returns its best prefix."""
    moved: set[int] = set()
    chain: list[tuple[int, int]] = []
    cumulative = 0.0
    best_cumulative = 0.0
    best_length = 0
    gain, i, tgt = first
    for _ in range(max_chain):
        state.apply_move(i, tgt)
        moved.add(i)
        chain.append((i, tgt))
        cumulative += gain
        if cumulative > best_cumulative + 1e-12:
            best_cumulative = cumulative
            best_length = len(chain)
        candidates = state.candidate_moves(moved, max_blocks)
        if not candidates:
            break
        gain, i, tgt = candidates[0]
    return best_cumulative, chain[:best_length]


def _refine_by_moves(
    blocks: list[list[int]],
    matrices: AffinityMatrices,
    params: ObjectiveParams,
    max_blocks: int,
    max_chain: int = 12,
    n_starts: int = 8,
    max_passes: int = 40,
) -> list[list[int]]:
    """Variable-depth relocation refinement.

    Each pass seeds a short move chain from each of the best first relocations,
    lets every chain take temporarily worsening steps (a domain moves at
    most once per chain), and keeps the best-scoring prefix over all
    chains. This escapes the pair-trading local optima plain hill
    climbing gets stuck in; the chain-length and start-count caps keep a
    pass at O(k^2 * stages) work.
    """
    k = matrices.k
    if k < 3:
        return blocks
    state = _MoveState(blocks, matrices, params)
    max_chain = min(max_chain, k)
    for _ in range(max_passes):
        snap = state.snapshot()
        starts = state.candidate_moves(set(), max_blocks)[:n_starts]
        best_gain = 0.0
        best_chain: list[tuple[int, int]] = []
        for first in starts:
            gain, chain = _run_chain(state, first, max_blocks, max_chain)
            state.restore(snap)
            if gain > best_gain + 1e-12:
                best_gain = gain
                best_chain = chain
        if not best_chain:
            break
        for i, tgt in best_chain:
            state.apply_move(i, tgt)
    return state.blocks()


def solve_partition(
    matrices: AffinityMatrices,
    params: ObjectiveParams | None = None,
    solver: str = "auto",
    refine: bool = True,
) -> tuple[Partition, float, str]:
    """Dispatch to the exact or heuristic solver; returns the one used."""
    params = params or ObjectiveParams()
    if solver == "auto":
        solver = "exact" if matrices.k <= EXACT_DOMAIN_GUARD else "agglomerative"
    if solver == "exact":
        partition, score = enumerate_exact(matrices, params)
    elif solver == "agglomerative":
        partition, score = agglomerative_search(matrices, params, refine=refine)
    else:
        raise ParameterError(f"unknown solver {solver!r}")
    return partition, score, solver


def random_partition(k: int, max_blocks: int, rng: np.random.Generator) -> Partition:
    """Uniform random stage assignment, canonicalized; at most max_blocks stages."""
    labels = rng.integers(0, max(1, min(max_blocks, k)), size=k)
    blocks: dict[int, list[int]] = {}
    for i, label in enumerate(labels):
        blocks.setdefault(int(label), []).append(i)
    ordered = sorted(blocks.values(), key=lambda block: block[0])
    return Partition(tuple(tuple(b) for b in ordered))


def update_complexity(params: ObjectiveParams, alphas: Sequence[float]) -> float:
    """Complexity term 2*L*B*(backbone_budget + sum_j alpha_j * adapter_budget).

    The mixing weights must form a simplex; with a shared adapter budget
    the weighted sum collapses to the budget itself.
    """
    alphas = np.asarray(list(alphas), dtype=float)
    if abs(float(alphas.sum()) - 1.0) > 1e-9:
        raise ParameterError(f"mixing weights must sum to 1, got {float(alphas.sum())}")
    weighted_adapter = float(np.sum(alphas * params.adapter_budget))
    return (
        2.0
        * params.loss_lipschitz
        * params.output_lipschitz
        * (params.backbone_budget + weighted_adapter)
    )


@dataclass(frozen=True)
class BoundReport:
    """Additive decomposition of the concurrent risk bound.

    total = empirical_term + complexity_term + discrepancy_term
          + statistical_term; stage_bound carries the worst-stage bound
    when a partition score was supplied.
    """

    empirical_term: float
    complexity_term: float
    discrepancy_term: float
    statistical_term: float
    total: float
    stage_bound: float | None = None

    def __post_init__(self):
        for name in ("empirical_term", "complexity_term", "discrepancy_term", "statistical_term"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        expected = (
            self.empirical_term
            + self.complexity_term
            + self.discrepancy_term
            + self.statistical_term
        )
        if abs(self.total - expected) > 1e-9:
            raise ParameterError("total must equal the sum of its components")

    def to_dict(self) -> dict:
        return {
            "empirical_term": self.empirical_term,
            "complexity_term": self.complexity_term,
            "discrepancy_term": self.discrepancy_term,
            "statistical_term": self.statistical_term,
            "total": self.total,
            "stage_bound": self.stage_bound,
        }


def multisource_risk_bound(
    empirical: float,
    matrices: AffinityMatrices | None,
    params: ObjectiveParams | None = None,
    n_total: int = 1,
    g_value: float | None = None,
) -> BoundReport:
    """Bound on the weighted multi-domain risk of a norm-restricted model.

    Adds to the empirical risk: the update-complexity term, the averaged
    pairwise-discrepancy penalty (discrepancy_coef / k times the full
    ordered-pair sum), and a sqrt(ln(1/confidence) / (2 n)) tail (the
    statistical constant is fixed at sqrt(1/2)). When `g_value` is given,
    the worst-stage bound for that score is attached as `stage_bound`.
    With no affinity matrices the discrepancy penalty is zero.
    """
    params = params or ObjectiveParams()
    if empirical < 0:
        raise ParameterError("empirical risk must be >= 0")
    if n_total < 1:
        raise ParameterError("n_total must be >= 1")
    complexity = 2.0 * params.loss_lipschitz * params.output_lipschitz * (
        params.backbone_budget + params.adapter_budget
    )
    discrepancy = 0.0
    if matrices is not None:
        discrepancy = params.discrepancy_coef / matrices.k * float(matrices.discrepancy.sum())
    statistical = math.sqrt(math.log(1.0 / params.confidence) / (2.0 * n_total))
    stage_bound = None
    if g_value is not None:
        stage_bound = stage_risk_bound(g_value, n_total, params.confidence)
    return BoundReport(
        empirical_term=empirical,
        complexity_term=complexity,
        discrepancy_term=discrepancy,
        statistical_term=statistical,
        total=empirical + complexity + discrepancy + statistical,
        stage_bound=stage_bound,
    )


def stage_risk_bound(g_value: float, n_total: int, confidence: float = 0.05) -> float:
    """Worst-stage risk bound: max(0, 1 - score) + sqrt(ln(1/confidence)/N).

    Unit constant on the statistical tail. Non-increasing in the score and
    in the sample count.
    """
    if n_total < 1:
        raise ParameterError("n_total must be >= 1")
    if not 0.0 < confidence < 1.0:
        raise ParameterError("confidence must lie in (0, 1)")
    return max(0.0, 1.0 - g_value) + math.sqrt(math.log(1.0 / confidence) / n_total)


def check_grouping_condition(
    domain_subset: Sequence[int],
    matrices: AffinityMatrices,
    params: ObjectiveParams | None = None,
) -> str:
    """Decide whether a subset is guaranteed to co-group in an optimal plan.

    Returns 'group' when the subset's minimum pairwise synergy strictly
    exceeds (max pairwise discrepancy + capacity cost of the merged
    subset) / synergy_weight, else 'no-guarantee'.
    """
    params = params or ObjectiveParams()
    subset = sorted(set(int(i) for i in domain_subset))
    if len(subset) < 2:
        raise ParameterError("the subset must contain at least 2 domains")
    if subset[0] < 0 or subset[-1] >= matrices.k:
        raise ParameterError("subset indices out of range")
    if params.synergy_weight <= 0.0:
        return "no-guarantee"
    pairs = list(itertools.combinations(subset, 2))
    min_synergy = min(float(matrices.synergy[i, j]) for i, j in pairs)
    max_discrepancy = max(float(matrices.discrepancy[i, j]) for i, j in pairs)
    threshold = (max_discrepancy + capacity_proxy(subset, params)) / params.synergy_weight
    return "group" if min_synergy > threshold else "no-guarantee"


@dataclass(frozen=True)
class StagePlan:
    """An executable multi-stage plan over named domains.

    Stage order is cosmetic (descending mean intra-stage synergy by
    default); mixing weights inside each stage are proportional to the
    domains' sample counts.
    """

    domain_ids: tuple[str, ...]
    stages: tuple[tuple[str, ...], ...]
    alpha: tuple[dict[str, float], ...]
    rho_theta: float
    rho_phi: float
    synergy_weight: float
    g_value: float
    g_pair_averaged: float
    bound: float
    variant: str
    ordering_rationale: str = "synergy-desc"
    counts: dict[str, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "domain_ids", tuple(self.domain_ids))
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        object.__setattr__(self, "alpha", tuple(dict(a) for a in self.alpha))
        if len(self.alpha) != len(self.stages):
            raise ParameterError("alpha must give one weight map per stage")
        for stage, weights in zip(self.stages, self.alpha):
            if set(stage) != set(weights):
                raise ParameterError("alpha keys must match the stage's domains")
            total = sum(weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ParameterError(f"stage weights sum to {total}, expected 1")
            if any(w <= 0 for w in weights.values()):
                raise ParameterError("stage weights must be positive")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def index_partition(self) -> Partition:
        """The plan's stages as indices into `domain_ids`."""
        pos = {d: i for i, d in enumerate(self.domain_ids)}
        return Partition(tuple(tuple(pos[d] for d in stage) for stage in self.stages))

    def to_dict(self) -> dict:
        out = {
            "stages": [list(stage) for stage in self.stages],
            "alpha": {str(t): dict(a) for t, a in enumerate(self.alpha)},
            "rho_theta": self.rho_theta,
            "rho_phi": self.rho_phi,
            "lambda": self.synergy_weight,
            "G": self.g_value,
            "G_pair_averaged": self.g_pair_averaged,
            "bound": self.bound,
            "variant": self.variant,
            "ordering_rationale": self.ordering_rationale,
        }
        if self.counts is not None:
            out["n"] = dict(self.counts)
        return out

    @classmethod
    def from_dict(cls, payload: Mapping) -> "StagePlan":
        try:
            stages = tuple(tuple(stage) for stage in payload["stages"])
            alpha_raw = payload["alpha"]
        except KeyError as exc:
            raise ParameterError(f"plan payload lacks field {exc.args[0]!r}") from exc
        alpha = tuple(dict(alpha_raw[str(t)]) for t in range(len(stages)))
        domain_ids = tuple(d for stage in stages for d in stage)
        counts = payload.get("n")
        return cls(
            domain_ids=domain_ids,
            stages=stages,
            alpha=alpha,
            rho_theta=float(payload["rho_theta"]),
            rho_phi=float(payload["rho_phi"]),
            synergy_weight=float(payload["lambda"]),
            g_value=float(payload["G"]),
            g_pair_averaged=float(payload["G_pair_averaged"]),
            bound=float(payload["bound"]),
            variant=str(payload.get("variant", "full")),
            ordering_rationale=str(payload.get("ordering_rationale", "unspecified")),
            counts=dict(counts) if counts else None,
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "StagePlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_stage_plan(
    partition: Partition,
    stats: Sequence[DomainStats] | None = None,
    params: ObjectiveParams | None = None,
    *,
    matrices: AffinityMatrices | None = None,
    counts: Sequence[int] | None = None,
) -> StagePlan:
    """Assemble a StagePlan for a partition.

    Domain identities, sample counts, and the synergy matrix come from
    `stats` when given, otherwise from `matrices` (counts default to 1
    per domain when unknown). The raw and pair-averaged scores are both
    attached, and the plan's bound is evaluated on the pair-averaged one.
    """
    params = params or ObjectiveParams()
    if matrices is None:
        if stats is None:
            raise ParameterError("make_stage_plan needs stats or matrices")
        matrices = build_matrices(stats, "full")
    k = matrices.k
    partition.require_cover(k)
    ids = matrices.domain_ids
    if stats is not None:
        n_by_domain = [st.n_docs for st in stats]
    elif counts is not None:
        n_by_domain = [int(n) for n in counts]
    elif matrices.counts is not None:
        n_by_domain = list(matrices.counts)
    else:
        n_by_domain = [1] * k

    synergy_matrix = matrices.synergy

    def mean_intra_synergy(stage: tuple[int, ...]) -> float:
        if len(stage) < 2:
            return 0.0
        pairs = list(itertools.combinations(stage, 2))
        return float(np.mean([synergy_matrix[i, j] for i, j in pairs]))

    ordered = sorted(
        (tuple(sorted(stage)) for stage in partition.stages),
        key=lambda stage: (-mean_intra_synergy(stage), stage[0]),
    )
    ordered_partition = Partition(tuple(ordered))

    alpha = []
    for stage in ordered:
        stage_total = sum(n_by_domain[i] for i in stage)
        alpha.append({ids[i]: n_by_domain[i] / stage_total for i in stage})

    raw = partition_objective(ordered_partition, matrices, replace(params, pair_average=False))
    averaged = partition_objective(ordered_partition, matrices, replace(params, pair_average=True))
    n_total = sum(n_by_domain)
    bound = stage_risk_bound(averaged, n_total, params.confidence)
    return StagePlan(
        domain_ids=ids,
        stages=tuple(tuple(ids[i] for i in stage) for stage in ordered),
        alpha=tuple(alpha),
        rho_theta=params.backbone_budget,
        rho_phi=params.adapter_budget,
        synergy_weight=params.synergy_weight,
        g_value=raw,
        g_pair_averaged=averaged,
        bound=bound,
        variant=matrices.variant,
        counts={ids[i]: n_by_domain[i] for i in range(k)},
    )


class StagePartitioner(BaseEstimator):
    """Cluster-style estimator over an affinity structure.

    `fit(matrices)` stores the chosen partition in `partition_`, its
    score in `g_value_`, and per-domain stage labels in `labels_`, so the
    solver composes like any clustering estimator with a precomputed
    affinity input.
    """

    def __init__(
        self,
        max_stages: int = 2,
        synergy_weight: float = 0.5,
        backbone_cap_weight: float = 1.0,
        adapter_cap_weight: float = 1.0,
        backbone_budget: float = 0.1,
        adapter_budget: float = 0.1,
        solver: str = "auto",
        pair_average: bool = False,
        refine: bool = True,
    ):
        self.max_stages = max_stages
        self.synergy_weight = synergy_weight
        self.backbone_cap_weight = backbone_cap_weight
        self.adapter_cap_weight = adapter_cap_weight
        self.backbone_budget = backbone_budget
        self.adapter_budget = adapter_budget
        self.solver = solver
        self.pair_average = pair_average
        self.refine = refine

    def _params(self) -> ObjectiveParams:
        return ObjectiveParams(
            synergy_weight=self.synergy_weight,
            backbone_cap_weight=self.backbone_cap_weight,
            adapter_cap_weight=self.adapter_cap_weight,
            backbone_budget=self.backbone_budget,
            adapter_budget=self.adapter_budget,
            max_stages=self.max_stages,
            pair_average=self.pair_average,
        )

    def fit(self, X: AffinityMatrices, y=None):
        if not isinstance(X, AffinityMatrices):
            raise InputError("StagePartitioner.fit expects AffinityMatrices")
        params = self._params()
        partition, score, used = solve_partition(X, params, solver=self.solver, refine=self.refine)
        self.partition_ = partition
        self.g_value_ = score
        self.g_pair_averaged_ = partition_objective(
            partition, X, replace(params, pair_average=True)
        )
        self.labels_ = partition.labels(X.k)
        self.solver_used_ = used
        self.domain_ids_ = X.domain_ids
        return self

    def fit_predict(self, X: AffinityMatrices, y=None) -> np.ndarray:
        return self.fit(X).labels_
