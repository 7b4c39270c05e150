import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from stageplan import (
    AffinityMatrices,
    BoundReport,
    CapabilityError,
    EXACT_DOMAIN_GUARD,
    ObjectiveParams,
    ParameterError,
    Partition,
    StagePartitioner,
    StagePlan,
    agglomerative_search,
    capacity_proxy,
    check_grouping_condition,
    enumerate_exact,
    iter_partitions,
    make_stage_plan,
    multisource_risk_bound,
    partition_objective,
    solve_partition,
    stage_risk_bound,
    update_complexity,
)


def random_matrices(k, rng, counts=None):
    d = rng.uniform(0, 1, (k, k))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    s = rng.uniform(0, 1, (k, k))
    s = (s + s.T) / 2
    np.fill_diagonal(s, 1.0)
    return AffinityMatrices(
        tuple(f"d{i}" for i in range(k)), d, s, "full", counts=counts
    )


def pure_affinity_params(k):
    """Zero capacity weights with unconstrained stage count: the score of
    the all-singleton partition is exactly zero."""
    return ObjectiveParams(backbone_cap_weight=0.0, adapter_cap_weight=0.0, max_stages=k)


# --- independent brute-force oracle -----------------------------------------

def naive_partitions(k, max_blocks):
    """Every partition of 0..k-1 into at most max_blocks blocks, generated
    by canonicalizing raw label assignments."""
    seen = set()
    for labels in itertools.product(range(min(max_blocks, k)), repeat=k):
        blocks = {}
        for i, lab in enumerate(labels):
            blocks.setdefault(lab, []).append(i)
        canonical = tuple(
            tuple(sorted(block)) for block in sorted(blocks.values(), key=lambda b: b[0])
        )
        if canonical not in seen:
            seen.add(canonical)
            yield canonical


def naive_objective(blocks, d, s, params):
    """Literal transcription of the stage objective."""
    cost = 0.0
    for block in blocks:
        sum_d = sum(d[i][j] for i, j in itertools.combinations(block, 2))
        sum_s = sum(s[i][j] for i, j in itertools.combinations(block, 2))
        value = sum_d - params.synergy_weight * sum_s
        n_pairs = len(block) * (len(block) - 1) // 2
        if params.pair_average and n_pairs:
            value /= n_pairs
        cap = (
            params.backbone_cap_weight * params.backbone_budget**2
            + params.adapter_cap_weight * len(block) * params.adapter_budget**2
        )
        cost += value + cap
    return -cost


def naive_argmax(matrices, params):
    d = matrices.discrepancy.tolist()
    s = matrices.synergy.tolist()
    best = None
    for blocks in naive_partitions(matrices.k, params.max_stages):
        score = naive_objective(blocks, d, s, params)
        if best is None or score > best[0] or (score == best[0] and blocks < best[1]):
            best = (score, blocks)
    return best[1], best[0]


# --- objective ---------------------------------------------------------------

class TestCapacityProxy:
    def test_default_pair(self):
        assert capacity_proxy((0, 1), ObjectiveParams()) == pytest.approx(0.03)

    def test_singleton_no_adapter_weight(self):
        params = ObjectiveParams(adapter_cap_weight=0.0)
        assert capacity_proxy((0,), params) == pytest.approx(0.01)

    def test_zero_weights(self):
        params = ObjectiveParams(backbone_cap_weight=0.0, adapter_cap_weight=0.0)
        assert capacity_proxy((0, 1, 2), params) == 0.0

    def test_empty_stage(self):
        with pytest.raises(ParameterError):
            capacity_proxy((), ObjectiveParams())


class TestObjective:
    def _pair_matrices(self, d01, s01):
        d = np.array([[0.0, d01], [d01, 0.0]])
        s = np.array([[1.0, s01], [s01, 1.0]])
        return AffinityMatrices(("a", "b"), d, s, "full")

    def test_hand_value(self):
        # One merged stage: -(0.2 - 0.5*0.8 + 0.03) = 0.17.
        mats = self._pair_matrices(0.2, 0.8)
        score = partition_objective(Partition(((0, 1),)), mats, ObjectiveParams())
        assert score == pytest.approx(0.17)

    def test_singletons_zero_when_capacity_free(self):
        mats = self._pair_matrices(0.7, 0.2)
        params = pure_affinity_params(2)
        assert partition_objective(Partition(((0,), (1,))), mats, params) == 0.0

    def test_lambda_zero_drops_synergy(self):
        mats = self._pair_matrices(0.2, 0.8)
        params = ObjectiveParams(synergy_weight=0.0)
        score = partition_objective(Partition(((0, 1),)), mats, params)
        assert score == pytest.approx(-(0.2 + 0.03))

    def test_pair_average_divides(self):
        rng = np.random.default_rng(0)
        mats = random_matrices(3, rng)
        merged = Partition(((0, 1, 2),))
        raw = partition_objective(merged, mats, ObjectiveParams(max_stages=3))
        avg = partition_objective(
            merged, mats, ObjectiveParams(max_stages=3, pair_average=True)
        )
        cap = capacity_proxy((0, 1, 2), ObjectiveParams())
        assert avg == pytest.approx(-((-(raw) - cap) / 3 + cap))

    def test_realized_capacities(self):
        mats = self._pair_matrices(0.2, 0.8)
        score = partition_objective(
            Partition(((0, 1),)), mats, ObjectiveParams(), stage_capacities=[0.5]
        )
        assert score == pytest.approx(-(0.2 - 0.4 + 0.5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_relabeling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(3, 7))
        mats = random_matrices(k, rng)
        params = ObjectiveParams(max_stages=k)
        labels = rng.integers(0, 3, size=k)
        blocks = {}
        for i, lab in enumerate(labels):
            blocks.setdefault(int(lab), []).append(i)
        stages = [tuple(b) for b in blocks.values()]
        base = partition_objective(Partition(tuple(stages)), mats, params)
        shuffled = [tuple(rng.permutation(list(stage))) for stage in stages]
        rng.shuffle(shuffled)
        assert partition_objective(Partition(tuple(shuffled)), mats, params) == pytest.approx(
            base, abs=1e-12
        )

    def test_hostile_extra_domain_never_helps(self):
        rng = np.random.default_rng(3)
        k = 4
        base = random_matrices(k, rng)
        # Append a zero-synergy, positive-discrepancy domain.
        d = np.zeros((k + 1, k + 1))
        d[:k, :k] = base.discrepancy
        d[k, :k] = d[:k, k] = rng.uniform(0.3, 1.0, size=k)
        s = np.eye(k + 1)
        s[:k, :k] = base.synergy
        grown = AffinityMatrices(base.domain_ids + ("x",), d, s, "full")
        params = ObjectiveParams(max_stages=k + 1)
        for blocks in iter_partitions(k, 3):
            before = partition_objective(Partition(blocks), base, params)
            for t in range(len(blocks)):
                extended = tuple(
                    stage + (k,) if idx == t else stage for idx, stage in enumerate(blocks)
                )
                after = partition_objective(Partition(extended), grown, params)
                assert after <= before + 1e-12
            lone = blocks + ((k,),)
            assert partition_objective(Partition(lone), grown, params) <= before + 1e-12


# --- solvers -----------------------------------------------------------------

class TestEnumerateExact:
    def test_two_domain_merge_rule(self):
        # Merging wins exactly when lambda*s - d + backbone saving > 0.
        params = ObjectiveParams()
        d = np.array([[0.0, 0.3], [0.3, 0.0]])
        s_hi = np.array([[1.0, 0.9], [0.9, 1.0]])
        s_lo = np.array([[1.0, 0.2], [0.2, 1.0]])
        merged, _ = enumerate_exact(AffinityMatrices(("a", "b"), d, s_hi, "full"), params)
        split, _ = enumerate_exact(AffinityMatrices(("a", "b"), d, s_lo, "full"), params)
        assert merged.stages == ((0, 1),)
        assert split.stages == ((0,), (1,))

    def test_candidate_counts(self):
        assert sum(1 for _ in iter_partitions(4, 2)) == 8
        assert sum(1 for _ in iter_partitions(4, 4)) == 15  # Bell(4)

    def test_identical_domains_merge(self):
        k = 4
        d = np.zeros((k, k))
        s = np.ones((k, k))
        mats = AffinityMatrices(tuple("abcd"), d, s, "full")
        params = pure_affinity_params(k)
        partition, score = enumerate_exact(mats, params)
        assert partition.stages == ((0, 1, 2, 3),)
        assert score == pytest.approx(0.5 * 6)

    def test_guard(self):
        rng = np.random.default_rng(0)
        mats = random_matrices(EXACT_DOMAIN_GUARD + 1, rng)
        with pytest.raises(CapabilityError):
            enumerate_exact(mats, ObjectiveParams())

    def test_tie_break_lexicographic(self):
        # All-zero affinities with free capacity: every partition scores 0;
        # the all-singleton partition is the lexicographically smallest.
        k = 4
        d = np.zeros((k, k))
        s = np.eye(k)
        mats = AffinityMatrices(tuple("abcd"), d, s, "full")
        partition, score = enumerate_exact(mats, pure_affinity_params(k))
        assert score == 0.0
        assert partition.stages == ((0,), (1,), (2,), (3,))

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_matches_naive_oracle(self, k):
        for trial in range(8):
            rng = np.random.default_rng(k * 100 + trial)
            mats = random_matrices(k, rng)
            for max_stages in (2, k):
                params = ObjectiveParams(max_stages=max_stages)
                partition, score = enumerate_exact(mats, params)
                naive_blocks, naive_score = naive_argmax(mats, params)
                assert partition.stages == naive_blocks
                assert score == pytest.approx(naive_score, abs=1e-12)


class TestAgglomerative:
    def test_single_domain(self):
        d = np.zeros((1, 1))
        s = np.ones((1, 1))
        mats = AffinityMatrices(("only",), d, s, "full")
        partition, _ = agglomerative_search(mats, ObjectiveParams())
        assert partition.stages == ((0,),)

    def test_respects_stage_cap(self):
        rng = np.random.default_rng(5)
        mats = random_matrices(7, rng)
        partition, _ = agglomerative_search(mats, ObjectiveParams(max_stages=2))
        assert partition.n_stages <= 2
        partition.require_cover(7)

    def test_planted_pair_matches_exact(self):
        # One strongly attractive pair in an otherwise hostile instance.
        for seed in range(10):
            rng = np.random.default_rng(seed)
            k = 6
            d = rng.uniform(0.7, 1.0, (k, k))
            d = (d + d.T) / 2
            np.fill_diagonal(d, 0.0)
            s = rng.uniform(0.0, 0.1, (k, k))
            s = (s + s.T) / 2
            np.fill_diagonal(s, 1.0)
            i, j = rng.choice(k, size=2, replace=False)
            d[i, j] = d[j, i] = 0.05
            s[i, j] = s[j, i] = 0.95
            mats = AffinityMatrices(tuple(f"d{x}" for x in range(k)), d, s, "full")
            params = pure_affinity_params(k)
            exact_partition, exact_score = enumerate_exact(mats, params)
            heur_partition, heur_score = agglomerative_search(mats, params)
            assert heur_partition.canonical().stages == exact_partition.canonical().stages
            assert heur_score == pytest.approx(exact_score, abs=1e-9)

    def test_never_beats_exact(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            k = int(rng.integers(3, 9))
            mats = random_matrices(k, rng)
            params = ObjectiveParams(max_stages=int(rng.integers(2, k + 1)))
            _, exact_score = enumerate_exact(mats, params)
            _, heur_score = agglomerative_search(mats, params)
            assert heur_score <= exact_score + 1e-9

    def test_score_matches_clean_evaluation(self):
        rng = np.random.default_rng(1)
        mats = random_matrices(6, rng)
        params = ObjectiveParams()
        partition, score = agglomerative_search(mats, params, refine=False)
        assert score == pytest.approx(partition_objective(partition, mats, params), abs=1e-12)

    def test_solver_dispatch(self):
        rng = np.random.default_rng(2)
        mats = random_matrices(4, rng)
        _, _, used = solve_partition(mats, ObjectiveParams(), solver="auto")
        assert used == "exact"
        with pytest.raises(ParameterError):
            solve_partition(mats, ObjectiveParams(), solver="simulated-annealing")


# --- bounds ------------------------------------------------------------------

class TestUpdateComplexity:
    def test_default_value(self):
        assert update_complexity(ObjectiveParams(), [0.3, 0.7]) == pytest.approx(0.4)

    def test_zero_budgets(self):
        params = ObjectiveParams(backbone_budget=0.0, adapter_budget=0.0)
        assert update_complexity(params, [1.0]) == 0.0

    def test_scaled_constants(self):
        params = ObjectiveParams(
            loss_lipschitz=2.0, output_lipschitz=1.0, backbone_budget=0.05, adapter_budget=0.1
        )
        assert update_complexity(params, [0.5, 0.5]) == pytest.approx(0.6)

    def test_simplex_enforced(self):
        with pytest.raises(ParameterError):
            update_complexity(ObjectiveParams(), [0.5, 0.6])


class TestRiskBounds:
    def _pair(self, d01):
        d = np.array([[0.0, d01], [d01, 0.0]])
        s = np.eye(2)
        s[0, 1] = s[1, 0] = 0.1
        return AffinityMatrices(("a", "b"), d, s, "full")

    def test_discrepancy_term_counts_ordered_pairs(self):
        report = multisource_risk_bound(0.0, self._pair(0.5), ObjectiveParams(), n_total=100)
        assert report.discrepancy_term == pytest.approx(0.5)

    def test_statistical_term(self):
        report = multisource_risk_bound(0.0, None, ObjectiveParams(), n_total=10000)
        assert report.statistical_term == pytest.approx(math.sqrt(math.log(20.0) / 20000.0))
        assert report.statistical_term == pytest.approx(0.01224, abs=1e-5)

    def test_vanishing_penalties(self):
        params = ObjectiveParams(backbone_budget=0.0, adapter_budget=0.0)
        report = multisource_risk_bound(0.37, self._pair(0.0), params, n_total=10**12)
        assert report.total == pytest.approx(0.37, abs=1e-5)

    def test_total_is_sum(self):
        report = multisource_risk_bound(0.2, self._pair(0.3), ObjectiveParams(), n_total=50)
        assert report.total == pytest.approx(
            report.empirical_term
            + report.complexity_term
            + report.discrepancy_term
            + report.statistical_term
        )

    def test_inconsistent_total_rejected(self):
        with pytest.raises(ParameterError):
            BoundReport(0.1, 0.1, 0.1, 0.1, 1.0)

    def test_stage_bound_clamp(self):
        value = stage_risk_bound(1.2, 10**9)
        assert value == pytest.approx(math.sqrt(math.log(20.0) / 1e9))

    def test_stage_bound_limit(self):
        assert stage_risk_bound(0.3, 10**14) == pytest.approx(0.7, abs=1e-5)

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.integers(1, 10**9),
        st.integers(1, 10**9),
    )
    def test_stage_bound_monotone(self, g1, g2, n1, n2):
        lo_g, hi_g = sorted((g1, g2))
        lo_n, hi_n = sorted((n1, n2))
        assert stage_risk_bound(hi_g, lo_n) <= stage_risk_bound(lo_g, lo_n) + 1e-12
        assert stage_risk_bound(lo_g, hi_n) <= stage_risk_bound(lo_g, lo_n) + 1e-12

    def test_invalid_confidence(self):
        with pytest.raises(ParameterError):
            stage_risk_bound(0.5, 100, confidence=1.5)


class TestGroupingCondition:
    def _matrices(self, synergy_floor, discrepancy_cap):
        k = 4
        d = np.full((k, k), 0.9)
        np.fill_diagonal(d, 0.0)
        s = np.full((k, k), 0.05)
        np.fill_diagonal(s, 1.0)
        for i, j in ((0, 1), (0, 2), (1, 2)):
            d[i, j] = d[j, i] = discrepancy_cap
            s[i, j] = s[j, i] = synergy_floor
        return AffinityMatrices(tuple("abcd"), d, s, "full")

    def test_reported_pair_groups(self):
        # Synergy 0.88 against discrepancy 0.12 with capacity 0.1: the
        # threshold (0.12 + 0.1) / 0.5 = 0.44 is comfortably exceeded.
        params = ObjectiveParams(backbone_cap_weight=8.0)
        assert capacity_proxy((0, 1), params) == pytest.approx(0.1)
        mats = self._matrices(0.88, 0.12)
        assert check_grouping_condition([0, 1], mats, params) == "group"

    def test_boundary_is_strict(self):
        # Engineer min synergy exactly equal to the threshold.
        params = ObjectiveParams(
            backbone_cap_weight=0.0, adapter_cap_weight=0.0, synergy_weight=0.5
        )
        mats = self._matrices(0.4, 0.2)  # threshold = 0.2 / 0.5 = 0.4
        assert check_grouping_condition([0, 1], mats, params) == "no-guarantee"

    def test_zero_weight_never_guarantees(self):
        params = ObjectiveParams(synergy_weight=0.0)
        mats = self._matrices(0.99, 0.0)
        assert check_grouping_condition([0, 1], mats, params) == "no-guarantee"

    def test_needs_two_domains(self):
        with pytest.raises(ParameterError):
            check_grouping_condition([1], self._matrices(0.9, 0.1), ObjectiveParams())

    def test_consistent_with_exact_solver(self):
        # Planted high-synergy subsets with hostile outsiders end up in a
        # single stage of the optimal partition.
        for seed in range(10):
            rng = np.random.default_rng(seed)
            k = int(rng.integers(4, 7))
            subset = sorted(rng.choice(k, size=int(rng.integers(2, 4)), replace=False).tolist())
            d = rng.uniform(0.6, 1.0, (k, k))
            d = (d + d.T) / 2
            s = rng.uniform(0.0, 0.1, (k, k))
            s = (s + s.T) / 2
            for i, j in itertools.combinations(subset, 2):
                d[i, j] = d[j, i] = rng.uniform(0.0, 0.1)
                s[i, j] = s[j, i] = rng.uniform(0.8, 1.0)
            np.fill_diagonal(d, 0.0)
            np.fill_diagonal(s, 1.0)
            mats = AffinityMatrices(tuple(f"d{i}" for i in range(k)), d, s, "full")
            params = ObjectiveParams(max_stages=k)
            assert check_grouping_condition(subset, mats, params) == "group"
            partition, _ = enumerate_exact(mats, params)
            containing = [stage for stage in partition.stages if subset[0] in stage]
            assert set(subset) <= set(containing[0])


# --- plans -------------------------------------------------------------------

class TestStagePlan:
    def _matrices(self):
        d = np.array(
            [[0.0, 0.1, 0.9, 0.9], [0.1, 0.0, 0.9, 0.9], [0.9, 0.9, 0.0, 0.2], [0.9, 0.9, 0.2, 0.0]]
        )
        s = np.array(
            [[1.0, 0.9, 0.1, 0.1], [0.9, 1.0, 0.1, 0.1], [0.1, 0.1, 1.0, 0.8], [0.1, 0.1, 0.8, 1.0]]
        )
        return AffinityMatrices(("w", "x", "y", "z"), d, s, "full", counts=(100, 300, 50, 50))

    def test_alpha_proportional(self):
        plan = make_stage_plan(Partition(((0, 1), (2, 3))), params=ObjectiveParams(), matrices=self._matrices())
        stage = dict(zip(plan.stages, plan.alpha))[("w", "x")]
        assert stage["w"] == pytest.approx(0.25)
        assert stage["x"] == pytest.approx(0.75)

    def test_singleton_alpha(self):
        plan = make_stage_plan(
            Partition(((0,), (1, 2, 3))), params=ObjectiveParams(), matrices=self._matrices()
        )
        by_stage = dict(zip(plan.stages, plan.alpha))
        assert by_stage[("w",)] == {"w": 1.0}

    def test_stage_order_by_synergy(self):
        plan = make_stage_plan(
            Partition(((2, 3), (0, 1))), params=ObjectiveParams(), matrices=self._matrices()
        )
        # Pair (w, x) has synergy 0.9 > 0.8 of (y, z); it leads regardless
        # of the input stage order.
        assert plan.stages == (("w", "x"), ("y", "z"))

    def test_order_permutation_leaves_score(self):
        params = ObjectiveParams()
        forward = make_stage_plan(Partition(((0, 1), (2, 3))), params=params, matrices=self._matrices())
        backward = make_stage_plan(Partition(((2, 3), (0, 1))), params=params, matrices=self._matrices())
        assert forward.g_value == pytest.approx(backward.g_value)
        assert forward.alpha == backward.alpha

    def test_bound_uses_pair_averaged_score(self):
        plan = make_stage_plan(Partition(((0, 1), (2, 3))), params=ObjectiveParams(), matrices=self._matrices())
        n_total = sum(plan.counts.values())
        assert plan.bound == pytest.approx(stage_risk_bound(plan.g_pair_averaged, n_total, 0.05))

    def test_json_round_trip(self, tmp_path):
        plan = make_stage_plan(Partition(((0, 1), (2, 3))), params=ObjectiveParams(), matrices=self._matrices())
        path = tmp_path / "plan.json"
        plan.to_json(path)
        loaded = StagePlan.from_json(path)
        assert loaded.stages == plan.stages
        assert loaded.alpha == plan.alpha
        assert loaded.g_value == pytest.approx(plan.g_value)
        assert loaded.bound == pytest.approx(plan.bound)
        assert loaded.counts == plan.counts

    def test_alpha_must_sum_to_one(self):
        with pytest.raises(ParameterError):
            StagePlan(
                domain_ids=("a", "b"),
                stages=(("a", "b"),),
                alpha=({"a": 0.6, "b": 0.6},),
                rho_theta=0.1,
                rho_phi=0.1,
                synergy_weight=0.5,
                g_value=0.0,
                g_pair_averaged=0.0,
                bound=1.0,
                variant="full",
            )


class TestStagePartitioner:
    def test_fit_sets_attributes(self):
        rng = np.random.default_rng(0)
        mats = random_matrices(5, rng)
        est = StagePartitioner(max_stages=2)
        labels = est.fit_predict(mats)
        assert labels.shape == (5,)
        assert est.g_value_ == pytest.approx(
            partition_objective(est.partition_, mats, est._params())
        )
        assert est.solver_used_ == "exact"

    def test_sklearn_clone(self):
        est = StagePartitioner(max_stages=3, synergy_weight=0.25)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_rejects_non_matrices(self):
        from stageplan import InputError

        with pytest.raises(InputError):
            StagePartitioner().fit(np.zeros((3, 3)))


class TestPartitionType:
    def test_disjointness_enforced(self):
        with pytest.raises(ParameterError):
            Partition(((0, 1), (1, 2)))

    def test_empty_stage_rejected(self):
        with pytest.raises(ParameterError):
            Partition(((0,), ()))

    def test_cover_check(self):
        with pytest.raises(ParameterError):
            Partition(((0, 2),)).require_cover(3)

    def test_labels(self):
        partition = Partition(((1, 2), (0,)))
        assert partition.labels(3).tolist() == [1, 0, 0]
