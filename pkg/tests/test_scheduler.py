import numpy as np
import pytest

from pipemax import oracle, scheduler
from pipemax.model_core import ClusterConfig, EstimatorParams, Request
from pipemax.scheduler import (
    EmptySystem,
    SchedulerState,
    batch_indices,
    commit_plan,
    detect_steady,
    initial_partition,
    prefetch_budget,
    residual_set,
    schedule_step,
    select_prefetch_steady,
    select_prefetch_warmup,
)


def big_cfg(n=2, h2d=80.0, kv=1):
    # Plenty of block room so memory never binds unless a test wants it to.
    return ClusterConfig(n=n, mem_per_gpu=10**7, model_bytes=10**6,
                         kv_bytes_per_token=kv, h2d_bandwidth=h2d,
                         d2h_bandwidth=1e9, cpu_kv_capacity=10**12, block_size=1)


class TestBatchIndices:
    def test_wraparound_at_zero(self):
        assert batch_indices(0, 4) == (0, 1, 3)

    def test_mid_cycle(self):
        assert batch_indices(5, 4) == (1, 2, 0)

    def test_single_stage(self):
        assert batch_indices(7, 1) == (0, 0, 0)


class TestInitialPartition:
    def test_balances_totals(self):
        reqs = [Request(0, 10, 1), Request(1, 9, 1), Request(2, 2, 1), Request(3, 1, 1)]
        batches = initial_partition(reqs, 2)
        totals = sorted(sum(r.prefix_len for r in reqs if r.id in b) for b in batches)
        assert totals == [11, 11]
        assert batches[0] == {0, 3}
        assert batches[1] == {1, 2}

    def test_single_request_many_batches(self):
        batches = initial_partition([Request(5, 7, 1)], 4)
        assert sorted(len(b) for b in batches) == [0, 0, 0, 1]
        assert any(b == {5} for b in batches)

    def test_equal_lengths_split_evenly(self):
        reqs = [Request(i, 50, 1) for i in range(8)]
        batches = initial_partition(reqs, 4)
        assert [len(b) for b in batches] == [2, 2, 2, 2]
        assert len({sum(50 for _ in b) for b in batches}) == 1

    def test_sizes_within_one_even_under_skew(self):
        # One huge request must not starve the size balance.
        reqs = [Request(0, 1000, 1)] + [Request(i, 1, 1) for i in range(1, 8)]
        for n in (2, 3, 4):
            batches = initial_partition(reqs, n)
            sizes = [len(b) for b in batches]
            assert max(sizes) - min(sizes) <= 1
            assert set().union(*batches) == {r.id for r in reqs}

    def test_empty_input(self):
        assert initial_partition([], 3) == [set(), set(), set()]


class TestPrefetchBudget:
    def test_bytes_to_tokens(self):
        assert prefetch_budget(20e9, 0.05, 100000) == 10000

    def test_zero_time(self):
        assert prefetch_budget(20e9, 0.0, 100000) == 0

    def test_zero_bandwidth(self):
        assert prefetch_budget(0.0, 0.05, 100000) == 0

    def test_infinite_bandwidth_is_effectively_unbounded(self):
        assert prefetch_budget(float("inf"), 0.05, 100000) > 10**15


class TestResidualSet:
    def test_intersection(self):
        assert residual_set({"a", "b", "c"}, {"b", "c", "d"}) == {"b", "c"}

    def test_empty(self):
        assert residual_set({"a"}, set()) == set()

    def test_idempotent(self):
        s = {1, 2, 3}
        assert residual_set(s, s) == s


class TestWarmupSelect:
    def test_short_first_fill(self):
        pool = {0: 300, 1: 100, 2: 50, 3: 200}  # A..D
        assert select_prefetch_warmup(pool, 400) == {1, 2, 3}

    def test_budget_below_min(self):
        assert select_prefetch_warmup({0: 300, 1: 100}, 50) == set()

    def test_empty_pool(self):
        assert select_prefetch_warmup({}, 400) == set()

    def test_tie_break_by_id(self):
        pool = {4: 100, 1: 100, 2: 100}
        assert select_prefetch_warmup(pool, 200) == {1, 2}


class TestSteadySelect:
    PARAMS = EstimatorParams(alpha=1.0, beta=0.01, delta=0.0)

    def test_matches_exhaustive_example(self):
        pool = {0: 100, 1: 200, 2: 300, 3: 50}
        got = select_prefetch_steady(pool, 400, 5.0, self.PARAMS, saturation_theta=0.9)
        assert got == {0, 2}

    def test_empty_pool(self):
        assert select_prefetch_steady({}, 400, 5.0, self.PARAMS) == set()

    def test_zero_budget(self):
        assert select_prefetch_steady({0: 10}, 0, 5.0, self.PARAMS) == set()

    def test_feasibility_and_oracle_bound_on_random_pools(self):
        params = EstimatorParams(alpha=1e-3, beta=1e-5, delta=0.0)
        rng = np.random.default_rng(9)
        hits = 0
        trials = 120
        for _ in range(trials):
            size = int(rng.integers(1, 13))
            pool = {int(i): int(rng.integers(10, 500)) for i in range(size)}
            budget = int(rng.integers(50, 1200))
            gap = float(rng.uniform(0.0, 0.02))
            got = select_prefetch_steady(pool, budget, gap, params)
            total = sum(pool[r] for r in got)
            assert total <= budget
            _, best_err = oracle.exhaustive_prefetch_select(pool, budget, gap, params)
            modeled = params.alpha * len(got) + params.beta * total
            if abs(modeled - gap) <= 2 * best_err + params.alpha + 1e-12:
                hits += 1
        assert hits >= 0.9 * trials

    def test_negative_gap_still_saturates(self):
        pool = {0: 100, 1: 200, 2: 300, 3: 50}
        got = select_prefetch_steady(pool, 400, -1.0, self.PARAMS, saturation_theta=0.9)
        assert sum(pool[r] for r in got) >= 0.9 * 400


class TestDetectSteady:
    def test_stable_window(self):
        assert detect_steady([100, 150, 200, 210, 205, 208], 3, 0.05) is True

    def test_short_history(self):
        assert detect_steady([100, 200], 3, 0.05) is False

    def test_unstable_window(self):
        assert detect_steady([100, 200, 100], 3, 0.05) is False

    def test_all_zero_window(self):
        assert detect_steady([0, 0, 0], 3, 0.05) is False

    def test_shift_invariance_over_suffix(self):
        tail = [500, 510, 505]
        assert (detect_steady([1, 2, 3] + tail, 3, 0.05)
                == detect_steady([9, 9, 9, 9] + tail, 3, 0.05)
                == detect_steady(tail, 3, 0.05))


def build_state(n, batches, lengths, pool, cfg, **kw):
    resident = set().union(*batches) if batches else set()
    state = SchedulerState(n=n, batches=batches, lengths=dict(lengths),
                           gpu_resident=resident, cpu_pool=set(pool), **kw)
    state.configure_blocks(cfg.block_size)
    return state


class TestScheduleStep:
    def test_single_stage_empty_pool(self):
        cfg = big_cfg(n=1)
        params = EstimatorParams(alpha=1e-3, beta=1e-5, delta=1e-3)
        state = build_state(1, [{0, 1}], {0: 10, 1: 20}, set(), cfg)
        plan = schedule_step(state, params, cfg)
        assert plan.prefetch_set == frozenset()
        assert plan.updated_next_batch == frozenset({0, 1})
        assert plan.evictions == ()

    def test_empty_system_raises(self):
        cfg = big_cfg(n=2)
        params = EstimatorParams(alpha=1e-3, beta=1e-5, delta=1e-3)
        state = build_state(2, [set(), set()], {}, set(), cfg)
        with pytest.raises(EmptySystem):
            schedule_step(state, params, cfg)

    def test_warmup_positive_feedback_grows_prefetch(self):
        # Short uniform pool, bandwidth-bound budget, memory non-binding:
        # committed steps must not shrink the prefetch set.
        cfg = big_cfg(n=2, h2d=100.0)
        params = EstimatorParams(alpha=0.01, beta=0.001, delta=0.0)
        lengths = {0: 100, 1: 100}
        lengths.update({i: 1 for i in range(100, 160)})
        state = build_state(2, [{0}, {1}], lengths, set(range(100, 160)), cfg)
        sizes = []
        for _ in range(3):
            plan = schedule_step(state, params, cfg)
            assert not plan.steady
            sizes.append(len(plan.prefetch_set))
            commit_plan(state, plan, cfg)
        assert sizes == sorted(sizes)
        assert sizes[-1] > sizes[0]

    def test_steady_plan_matches_selector_example(self):
        # Executing batch models to 5 s, bandwidth 80 B/s at 1 B/token gives
        # a 400-token budget, and the empty next batch leaves the whole gap.
        cfg = big_cfg(n=2, h2d=80.0)
        params = EstimatorParams(alpha=1.0, beta=0.01, delta=0.0)
        lengths = {10: 400, 0: 100, 1: 200, 2: 300, 3: 50}
        state = build_state(2, [{10}, set()], lengths, {0, 1, 2, 3}, cfg,
                            steady=True)
        plan = schedule_step(state, params, cfg)
        assert plan.predicted_exec_seconds == pytest.approx(5.0)
        assert plan.prefetch_budget_tokens == 400
        assert plan.prefetch_set == frozenset({0, 2})
        assert plan.updated_next_batch == frozenset({0, 2})

    def test_determinism_identical_states(self):
        cfg = big_cfg(n=3)
        params = EstimatorParams(alpha=1e-2, beta=1e-4, delta=1e-3)
        lengths = {0: 30, 1: 40, 2: 50, 3: 20, 4: 25, 5: 60}
        make = lambda: build_state(3, [{0}, {1}, {2}], lengths, {3, 4, 5}, cfg)
        assert schedule_step(make(), params, cfg) == schedule_step(make(), params, cfg)

    def test_budget_feasibility_and_disjointness_over_many_steps(self):
        cfg = ClusterConfig(n=3, mem_per_gpu=4000, model_bytes=3000,
                            kv_bytes_per_token=1, h2d_bandwidth=50.0,
                            d2h_bandwidth=1e9, cpu_kv_capacity=10**9, block_size=4)
        params = EstimatorParams(alpha=0.05, beta=0.01, delta=0.01)
        rng = np.random.default_rng(21)
        lengths = {i: int(rng.integers(5, 40)) for i in range(40)}
        state = build_state(3, [{0, 1}, {2, 3}, {4, 5}],
                            lengths, set(range(6, 40)), cfg)
        for step in range(60):
            plan = schedule_step(state, params, cfg)
            assert sum(state.lengths[r] for r in plan.prefetch_set) \
                <= plan.prefetch_budget_tokens
            commit_plan(state, plan, cfg)
            seen = set()
            for batch in state.batches:
                assert not (batch & seen)
                seen |= batch
            assert seen <= state.gpu_resident
            assert not (state.cpu_pool & state.gpu_resident)
            # decode the executing batch to keep lengths moving
            for rid in sorted(plan.exec_batch):
                state.bump_generated(rid)

    def test_eviction_safety_never_touches_exec_or_residual(self):
        cfg = ClusterConfig(n=3, mem_per_gpu=2000, model_bytes=1500,
                            kv_bytes_per_token=1, h2d_bandwidth=500.0,
                            d2h_bandwidth=1e9, cpu_kv_capacity=10**9, block_size=4)
        params = EstimatorParams(alpha=0.05, beta=0.01, delta=0.01)
        lengths = {i: 30 for i in range(20)}
        state = build_state(3, [{0, 1}, {2, 3}, {4, 5}], lengths,
                            set(range(6, 20)), cfg)
        for _ in range(30):
            plan = schedule_step(state, params, cfg)
            for victim in plan.evictions:
                assert victim not in plan.exec_batch
                assert victim not in plan.residual
                assert victim in state.batches[plan.evict_batch_index]
            commit_plan(state, plan, cfg)

    def test_stale_plan_rejected(self):
        cfg = big_cfg(n=2)
        params = EstimatorParams(alpha=1e-3, beta=1e-5, delta=1e-3)
        state = build_state(2, [{0}, {1}], {0: 10, 1: 20}, set(), cfg)
        plan = schedule_step(state, params, cfg)
        commit_plan(state, plan, cfg)
        with pytest.raises(ValueError):
            commit_plan(state, plan, cfg)
