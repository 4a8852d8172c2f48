import numpy as np
import pytest

from pipemax import oracle
from pipemax.model_core import ClusterConfig, EstimatorParams, PrefillInstance
from pipemax.oracle import PoolTooLarge, exhaustive_prefetch_select, prefill_makespan_dp


class TestPrefillDp:
    def test_two_stage_hand_table(self):
        assert prefill_makespan_dp(PrefillInstance((2, 3, 1), 2)) == 9

    def test_single_request(self):
        assert prefill_makespan_dp(PrefillInstance((4,), 3)) == 12

    def test_sequential(self):
        assert prefill_makespan_dp(PrefillInstance((2, 3, 1), 1)) == 6


class TestExhaustiveSelect:
    PARAMS = EstimatorParams(alpha=1.0, beta=0.01, delta=0.0)

    def test_four_request_example(self):
        pool = {0: 100, 1: 200, 2: 300, 3: 50}  # A..D
        best, err = exhaustive_prefetch_select(pool, 400, 5.0, self.PARAMS, theta=0.9)
        assert best == frozenset({0, 2})
        assert err == pytest.approx(1.0)

    def test_empty_pool(self):
        best, err = exhaustive_prefetch_select({}, 100, 3.5, self.PARAMS)
        assert best == frozenset()
        assert err == pytest.approx(3.5)

    def test_unconstrained_budget_finds_global_best_match(self):
        params = EstimatorParams(alpha=1.0, beta=0.1, delta=0.0)
        pool = {0: 10, 1: 20}
        # Modeled times: {} -> 0, {0} -> 2, {1} -> 3, {0,1} -> 5.
        best, err = exhaustive_prefetch_select(pool, 100, 3.0, params, theta=0.0)
        assert best == frozenset({1})
        assert err == pytest.approx(0.0)

    def test_pool_cap(self):
        pool = {i: 10 for i in range(21)}
        with pytest.raises(PoolTooLarge):
            exhaustive_prefetch_select(pool, 100, 1.0, self.PARAMS)

    def test_tie_breaks_prefer_fewer_then_lower_ids(self):
        params = EstimatorParams(alpha=1.0, beta=0.0, delta=0.0)
        # {0} and {1} both model to 1.0; the lower id set must win.
        pool = {0: 30, 1: 30}
        best, _ = exhaustive_prefetch_select(pool, 60, 1.0, params, theta=0.0)
        assert best == frozenset({0})


class TestBudgetCheck:
    def test_paper_scale_config(self):
        cfg = ClusterConfig(n=8, mem_per_gpu=32e9, model_bytes=140e9,
                            kv_bytes_per_token=145000, h2d_bandwidth=1e9,
                            d2h_bandwidth=1e9, cpu_kv_capacity=int(1e12))
        report = oracle.closed_form_decode_budget_check(cfg)
        assert report.matches
        assert report.expected_system_tokens == 800000
        assert report.expected_per_batch_tokens == 100000

    def test_single_gpu_budget_equals_capacity(self):
        cfg = ClusterConfig(n=1, mem_per_gpu=24e9, model_bytes=14e9,
                            kv_bytes_per_token=100000, h2d_bandwidth=1e9,
                            d2h_bandwidth=1e9, cpu_kv_capacity=int(1e12))
        report = oracle.closed_form_decode_budget_check(cfg)
        assert report.matches
        assert report.expected_system_tokens == report.expected_per_batch_tokens

    def test_random_configs_zero_diffs(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            model = int(rng.integers(10**8, 10**11))
            mem = model // n + int(rng.integers(10**8, 10**10))
            kv = int(rng.integers(10**3, 10**6))
            cfg = ClusterConfig(n=n, mem_per_gpu=mem, model_bytes=model,
                                kv_bytes_per_token=kv, h2d_bandwidth=1e9,
                                d2h_bandwidth=1e9, cpu_kv_capacity=int(1e12))
            assert oracle.closed_form_decode_budget_check(cfg).matches
