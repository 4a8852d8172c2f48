import json

import numpy as np
import pytest

from pipemax.workload import (
    CONSTANT,
    LOGNORMAL,
    NORMAL_TRUNCATED,
    EmptyWorkload,
    LengthSpec,
    ParseError,
    SpecError,
    WorkloadSpec,
    generate_synthetic,
    load_trace,
    longbench_like,
    sharegpt_like,
    summarize,
)


class TestGenerate:
    def test_constant_family(self):
        spec = WorkloadSpec(count=8,
                            input_dist=LengthSpec(CONSTANT, 100, 100),
                            output_dist=LengthSpec(CONSTANT, 30, 30))
        reqs = generate_synthetic(spec)
        assert len(reqs) == 8
        assert all(r.input_len == 100 and r.output_len == 30 for r in reqs)

    def test_deterministic_under_seed(self):
        a = generate_synthetic(sharegpt_like(200, seed=5))
        b = generate_synthetic(sharegpt_like(200, seed=5))
        assert [(r.input_len, r.output_len) for r in a] \
            == [(r.input_len, r.output_len) for r in b]
        c = generate_synthetic(sharegpt_like(200, seed=6))
        assert [(r.input_len, r.output_len) for r in a] \
            != [(r.input_len, r.output_len) for r in c]

    def test_lengths_respect_bounds(self):
        spec = WorkloadSpec(
            count=2000,
            input_dist=LengthSpec(LOGNORMAL, 343.76, 148.0, min=32, max=1024),
            output_dist=LengthSpec(NORMAL_TRUNCATED, 100.0, 100.0, min=1, max=256),
            seed=3)
        for r in generate_synthetic(spec):
            assert 32 <= r.input_len <= 1024
            assert 1 <= r.output_len <= 256

    def test_heavy_tail_mean_exceeds_median(self):
        reqs = generate_synthetic(sharegpt_like(5000, seed=1))
        stats = summarize(reqs)
        assert stats.input_avg > stats.input_median
        assert stats.output_avg > stats.output_median

    def test_sharegpt_like_hits_targets(self):
        stats = summarize(generate_synthetic(sharegpt_like(10000, seed=7)))
        assert stats.input_avg == pytest.approx(343.76, rel=0.10)
        assert stats.input_median == pytest.approx(148.0, rel=0.10)
        assert stats.output_avg == pytest.approx(237.20, rel=0.10)
        assert stats.output_median == pytest.approx(152.0, rel=0.10)

    def test_mean_below_median_rejected_for_lognormal(self):
        with pytest.raises(SpecError):
            LengthSpec(LOGNORMAL, target_avg=100.0, target_median=200.0)


class TestLoadTrace:
    def test_two_well_formed_lines(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"input_len": 10, "output_len": 5}\n'
                        '{"id": 7, "input_len": 20, "output_len": 3}\n')
        reqs = load_trace(path)
        assert [(r.id, r.input_len, r.output_len) for r in reqs] \
            == [(0, 10, 5), (7, 20, 3)]

    def test_nonpositive_length_reports_line(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"input_len": 10, "output_len": 5}\n'
                        '{"input_len": 0, "output_len": 5}\n')
        with pytest.raises(ValueError, match="line 2"):
            load_trace(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text("")
        assert load_trace(path) == []

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"input_len": 10, "output_len": 5}\nnot json\n')
        with pytest.raises(ParseError, match="line 2"):
            load_trace(path)


class TestSummarize:
    def test_even_count_uses_lower_middle(self):
        reqs = load_requests([1, 2, 3, 4])
        stats = summarize(reqs)
        assert stats.input_avg == 2.5
        assert stats.input_median == 2

    def test_single_request(self):
        reqs = load_requests([9])
        stats = summarize(reqs)
        assert stats.input_avg == stats.input_median == 9

    def test_empty_raises(self):
        with pytest.raises(EmptyWorkload):
            summarize([])


def load_requests(lengths):
    from pipemax.model_core import Request
    return [Request(i, length, length) for i, length in enumerate(lengths)]
