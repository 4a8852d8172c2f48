"""Synthetic request populations and trace ingestion.

The generator targets published length statistics by mean and median. A
lognormal family is solved from the two targets directly (mu = ln(median),
sigma = sqrt(2 ln(mean/median))), which captures the heavy right tail of
chat-style outputs; a truncated normal covers near-symmetric long-input
corpora; `constant` makes degenerate uniform workloads for tests.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .model_core import Request

LOGNORMAL = "lognormal"
NORMAL_TRUNCATED = "normal_truncated"
CONSTANT = "constant"


class SpecError(ValueError):
    """The distribution spec cannot be realized."""


class ParseError(ValueError):
    """A trace line could not be parsed."""


class EmptyWorkload(ValueError):
    """Statistics were requested over zero requests."""


@dataclass(frozen=True)
class LengthSpec:
    """Target statistics of one length distribution (tokens)."""

    family: str
    target_avg: float
    target_median: float
    min: int = 1
    max: int = 8192
    sd: float = None  # normal_truncated only; defaults to 0.25 * target_avg

    def __post_init__(self):
        if self.family not in (LOGNORMAL, NORMAL_TRUNCATED, CONSTANT):
            raise SpecError(f"unknown family {self.family!r}")
        if self.target_median <= 0:
            raise SpecError("target_median must be positive")
        if self.family == LOGNORMAL and self.target_avg < self.target_median:
            raise SpecError("lognormal needs target_avg >= target_median")
        if not self.min <= self.target_median <= self.max:
            raise SpecError("need min <= median <= max")


@dataclass(frozen=True)
class WorkloadSpec:
    count: int
    input_dist: LengthSpec
    output_dist: LengthSpec
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise SpecError("count must be >= 1")


def _sample_lengths(spec: LengthSpec, count: int, rng) -> np.ndarray:
    if spec.family == CONSTANT:
        return np.full(count, int(round(spec.target_avg)), dtype=np.int64)
    if spec.family == LOGNORMAL:
        mu = math.log(spec.target_median)
        sigma = math.sqrt(2.0 * math.log(spec.target_avg / spec.target_median))
        raw = rng.lognormal(mean=mu, sigma=sigma, size=count)
    else:
        sd = spec.sd if spec.sd is not None else 0.25 * spec.target_avg
        raw = rng.normal(loc=spec.target_avg, scale=sd, size=count)
    clipped = np.clip(np.rint(raw), max(spec.min, 1), spec.max)
    return clipped.astype(np.int64)


def generate_synthetic(spec: WorkloadSpec) -> list:
    """Materialize `spec.count` requests, deterministic under spec.seed."""
    rng = np.random.default_rng(spec.seed)
    inputs = _sample_lengths(spec.input_dist, spec.count, rng)
    outputs = _sample_lengths(spec.output_dist, spec.count, rng)
    return [Request(id=i, input_len=int(inp), output_len=int(out))
            for i, (inp, out) in enumerate(zip(inputs, outputs))]


def load_trace(path) -> list:
    """Read requests from a JSONL trace of {id?, input_len, output_len} lines.

    Missing ids are assigned sequentially. Raises ParseError with the line
    number on malformed JSON and ValueError on nonpositive lengths.
    """
    requests = []
    next_id = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if not isinstance(record, dict) or "input_len" not in record or "output_len" not in record:
                raise ParseError(f"line {lineno}: need input_len and output_len fields")
            input_len = int(record["input_len"])
            output_len = int(record["output_len"])
            if input_len < 1 or output_len < 1:
                raise ValueError(f"line {lineno}: lengths must be positive")
            rid = int(record["id"]) if "id" in record else next_id
            requests.append(Request(id=rid, input_len=input_len, output_len=output_len))
            next_id = max(next_id, rid) + 1
    return requests


@dataclass(frozen=True)
class WorkloadStats:
    count: int
    input_avg: float
    input_median: float
    output_avg: float
    output_median: float


def _lower_median(values) -> float:
    # Lower of the two middles for even counts, matching integer token
    # semantics.
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def summarize(requests) -> WorkloadStats:
    """Mean and (lower-)median of input and output lengths."""
    if not requests:
        raise EmptyWorkload("no requests to summarize")
    inputs = [r.input_len for r in requests]
    outputs = [r.output_len for r in requests]
    return WorkloadStats(
        count=len(requests),
        input_avg=sum(inputs) / len(inputs),
        input_median=_lower_median(inputs),
        output_avg=sum(outputs) / len(outputs),
        output_median=_lower_median(outputs),
    )


def sharegpt_like(count: int, seed: int = 0) -> WorkloadSpec:
    """Balanced chat-style lengths (moderate inputs, heavy-tailed outputs)."""
    return WorkloadSpec(
        count=count,
        input_dist=LengthSpec(LOGNORMAL, target_avg=343.76, target_median=148.00),
        output_dist=LengthSpec(LOGNORMAL, target_avg=237.20, target_median=152.00),
        seed=seed,
    )


def longbench_like(count: int, seed: int = 0) -> WorkloadSpec:
    """Long near-symmetric inputs with short heavy-tailed outputs."""
    return WorkloadSpec(
        count=count,
        input_dist=LengthSpec(NORMAL_TRUNCATED, target_avg=2686.89, target_median=2736.50),
        output_dist=LengthSpec(LOGNORMAL, target_avg=101.78, target_median=19.00),
        seed=seed,
    )
