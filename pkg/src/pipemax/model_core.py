"""Core cost and memory models for pipelined LLM decode with KV offloading.

Closed-form building blocks shared by the scheduler and the event simulator:
the affine decode-time estimator and its least-squares calibration, token
budgets implied by per-GPU memory, KV footprints, block-granular capacity
arithmetic, and the pipelined-prefill makespan formula.

Everything here is a pure function over immutable inputs and is safe to call
from any number of threads. Durations are float seconds; token counts and
byte sizes are integers throughout.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class NoKvHeadroom(ValueError):
    """The weight shard consumes all per-GPU memory, leaving no room for KV."""


class DegenerateSamples(ValueError):
    """Calibration samples do not span the estimator's parameter space."""


class CalibrationWarning(UserWarning):
    """A fitted coefficient came out negative and was clamped to zero."""


@dataclass
class Request:
    """One inference request tracked through prefill and decode.

    `prefix_len` is the current attention-prefix length: the full input plus
    every token generated so far. It drives both per-step attention cost and
    KV footprint.
    """

    id: int
    input_len: int
    output_len: int
    generated: int = 0

    def __post_init__(self):
        if self.input_len < 1:
            raise ValueError(f"request {self.id}: input_len must be >= 1")
        if self.output_len < 1:
            raise ValueError(f"request {self.id}: output_len must be >= 1")
        if not 0 <= self.generated <= self.output_len:
            raise ValueError(f"request {self.id}: generated out of range")

    @property
    def prefix_len(self) -> int:
        return self.input_len + self.generated

    @property
    def done(self) -> bool:
        return self.generated >= self.output_len


@dataclass(frozen=True)
class EstimatorParams:
    """Coefficients of the affine decode-time model.

    alpha: seconds per request in the batch (linear-layer cost).
    beta:  seconds per prefix token (attention cost).
    delta: constant per-iteration overhead in seconds.
    """

    alpha: float
    beta: float
    delta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.delta < 0:
            raise ValueError("estimator coefficients must be nonnegative")


@dataclass(frozen=True)
class ClusterConfig:
    """Hardware model of one pipeline-parallel node.

    All byte and token quantities are integers; bandwidths are bytes/second.
    `per_transfer_overhead` is the fixed launch cost paid per transfer
    fragment. `block_size` is the paged-KV allocation granularity in tokens.
    `per_token_prefill_seconds` maps a request's input length to its
    homogeneous per-stage prefill time.
    """

    n: int
    mem_per_gpu: int
    model_bytes: int
    kv_bytes_per_token: int
    h2d_bandwidth: float
    d2h_bandwidth: float
    cpu_kv_capacity: int
    activation_bytes_per_token: int = 0
    per_transfer_overhead: float = 0.0
    layers_per_stage: int = 8
    block_size: int = 16
    per_token_prefill_seconds: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "n", int(self.n))
        for name in ("mem_per_gpu", "model_bytes", "kv_bytes_per_token",
                     "cpu_kv_capacity", "activation_bytes_per_token",
                     "layers_per_stage", "block_size"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.n < 1:
            raise ValueError("pipeline depth n must be >= 1")
        if self.n * self.mem_per_gpu < self.model_bytes:
            raise ValueError("model weights do not fit in aggregate GPU memory")
        if self.h2d_bandwidth < 0 or self.d2h_bandwidth < 0:
            raise ValueError("bandwidths must be nonnegative")
        if self.kv_bytes_per_token < 1:
            raise ValueError("kv_bytes_per_token must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.layers_per_stage < 1:
            raise ValueError("layers_per_stage must be >= 1")
        if self.per_transfer_overhead < 0:
            raise ValueError("per_transfer_overhead must be >= 0")

    @property
    def weight_bytes_per_gpu(self) -> float:
        return self.model_bytes / self.n


@dataclass(frozen=True)
class PrefillInstance:
    """Per-request per-stage prefill times on a homogeneous n-stage pipeline."""

    stage_times: tuple
    n: int

    def __post_init__(self):
        object.__setattr__(self, "stage_times", tuple(float(t) for t in self.stage_times))
        if not self.stage_times:
            raise ValueError("at least one request required")
        if any(t <= 0 for t in self.stage_times):
            raise ValueError("stage times must be positive")
        if self.n < 1:
            raise ValueError("pipeline depth must be >= 1")


def estimate_decode_time(params: EstimatorParams, b: int, total_prefix_tokens: int) -> float:
    """Predicted wall time of one decode iteration of a batch.

    Affine in batch size and total prefix length: alpha*b + beta*L + delta.
    """
    if b < 0 or total_prefix_tokens < 0:
        raise ValueError("batch size and prefix tokens must be nonnegative")
    return params.alpha * b + params.beta * total_prefix_tokens + params.delta


def calibrate_estimator(samples) -> EstimatorParams:
    """Least-squares fit of the decode-time model from profiled samples.

    `samples` is an iterable of (batch_size, total_prefix_tokens, seconds).
    Raises DegenerateSamples when the (b, L, 1) design matrix is rank
    deficient. Negative fitted coefficients are clamped to zero with a
    CalibrationWarning, since all three costs are physically nonnegative.
    """
    rows = [(float(b), float(length), float(sec)) for b, length, sec in samples]
    if len(rows) < 3:
        raise DegenerateSamples("need at least 3 samples")
    a = np.array([[b, length, 1.0] for b, length, _ in rows])
    y = np.array([sec for _, _, sec in rows])
    # Column scaling keeps the rank test meaningful when L >> b.
    scale = np.maximum(np.abs(a).max(axis=0), 1e-300)
    if np.linalg.matrix_rank(a / scale) < 3:
        raise DegenerateSamples("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    clamped = np.maximum(coef, 0.0)
    if np.any(coef < 0):
        warnings.warn(
            f"negative fitted coefficients clamped to zero: {coef.tolist()}",
            CalibrationWarning,
        )
    return EstimatorParams(alpha=float(clamped[0]), beta=float(clamped[1]), delta=float(clamped[2]))


def _kv_headroom_bytes(cfg: ClusterConfig) -> int:
    # n*M - W, exact in integer arithmetic.
    return cfg.n * cfg.mem_per_gpu - cfg.model_bytes


def per_batch_token_budget(cfg: ClusterConfig) -> int:
    """Average token budget of one decode batch: floor((M - W/n) / T)."""
    headroom = _kv_headroom_bytes(cfg)
    if headroom <= 0:
        raise NoKvHeadroom("per-GPU memory is exhausted by the weight shard")
    return headroom // (cfg.n * cfg.kv_bytes_per_token)


def system_token_capacity(cfg: ClusterConfig) -> int:
    """System-wide storable tokens across all n resident batches: floor((n*M - W) / T)."""
    headroom = _kv_headroom_bytes(cfg)
    if headroom <= 0:
        raise NoKvHeadroom("aggregate GPU memory is exhausted by the weights")
    return headroom // cfg.kv_bytes_per_token


def kv_footprint(tokens: int, kv_bytes_per_token: int) -> int:
    """Bytes of KV cache held by `tokens` tokens."""
    if tokens < 0:
        raise ValueError("token count must be nonnegative")
    return tokens * kv_bytes_per_token


def blocks_for_tokens(tokens: int, block_size: int) -> int:
    """Paged-KV blocks needed to hold `tokens` tokens (last block may be partial)."""
    return -(-tokens // block_size) if tokens > 0 else 0


def capacity_blocks(cfg: ClusterConfig) -> int:
    """Whole KV blocks available per GPU (identical on every GPU by symmetry).

    Each block spans block_size tokens whose KV is sharded evenly, so the
    per-GPU block count equals the system-wide one: (n*M - W) // (bs * T).
    """
    headroom = _kv_headroom_bytes(cfg)
    if headroom <= 0:
        raise NoKvHeadroom("no KV headroom")
    return headroom // (cfg.block_size * cfg.kv_bytes_per_token)


def prefill_makespan_closed_form(inst: PrefillInstance) -> float:
    """Total pipelined-prefill time: sum of stage times plus (n-1) drain slots
    of the longest request."""
    times = inst.stage_times
    return sum(times) + (inst.n - 1) * max(times)
