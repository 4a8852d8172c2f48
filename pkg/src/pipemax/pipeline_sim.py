"""Deterministic event-driven simulation of the full serving workflow.

Prefill streams requests through the n-stage pipeline back to back, with
per-layer KV copies to host memory overlapping compute behind a small
staging pool. Decode cycles n batches through the pipeline; while batch i_t
executes, the scheduler's plan for batch j_t is committed and its KV is
prefetched over the host-to-device link, overwriting blocks reclaimed from
batch k_t. Freshly generated KV is offloaded eagerly so host replicas stay
complete, which makes later eviction free.

Every GPU holds a 1/n shard of each token's KV and its own PCIe link, so
all stages see identical transfer load; the simulator models stage 0's
channel pair and block pool as the representative and applies the same
activation-hop latency to every stage boundary. Time never depends on
wall-clock or iteration order ambiguity: equal-time events are ordered
compute-end, transfer-end, then starts, then by stage and insertion order,
and all randomness comes from named substreams of one seed.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import scheduler as sched
from .model_core import (
    ClusterConfig,
    EstimatorParams,
    Request,
    blocks_for_tokens,
    capacity_blocks,
    estimate_decode_time,
    per_batch_token_budget,
    system_token_capacity,
)
from .transfer import HIGH, LOW, ChannelSim

SCHEMA_VERSION = 1

_KIND_RANK = {"stage_compute_end": 0, "transfer_end": 1}


class ConfigError(ValueError):
    """The simulation was configured with an unusable cluster description."""


class OutOfMemory(RuntimeError):
    """Block accounting failed; a committed plan was infeasible (bug)."""


class CapacityError(ValueError):
    """A single request cannot fit in CPU KV memory."""


@dataclass
class SimEvent:
    time: float
    kind: str
    payload: dict
    seq: int = 0


class EventTrace:
    """Append-only event log, finalized into deterministic time order."""

    def __init__(self):
        self.events = []
        self._seq = 0

    def emit(self, time, kind, **payload):
        self.events.append(SimEvent(time=time, kind=kind, payload=payload, seq=self._seq))
        self._seq += 1

    def finalize(self):
        self.events.sort(key=lambda e: (
            e.time, _KIND_RANK.get(e.kind, 2), e.payload.get("stage", -1), e.seq))

    def kinds(self):
        out = {}
        for e in self.events:
            out[e.kind] = out.get(e.kind, 0) + 1
        return out

    def select(self, kind):
        return [e for e in self.events if e.kind == kind]

    def to_jsonl(self, path, timestamp=None):
        header = {"schema_version": SCHEMA_VERSION, "kind": "trace_header"}
        if timestamp is not None:
            header["generated_at"] = timestamp
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for e in self.events:
                fh.write(json.dumps({"time": e.time, "kind": e.kind, "payload": e.payload}) + "\n")


@dataclass(frozen=True)
class NoiseSpec:
    """Multiplicative execution-time noise, sampled per (batch, iteration)."""

    family: str = "normal"  # "normal" or "none"
    sigma: float = 0.02
    clip_sigmas: float = 3.0

    def __post_init__(self):
        if self.family not in ("normal", "none"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.sigma < 0 or self.clip_sigmas <= 0:
            raise ValueError("sigma must be >= 0 and clip_sigmas > 0")

    def factor(self, rng) -> float:
        if self.family == "none" or self.sigma == 0:
            return 1.0
        bound = self.clip_sigmas * self.sigma
        draw = rng.normal(0.0, self.sigma)
        return 1.0 + min(max(draw, -bound), bound)


@dataclass
class GpuState:
    """Block accounting of one GPU's KV region.

    KV is sharded evenly, so every stage's pool is identical; one instance
    stands in for all of them. allocate() raising OutOfMemory means the
    scheduler emitted an infeasible plan, which its reserves must prevent.
    """

    stage_id: int
    total_blocks: int
    free_blocks: int
    resident_blocks: dict = field(default_factory=dict)

    def allocate(self, rid, blocks: int):
        if blocks > self.free_blocks:
            raise OutOfMemory(
                f"request {rid} needs {blocks} blocks, only {self.free_blocks} free")
        self.free_blocks -= blocks
        self.resident_blocks[rid] = self.resident_blocks.get(rid, 0) + blocks

    def grow(self, rid):
        if self.free_blocks < 1:
            raise OutOfMemory(f"no free block for token growth of request {rid}")
        self.free_blocks -= 1
        self.resident_blocks[rid] += 1

    def release(self, rid):
        self.free_blocks += self.resident_blocks.pop(rid, 0)

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - self.free_blocks


@dataclass
class EpisodeMetrics:
    """Aggregated outcome of a simulation run.

    `prefetched_token_fraction` holds, per steady-phase iteration, the
    prefetched share of the updated batch. `exec_time_series` is the actual
    per-iteration decode duration; the predicted series sits alongside for
    estimator-fidelity checks.
    """

    total_tokens_generated: int = 0
    wall_seconds: float = 0.0
    tokens_per_second: float = 0.0
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0
    stall_seconds: float = 0.0
    prefetched_token_fraction: list = field(default_factory=list)
    exec_time_series: list = field(default_factory=list)
    exec_predicted_series: list = field(default_factory=list)
    iterations: int = 0
    completed_requests: int = 0
    steady_iteration: int = None
    max_active_batch_tokens: int = 0
    max_resident_tokens: int = 0
    max_kv_capacity_fraction: float = 0.0
    exposed_offload_seconds: float = 0.0
    phase_switches: int = 0
    growth_relief_evictions: int = 0

    def finalize(self):
        self.tokens_per_second = (
            self.total_tokens_generated / self.wall_seconds if self.wall_seconds > 0 else 0.0)
        return self

    def to_record(self, policy: str = "dynamic", seed: int = 0, timestamp=None) -> dict:
        fractions = self.prefetched_token_fraction
        record = {
            "schema_version": SCHEMA_VERSION,
            "policy": policy,
            "seed": seed,
            "total_tokens_generated": self.total_tokens_generated,
            "wall_seconds": self.wall_seconds,
            "tokens_per_second": self.tokens_per_second,
            "prefill_seconds": self.prefill_seconds,
            "decode_seconds": self.decode_seconds,
            "stall_seconds": self.stall_seconds,
            "iterations": self.iterations,
            "completed_requests": self.completed_requests,
            "steady_iteration": self.steady_iteration,
            "mean_prefetched_token_fraction": (
                sum(fractions) / len(fractions) if fractions else 0.0),
            "max_active_batch_tokens": self.max_active_batch_tokens,
            "max_resident_tokens": self.max_resident_tokens,
            "max_kv_capacity_fraction": self.max_kv_capacity_fraction,
            "exposed_offload_seconds": self.exposed_offload_seconds,
            "phase_switches": self.phase_switches,
            "growth_relief_evictions": self.growth_relief_evictions,
        }
        if timestamp is not None:
            record["generated_at"] = timestamp
        return record


def _drain_channel_records(channel: ChannelSim, trace: EventTrace, consumed: dict):
    """Convert newly produced dispatch records into paired transfer events."""
    start = consumed.get(channel.name, 0)
    for rec in channel.records[start:]:
        payload = {
            "channel": channel.name,
            "direction": channel.link.direction,
            "priority": rec.priority,
            "bytes": rec.n_bytes,
            "chunks": rec.chunks,
            "queued_at": rec.queued_at,
            "tag": rec.tag,
        }
        trace.emit(rec.start, "transfer_start", **payload)
        trace.emit(rec.end, "transfer_end", **payload)
    consumed[channel.name] = len(channel.records)


# ---------------------------------------------------------------------------
# Prefill
# ---------------------------------------------------------------------------

def _prefill_run(requests, cfg: ClusterConfig, offload: bool, start_time: float,
                 trace: EventTrace, d2h_channels, h2d_channels,
                 staging_pool_requests: int):
    """Pipeline the requests through all stages; returns (end_time, exposed).

    Stage s starts request r once stage s-1 has handed over its activations
    and stage s is free; additionally, when offloading, a stage admits a new
    request only after the KV of the request `staging_pool_requests` ahead
    has fully drained to the host (bounded staging memory).
    """
    n = cfg.n
    layers = cfg.layers_per_stage
    stage_free = [start_time] * n
    # last_offload[s] holds each admitted request's final-layer stream on stage s.
    last_offload = [deque() for _ in range(n)]
    exposed_total = 0.0
    end_last_stage = start_time
    for req in requests:
        t_i = req.input_len * cfg.per_token_prefill_seconds
        per_layer = t_i / layers
        layer_bytes = req.input_len * cfg.kv_bytes_per_token / (n * layers)
        act_bytes = req.input_len * cfg.activation_bytes_per_token
        prev_end = start_time
        for s in range(n):
            arrive = prev_end
            if s > 0 and act_bytes > 0:
                _, e1 = d2h_channels[s - 1].submit_high(prev_end, act_bytes,
                                                        tag=("act", req.id, s - 1))
                _, e2 = h2d_channels[s].submit_high(prev_end, act_bytes,
                                                    tag=("act", req.id, s))
                arrive = max(e1, e2)
            ready = max(arrive, stage_free[s])
            gate = ready
            if offload and len(last_offload[s]) >= staging_pool_requests:
                blocker = last_offload[s].popleft()
                gate_time = d2h_channels[s].finish_stream(blocker)
                if gate_time > ready:
                    trace.emit(ready, "stall_start", stage=s, request=req.id,
                               reason="offload_backpressure")
                    trace.emit(gate_time, "stall_end", stage=s, request=req.id,
                               reason="offload_backpressure")
                    exposed_total += gate_time - ready
                    gate = gate_time
            begin = gate
            end = begin + t_i
            trace.emit(begin, "stage_compute_start", phase="prefill", stage=s,
                       request=req.id, seconds=t_i)
            trace.emit(end, "stage_compute_end", phase="prefill", stage=s,
                       request=req.id)
            if offload and layer_bytes > 0:
                stream = None
                for layer in range(layers):
                    stream = d2h_channels[s].submit_stream(
                        begin + (layer + 1) * per_layer, layer_bytes,
                        chunk_bytes=layer_bytes,
                        tag=("kv_offload", req.id, s, layer))
                last_offload[s].append(stream)
            stage_free[s] = end
            prev_end = end
        end_last_stage = prev_end
    return end_last_stage, exposed_total


def simulate_prefill(requests, cfg: ClusterConfig, offload: bool = True,
                     staging_pool_requests: int = 2, priority_enabled: bool = True):
    """Run the prefill pipeline over `requests`; returns (trace, makespan)."""
    if not isinstance(cfg, ClusterConfig):
        raise ConfigError("cfg must be a ClusterConfig")
    if not requests:
        raise ValueError("requests must be nonempty")
    trace = EventTrace()
    d2h = [ChannelSim("d2h", cfg.d2h_bandwidth, cfg.per_transfer_overhead,
                      priority_enabled, name=f"d2h{s}") for s in range(cfg.n)]
    h2d = [ChannelSim("h2d", cfg.h2d_bandwidth, cfg.per_transfer_overhead,
                      priority_enabled, name=f"h2d{s}") for s in range(cfg.n)]
    end, _ = _prefill_run(list(requests), cfg, offload, 0.0, trace, d2h, h2d,
                          staging_pool_requests)
    consumed = {}
    for ch in d2h + h2d:
        ch.drain()
        _drain_channel_records(ch, trace, consumed)
    trace.finalize()
    return trace, end


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

class _DecodeEngine:
    def __init__(self, state, cfg, params, noise_spec, rng, requests, trace,
                 metrics, gpu, h2d, d2h, mode="dynamic", quota_tokens=0,
                 actual_params=None, start_time=0.0):
        self.state = state
        self.cfg = cfg
        self.params = params
        self.actual_params = actual_params or params
        self.noise = noise_spec or NoiseSpec()
        self.rng = rng
        self.requests = requests
        self.trace = trace
        self.metrics = metrics
        self.gpu = gpu
        self.h2d = h2d
        self.d2h = d2h
        self.mode = mode
        self.quota = quota_tokens
        self.clock = start_time
        self.stage_free = [start_time] * cfg.n
        self.prev_iter_end = {}
        self.pending_prefetch = {}  # batch index -> (last stream or None, submit time)
        self.resident_tokens = sum(state.lengths[r] for r in state.gpu_resident)
        self.capacity_tokens = capacity_blocks(cfg) * cfg.block_size
        self.chunk_bytes = cfg.block_size * cfg.kv_bytes_per_token / cfg.n
        self.live_tokens = sum(state.lengths.values())
        self.pool_was_empty = not state.cpu_pool

    def _note_resident(self):
        self.metrics.max_resident_tokens = max(self.metrics.max_resident_tokens,
                                               self.resident_tokens)
        frac = self.resident_tokens / self.capacity_tokens if self.capacity_tokens else 0.0
        self.metrics.max_kv_capacity_fraction = max(self.metrics.max_kv_capacity_fraction, frac)

    def _growth_relief_victim(self, batch_idx, growing_rid):
        # The just-executed batch is the next eviction target anyway; taking
        # a member half a step early funds block growth in degenerate
        # full-memory states. Host replicas are complete, so this is free.
        for rid in sorted(self.state.batches[batch_idx]):
            if rid != growing_rid and rid in self.state.gpu_resident:
                return rid
        return None

    def _evict_to_pool(self, rid):
        state = self.state
        idx = state._batch_of.pop(rid)
        state.batches[idx].remove(rid)
        state._batch_tokens[idx] -= state.lengths[rid]
        state.gpu_resident.remove(rid)
        state._resident_blocks -= blocks_for_tokens(state.lengths[rid],
                                                    self.cfg.block_size)
        state._pool_add(rid)
        self.gpu.release(rid)
        self.resident_tokens -= state.lengths[rid]
        self.metrics.growth_relief_evictions += 1

    def run(self, horizon=None, stop_condition=None):
        cfg = self.cfg
        state = self.state
        n = cfg.n
        iters = 0
        while True:
            if horizon is not None and iters >= horizon:
                break
            if not state.lengths:
                break  # everything completed
            if stop_condition is not None and stop_condition(self):
                break
            batches_empty = all(not b for b in state.batches)
            if batches_empty and (self.mode == "none" or not state.cpu_pool):
                break
            try:
                plan = sched._plan_step(state, self.params, cfg, mode=self.mode,
                                        quota_tokens=self.quota)
            except sched.EmptySystem:
                break
            if not plan.exec_batch and not plan.prefetch_set and batches_empty:
                break  # nothing can make progress

            i = plan.exec_batch_index
            pending = self.pending_prefetch.pop(i, None)
            base_ready = max(self.stage_free[0], self.prev_iter_end.get(i, self.clock))
            tau = base_ready
            if pending is not None and pending[0] is not None:
                prefetch_end = self.h2d.finish_stream(pending[0])
                if prefetch_end > base_ready:
                    self.trace.emit(base_ready, "stall_start", iter=state.t, batch=i,
                                    reason="prefetch_wait")
                    self.trace.emit(prefetch_end, "stall_end", iter=state.t, batch=i,
                                    reason="prefetch_wait")
                    self.metrics.stall_seconds += prefetch_end - base_ready
                    tau = prefetch_end

            b = len(plan.exec_batch)
            tokens_exec = state.batch_tokens(i)
            actual_base = estimate_decode_time(self.actual_params, b, tokens_exec)
            actual = actual_base * self.noise.factor(self.rng)
            dur = actual / n

            # Commit the plan and mirror it into the block pool.
            sched.commit_plan(state, plan, cfg)
            for rid in plan.evictions:
                self.gpu.release(rid)
                self.resident_tokens -= state.lengths[rid]
            for rid in sorted(plan.prefetch_set):
                self.gpu.allocate(rid, blocks_for_tokens(state.lengths[rid], cfg.block_size))
                self.resident_tokens += state.lengths[rid]
            if not state.cpu_pool and not self.pool_was_empty:
                self.trace.emit(tau, "pool_exhausted", iter=state.t - 1)
            self.pool_was_empty = not state.cpu_pool
            self._note_resident()

            # Prefetch the newly selected requests for batch j over h2d.
            last_stream = None
            for rid in sorted(plan.prefetch_set):
                n_bytes = (blocks_for_tokens(state.lengths[rid], cfg.block_size)
                           * self.chunk_bytes)
                last_stream = self.h2d.submit_stream(tau, n_bytes, self.chunk_bytes,
                                                     tag=("kv_prefetch", rid,
                                                          plan.next_batch_index))
            self.pending_prefetch[plan.next_batch_index] = (last_stream, tau)

            # Stage pipeline for this iteration.
            end0 = tau + dur
            hop = 0.0
            act_bytes = b * cfg.activation_bytes_per_token
            if n > 1 and act_bytes > 0:
                _, e1 = self.d2h.submit_high(end0, act_bytes, tag=("act", state.t - 1, 0))
                _, e2 = self.h2d.submit_high(end0, act_bytes, tag=("act", state.t - 1, 1))
                hop = max(e1, e2) - end0
            self.trace.emit(tau, "stage_compute_start", phase="decode", stage=0,
                            iter=state.t - 1, batch=i, exec_seconds=actual,
                            predicted_seconds=plan.predicted_exec_seconds,
                            batch_tokens=tokens_exec,
                            resident_tokens_total=self.resident_tokens,
                            next_residual_tokens=plan.residual_tokens,
                            next_prefetched_tokens=plan.prefetch_tokens,
                            budget_tokens=plan.prefetch_budget_tokens,
                            capacity_tokens=self.capacity_tokens,
                            steady=plan.steady)
            self.trace.emit(end0, "stage_compute_end", phase="decode", stage=0,
                            iter=state.t - 1, batch=i)
            self.stage_free[0] = end0
            prev_end = end0
            for s in range(1, n):
                begin = max(prev_end + hop, self.stage_free[s])
                finish = begin + dur
                self.trace.emit(begin, "stage_compute_start", phase="decode", stage=s,
                                iter=state.t - 1, batch=i)
                self.trace.emit(finish, "stage_compute_end", phase="decode", stage=s,
                                iter=state.t - 1, batch=i)
                self.stage_free[s] = finish
                prev_end = finish
            end_last = prev_end
            self.prev_iter_end[i] = end_last

            # Offload this iteration's new KV (stage-0 share at its slot end).
            if b > 0 and cfg.d2h_bandwidth > 0:
                self.d2h.submit_stream(end0, b * cfg.kv_bytes_per_token / n,
                                       self.chunk_bytes,
                                       tag=("kv_offload_decode", state.t - 1))

            # Iteration end: count tokens, settle completions (freeing their
            # blocks), then fund block crossings from the free pool.
            completed = []
            crossings = []
            for rid in sorted(plan.exec_batch):
                crossed = state.bump_generated(rid)
                self.resident_tokens += 1
                self.live_tokens += 1
                req = self.requests[rid]
                req.generated += 1
                self.metrics.total_tokens_generated += 1
                if req.done:
                    completed.append(rid)
                elif crossed:
                    crossings.append(rid)
            for rid in completed:
                self.trace.emit(end_last, "request_complete", request=rid,
                                iter=state.t - 1)
                self.resident_tokens -= state.lengths[rid]
                self.live_tokens -= state.lengths[rid]
                state.remove_request(rid)
                self.gpu.release(rid)
                self.metrics.completed_requests += 1
            for rid in crossings:
                if rid not in state.gpu_resident:
                    continue  # displaced by growth relief below
                while self.gpu.free_blocks < 1:
                    victim = self._growth_relief_victim(i, rid)
                    if victim is None:
                        raise OutOfMemory(
                            f"no block for growth of request {rid} and no victim")
                    self._evict_to_pool(victim)
                self.gpu.grow(rid)
            self._note_resident()

            self.metrics.exec_time_series.append(actual)
            self.metrics.exec_predicted_series.append(plan.predicted_exec_seconds)
            self.metrics.max_active_batch_tokens = max(
                self.metrics.max_active_batch_tokens, tokens_exec)
            if plan.steady:
                if self.metrics.steady_iteration is None:
                    self.metrics.steady_iteration = self.metrics.iterations
                denom = plan.residual_tokens + plan.prefetch_tokens
                # Composition is meaningful only while the CPU pool still has
                # requests to feed the batch update.
                if denom > 0 and not self.pool_was_empty:
                    self.metrics.prefetched_token_fraction.append(
                        plan.prefetch_tokens / denom)
            self.metrics.iterations += 1
            iters += 1
            self.clock = max(self.clock, end_last)
        return self.clock


def simulate_decode(state, cfg: ClusterConfig, params: EstimatorParams,
                    noise_spec: NoiseSpec = None, horizon: int = None, *,
                    requests: dict, seed: int = 0, actual_params=None,
                    priority_enabled: bool = True):
    """Run cyclic decode from a prepared scheduler state.

    `requests` maps id -> Request for every id the state references; the
    simulator advances their `generated` counters and removes them on
    completion. Returns (trace, metrics).
    """
    if not isinstance(cfg, ClusterConfig):
        raise ConfigError("cfg must be a ClusterConfig")
    trace = EventTrace()
    metrics = EpisodeMetrics()
    rng = np.random.default_rng([seed, 1])
    state.configure_blocks(cfg.block_size)
    gpu = GpuState(stage_id=0, total_blocks=capacity_blocks(cfg),
                   free_blocks=capacity_blocks(cfg) - state.resident_blocks())
    for rid in state.gpu_resident:
        gpu.resident_blocks[rid] = blocks_for_tokens(state.lengths[rid], cfg.block_size)
    h2d = ChannelSim("h2d", cfg.h2d_bandwidth, cfg.per_transfer_overhead,
                     priority_enabled, name="h2d0")
    d2h = ChannelSim("d2h", cfg.d2h_bandwidth, cfg.per_transfer_overhead,
                     priority_enabled, name="d2h0")
    engine = _DecodeEngine(state, cfg, params, noise_spec, rng, requests, trace,
                           metrics, gpu, h2d, d2h, actual_params=actual_params)
    end = engine.run(horizon=horizon)
    consumed = {}
    for ch in (h2d, d2h):
        ch.drain()
        _drain_channel_records(ch, trace, consumed)
    trace.finalize()
    metrics.wall_seconds = end
    metrics.decode_seconds = end
    metrics.finalize()
    return trace, metrics


# ---------------------------------------------------------------------------
# Episodes: prefill/decode alternation under the memory-driven switch policy
# ---------------------------------------------------------------------------

def _parse_policy(policy):
    if policy == "dynamic":
        return "dynamic", None
    if policy in ("no_prefetch", "no_prefetch_pp"):
        return "none", None
    if isinstance(policy, tuple) and policy[0] == "static":
        ratio = float(policy[1])
    elif isinstance(policy, str) and policy.startswith("static:"):
        ratio = float(policy.split(":", 1)[1])
    else:
        raise ValueError(f"unknown policy {policy!r}")
    if not 0 < ratio <= 1:
        raise ValueError("static prefetch ratio must be in (0, 1]")
    return "static", ratio


def run_episode(workload, cfg: ClusterConfig, params: EstimatorParams,
                policy="dynamic", seed: int = 0, *, noise_spec: NoiseSpec = None,
                scheduler_knobs: dict = None, rho_hi: float = 0.9,
                actual_params: EstimatorParams = None, horizon: int = None,
                staging_pool_requests: int = 2, priority_enabled: bool = True,
                trace: EventTrace = None) -> EpisodeMetrics:
    """Simulate one full episode: alternate prefill and decode phases until
    the workload completes.

    Prefill admits requests until host KV usage reaches rho_hi of capacity
    (or the queue drains), then decode runs until either everything live
    fits on the GPUs again (and more work is waiting) or all requests
    finish. Deterministic under `seed`.
    """
    if not workload:
        raise ValueError("workload must be nonempty")
    if not isinstance(cfg, ClusterConfig):
        raise ConfigError("cfg must be a ClusterConfig")
    mode, ratio = _parse_policy(policy)
    quota = int(ratio * system_token_capacity(cfg)) if ratio else 0
    for r in workload:
        if (r.input_len + r.output_len) * cfg.kv_bytes_per_token > cfg.cpu_kv_capacity:
            raise CapacityError(f"request {r.id} exceeds CPU KV capacity")
    knobs = dict(scheduler_knobs or {})
    # Episodes smooth the budget's time input so per-batch imbalance does
    # not keep the steady detector from ever firing; pass ema_alpha=None to
    # get the literal per-iteration form.
    if "ema_alpha" not in knobs:
        knobs["ema_alpha"] = 0.3
    noise = noise_spec or NoiseSpec()
    rng = np.random.default_rng([seed, 1])
    own_trace = trace if trace is not None else EventTrace()
    metrics = EpisodeMetrics()
    requests = {r.id: Request(r.id, r.input_len, r.output_len, r.generated)
                for r in workload}
    pending = deque(sorted(requests.values(), key=lambda r: r.id))
    ready = []  # decode-ready ids in prefill completion order
    live_tokens = 0
    clock = 0.0
    cap_tokens = system_token_capacity(cfg)
    budget = per_batch_token_budget(cfg)
    cap_blocks = capacity_blocks(cfg)
    chunk_bytes = cfg.block_size * cfg.kv_bytes_per_token / cfg.n
    d2h = [ChannelSim("d2h", cfg.d2h_bandwidth, cfg.per_transfer_overhead,
                      priority_enabled, name=f"d2h{s}") for s in range(cfg.n)]
    h2d = [ChannelSim("h2d", cfg.h2d_bandwidth, cfg.per_transfer_overhead,
                      priority_enabled, name=f"h2d{s}") for s in range(cfg.n)]
    consumed = {}

    while pending or ready:
        # ------------------------------------------------ prefill phase
        admitted = []
        if pending:
            watermark = rho_hi * cfg.cpu_kv_capacity
            while pending:
                nxt = pending[0]
                projected = (live_tokens + nxt.input_len) * cfg.kv_bytes_per_token
                if admitted and projected > watermark:
                    break
                if projected > cfg.cpu_kv_capacity:
                    break
                pending.popleft()
                admitted.append(nxt)
                live_tokens += nxt.input_len
            if admitted:
                own_trace.emit(clock, "phase_switch", to="prefill",
                               live_kv_tokens=live_tokens)
                metrics.phase_switches += 1
                end, exposed = _prefill_run(admitted, cfg, True, clock, own_trace,
                                            d2h, h2d, staging_pool_requests)
                metrics.prefill_seconds += end - clock
                metrics.exposed_offload_seconds += exposed
                clock = end
                ready.extend(r.id for r in admitted)
        if not ready:
            break

        # ------------------------------------------------ decode phase
        own_trace.emit(clock, "phase_switch", to="decode", live_kv_tokens=live_tokens)
        metrics.phase_switches += 1

        # Initial GPU residency. The closed-set baseline fills the GPUs up
        # front (reserving each request's full growth so it can decode to
        # completion in place); the prefetching policies start from the
        # prefill staging remnants and grow through the scheduler.
        assignment = {}
        if mode == "none":
            used_blocks = 0
            resident_ids = []
            totals = [0] * cfg.n
            for rid in ready:
                req = requests[rid]
                peak = req.prefix_len + (req.output_len - req.generated)
                blocks = blocks_for_tokens(peak, cfg.block_size)
                target = min(range(cfg.n), key=lambda idx: (totals[idx], idx))
                if totals[target] + peak > budget or used_blocks + blocks > cap_blocks:
                    break
                totals[target] += peak
                used_blocks += blocks
                assignment[rid] = target
                resident_ids.append(rid)
            if not resident_ids:
                break  # head request can never fit; stop rather than spin
        else:
            remnants = min(2 * cfg.n, len(ready))
            resident_ids = ready[-remnants:] if remnants else []
        resident_set = set(resident_ids)
        pool_ids = [rid for rid in ready if rid not in resident_set]

        lengths = {rid: requests[rid].prefix_len for rid in ready}
        if mode == "none":
            batches = [set() for _ in range(cfg.n)]
            for rid in resident_ids:
                batches[assignment[rid]].add(rid)
        else:
            batches = sched.initial_partition(
                [requests[rid] for rid in resident_ids], cfg.n)
        state = sched.SchedulerState(
            n=cfg.n, batches=batches, lengths=lengths,
            gpu_resident=set(resident_ids), cpu_pool=set(pool_ids),
            **knobs)
        state.configure_blocks(cfg.block_size)

        gpu = GpuState(stage_id=0, total_blocks=cap_blocks,
                       free_blocks=cap_blocks - state.resident_blocks())
        for rid in resident_ids:
            gpu.resident_blocks[rid] = blocks_for_tokens(lengths[rid], cfg.block_size)

        # Charge the bulk load of the initial residency.
        load_stream = None
        for rid in resident_ids:
            n_bytes = blocks_for_tokens(lengths[rid], cfg.block_size) * chunk_bytes
            load_stream = h2d[0].submit_stream(clock, n_bytes, chunk_bytes,
                                               tag=("kv_load", rid))
        if load_stream is not None:
            clock = max(clock, h2d[0].finish_stream(load_stream))

        engine = _DecodeEngine(state, cfg, params, noise, rng, requests, own_trace,
                               metrics, gpu, h2d[0], d2h[0], mode=mode,
                               quota_tokens=quota, actual_params=actual_params,
                               start_time=clock)

        next_input = pending[0].input_len if pending else None

        def stop_condition(eng):
            if horizon is not None and metrics.iterations >= horizon:
                return True
            if next_input is None:
                return False
            # Resume prefill once everything live fits back on the GPUs and
            # the head of the queue has room in host memory.
            if eng.live_tokens > cap_tokens:
                return False
            return (eng.live_tokens + next_input) * cfg.kv_bytes_per_token \
                <= cfg.cpu_kv_capacity

        decode_start = clock
        clock = engine.run(horizon=None, stop_condition=stop_condition)
        metrics.decode_seconds += clock - decode_start
        live_tokens = engine.live_tokens

        # Survivors drop their GPU copies (host replicas are complete) and
        # return to the decode-ready pool for the next round.
        ready = sorted(state.lengths)
        if horizon is not None and metrics.iterations >= horizon:
            break

    for ch in d2h + h2d:
        ch.drain()
        _drain_channel_records(ch, own_trace, consumed)
    own_trace.finalize()
    metrics.wall_seconds = clock
    metrics.finalize()
    # Propagate final progress back to the caller's request objects.
    for r in workload:
        r.generated = requests[r.id].generated
    return metrics


def run_baseline(workload, cfg: ClusterConfig, params: EstimatorParams,
                 baseline="no_prefetch", seed: int = 0, **kwargs) -> EpisodeMetrics:
    """Episode runner with the prefetch policy swapped for a baseline:
    "no_prefetch" (closed GPU-resident set) or "static:<ratio>" (fixed
    per-iteration quota regardless of predicted time)."""
    return run_episode(workload, cfg, params, policy=baseline, seed=seed, **kwargs)
