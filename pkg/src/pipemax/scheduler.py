"""Prefetch-aware cyclic decode scheduling.

Decode requests are partitioned into n batches executed in cyclic order.
While batch i_t runs, the scheduler plans the next batch j_t: it keeps the
requests whose KV is already GPU-resident, derives a prefetch budget from
the predicted iteration time and the host-to-device bandwidth, and selects
CPU-resident requests to prefetch into the space reclaimed from the
just-executed batch k_t.

Selection policy evolves in two phases. During warm-up the selector packs
the shortest requests first, growing batch size and therefore iteration
time, which feeds back into a larger budget. Once the budget stabilizes
(sliding-window test), the selector switches to greedy saturation plus
exchange-based refinement that matches the modeled time of the prefetched
set to the execution-time gap left by the residual.

`schedule_step` is pure: it returns a StepPlan without touching state.
`commit_plan` applies one. All tie-breaking is by ascending request id so
identical states produce identical plans.
"""

import bisect
from collections import deque
from dataclasses import dataclass, field

from .model_core import (
    ClusterConfig,
    EstimatorParams,
    blocks_for_tokens,
    capacity_blocks,
    estimate_decode_time,
)

# How many sorted candidates an exchange move may scan before giving up.
_REFINE_SCAN = 128

_BUDGET_CAP = 1 << 62  # stand-in for an unbounded budget (infinite bandwidth)


class EmptySystem(RuntimeError):
    """No batch and no pooled request: there is nothing to schedule."""


def batch_indices(t: int, n: int) -> tuple:
    """(executing, next-to-update, just-evicted) batch indices at iteration t."""
    if n < 1 or t < 0:
        raise ValueError("need n >= 1 and t >= 0")
    i = t % n
    return i, (i + 1) % n, (i - 1) % n


def initial_partition(requests, n: int) -> list:
    """Split requests into n batches of near-equal size with balanced total
    prefix length.

    Longest-first greedy into the currently lightest batch; sizes are kept
    within one of each other (r batches of ceil(m/n), the rest floor(m/n)).
    Returns a list of n id sets.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    reqs = sorted(requests, key=lambda r: (-r.prefix_len, r.id))
    m = len(reqs)
    base, extra = divmod(m, n)
    batches = [set() for _ in range(n)]
    totals = [0] * n
    extras_used = 0
    for r in reqs:
        best = None
        for idx in range(n):
            size = len(batches[idx])
            if size < base or (size == base and extras_used < extra):
                key = (totals[idx], idx)
                if best is None or key < best[0]:
                    best = (key, idx)
        idx = best[1]
        if len(batches[idx]) == base:
            extras_used += 1
        batches[idx].add(r.id)
        totals[idx] += r.prefix_len
    return batches


def prefetch_budget(bandwidth: float, predicted_seconds: float, kv_bytes_per_token: int) -> int:
    """Tokens transferable host-to-device within one predicted iteration."""
    if bandwidth < 0 or predicted_seconds < 0:
        raise ValueError("bandwidth and predicted time must be nonnegative")
    if kv_bytes_per_token < 1:
        raise ValueError("kv_bytes_per_token must be >= 1")
    raw = bandwidth * predicted_seconds
    if raw == float("inf"):
        return _BUDGET_CAP
    return int(raw // kv_bytes_per_token)


def residual_set(next_batch: set, gpu_resident: set) -> set:
    """Members of the next batch whose KV is already on the GPU."""
    return set(next_batch) & set(gpu_resident)


def detect_steady(budget_history, window_w: int, stability_threshold: float) -> bool:
    """True once the relative budget variation over the last window_w entries
    drops to the threshold. Short or all-zero windows are not steady."""
    if window_w < 2:
        raise ValueError("window_w must be >= 2")
    history = list(budget_history)
    if len(history) < window_w:
        return False
    window = history[-window_w:]
    top = max(window)
    if top <= 0:
        return False
    return (top - min(window)) / top <= stability_threshold


def _iter_desc(items):
    # items ascending by (length, id); yield by descending length,
    # ascending id within equal lengths.
    i = len(items) - 1
    while i >= 0:
        j = i
        while j > 0 and items[j - 1][0] == items[i][0]:
            j -= 1
        yield from items[j:i + 1]
        i = j - 1


def _warmup_core(items_asc, budget, block_size, max_blocks, block_reserve):
    chosen = set()
    total = 0
    blocks_used = 0
    for length, rid in items_asc:
        if total + length > budget:
            break  # ascending: no later item fits either
        cost = blocks_for_tokens(length, block_size) + block_reserve
        if max_blocks is not None and blocks_used + cost > max_blocks:
            break  # cost is nondecreasing with length
        chosen.add(rid)
        total += length
        blocks_used += cost
    return chosen


def select_prefetch_warmup(cpu_pool, budget_tokens: int, block_size: int = 1,
                           max_blocks=None) -> set:
    """Short-first fill: admit requests by ascending prefix length (ties by
    ascending id) while the cumulative length stays within the budget.

    `cpu_pool` maps request id -> prefix length. The optional block cap
    additionally bounds the paged-memory cost of the selection.
    """
    if budget_tokens < 0:
        raise ValueError("budget must be nonnegative")
    items = sorted((length, rid) for rid, length in cpu_pool.items())
    return _warmup_core(items, budget_tokens, block_size, max_blocks, 1 if max_blocks is not None else 0)


def _steady_core(items_asc, budget, gap, params, theta, max_steps, eps,
                 block_size, max_blocks, block_reserve):
    chosen = {}
    total = 0
    blocks_used = 0
    costs = {}
    # Greedy stage: length-first saturation of the budget.
    for length, rid in _iter_desc(items_asc):
        if total + length > budget:
            continue
        cost = blocks_for_tokens(length, block_size) + block_reserve
        if max_blocks is not None and blocks_used + cost > max_blocks:
            continue
        chosen[rid] = length
        costs[rid] = cost
        total += length
        blocks_used += cost
    if not chosen:
        return set()
    sat_floor = theta * budget
    if total < sat_floor:
        # Saturation unreachable: keep the maximal-length greedy set.
        return set(chosen)

    def cost_of(length, rid):
        return costs.get(rid, blocks_for_tokens(length, block_size) + block_reserve)

    for _ in range(max_steps):
        modeled = params.alpha * len(chosen) + params.beta * total
        err = abs(modeled - gap)
        if err <= eps:
            break
        improved = False
        if modeled < gap:
            # Swap one long selected request for several shorter ones.
            for length_out, rid_out in sorted(((l, r) for r, l in chosen.items()),
                                              key=lambda x: (-x[0], x[1])):
                cand_total = total - length_out
                cand_blocks = blocks_used - cost_of(length_out, rid_out)
                adds = []
                for length_in, rid_in in items_asc:
                    if rid_in in chosen:
                        continue
                    if cand_total + length_in > budget:
                        break
                    cost_in = blocks_for_tokens(length_in, block_size) + block_reserve
                    if max_blocks is not None and cand_blocks + cost_in > max_blocks:
                        break
                    adds.append((length_in, rid_in, cost_in))
                    cand_total += length_in
                    cand_blocks += cost_in
                if not adds or cand_total < sat_floor:
                    continue
                new_modeled = params.alpha * (len(chosen) - 1 + len(adds)) + params.beta * cand_total
                if abs(new_modeled - gap) < err:
                    del chosen[rid_out]
                    blocks_used -= cost_of(length_out, rid_out)
                    costs.pop(rid_out, None)
                    total = cand_total
                    blocks_used = cand_blocks
                    for length_in, rid_in, cost_in in adds:
                        chosen[rid_in] = length_in
                        costs[rid_in] = cost_in
                    improved = True
                    break
        else:
            # Swap the smallest prefix of short selected requests for one
            # longer unselected request.
            sel_asc = sorted(((l, r) for r, l in chosen.items()))
            scanned = 0
            for length_in, rid_in in _iter_desc(items_asc):
                if rid_in in chosen:
                    continue
                scanned += 1
                if scanned > _REFINE_SCAN:
                    break
                lo = total + length_in - budget
                hi = total + length_in - sat_floor
                cum = 0
                outs = []
                for length_out, rid_out in sel_asc:
                    if cum >= lo:
                        break
                    outs.append((length_out, rid_out))
                    cum += length_out
                if cum < lo or cum > hi:
                    continue
                cost_in = blocks_for_tokens(length_in, block_size) + block_reserve
                cand_blocks = blocks_used - sum(cost_of(l, r) for l, r in outs) + cost_in
                if max_blocks is not None and cand_blocks > max_blocks:
                    continue
                cand_total = total - cum + length_in
                new_modeled = params.alpha * (len(chosen) - len(outs) + 1) + params.beta * cand_total
                if abs(new_modeled - gap) < err:
                    for length_out, rid_out in outs:
                        del chosen[rid_out]
                        costs.pop(rid_out, None)
                    chosen[rid_in] = length_in
                    costs[rid_in] = cost_in
                    total = cand_total
                    blocks_used = cand_blocks
                    improved = True
                    break
        if not improved:
            break
    return set(chosen)


def select_prefetch_steady(cpu_pool, budget_tokens: int, gap_seconds: float,
                           params: EstimatorParams, saturation_theta: float = 0.9,
                           max_refine_steps: int = 32, match_epsilon=None,
                           block_size: int = 1, max_blocks=None) -> set:
    """Greedy budget saturation followed by exchange-based local refinement.

    The returned set always satisfies the budget (and optional block cap).
    Among the candidates it considers, saturation of at least
    saturation_theta * budget takes precedence; refinement then exchanges
    long-for-several-short (or the reverse) to bring the modeled execution
    contribution alpha*|P| + beta*sum(L) close to `gap_seconds`, stopping
    within `match_epsilon` (default alpha/2) or after max_refine_steps moves.
    """
    if budget_tokens < 0:
        raise ValueError("budget must be nonnegative")
    eps = params.alpha / 2 if match_epsilon is None else match_epsilon
    items = sorted((length, rid) for rid, length in cpu_pool.items())
    return _steady_core(items, budget_tokens, gap_seconds, params, saturation_theta,
                        max_refine_steps, eps, block_size, max_blocks,
                        1 if max_blocks is not None else 0)


@dataclass(frozen=True)
class StepPlan:
    """One iteration's scheduling decision, produced by schedule_step.

    Committing the plan moves `prefetch_set` from the CPU pool into GPU
    residency, evicts `evictions` from batch k, and replaces batch j with
    `updated_next_batch` (the GPU-resident residual plus the prefetched
    requests).
    """

    t: int
    exec_batch_index: int
    next_batch_index: int
    evict_batch_index: int
    exec_batch: frozenset
    prefetch_set: frozenset
    evictions: tuple
    residual: frozenset
    updated_next_batch: frozenset
    prefetch_budget_tokens: int
    predicted_exec_seconds: float
    steady: bool
    residual_tokens: int
    prefetch_tokens: int


@dataclass
class SchedulerState:
    """Mutable scheduler state: the cyclic batch set plus residency tracking.

    `lengths` maps request id to its current prefix length and is the single
    source of truth for sizes; batches hold ids only. Every batch member is
    GPU-resident (eviction removes a request from its batch and returns it
    to the CPU pool, whose KV replica is always complete).
    """

    n: int
    batches: list
    lengths: dict
    gpu_resident: set
    cpu_pool: set
    t: int = 0
    steady: bool = False
    window_w: int = 8
    stability_threshold: float = 0.1
    theta: float = 0.9
    max_refine_steps: int = 32
    match_epsilon: float = None
    ema_alpha: float = None
    budget_history: deque = None
    _pool_sorted: list = field(default_factory=list, repr=False)
    _batch_of: dict = field(default_factory=dict, repr=False)
    _batch_tokens: list = field(default_factory=list, repr=False)
    _resident_blocks: int = field(default=0, repr=False)
    _block_size: int = field(default=1, repr=False)
    _ema: float = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if len(self.batches) != self.n:
            raise ValueError("need exactly n batches")
        self.batches = [set(b) for b in self.batches]
        if self.budget_history is None:
            self.budget_history = deque(maxlen=self.window_w)
        seen = set()
        for idx, batch in enumerate(self.batches):
            if batch & seen:
                raise ValueError("batches must be pairwise disjoint")
            seen |= batch
            for rid in batch:
                self._batch_of[rid] = idx
        if not seen <= self.gpu_resident:
            raise ValueError("every batched request must be GPU-resident")
        if self.cpu_pool & self.gpu_resident:
            raise ValueError("CPU pool and GPU residency must be disjoint")
        for rid in self.cpu_pool | self.gpu_resident:
            if rid not in self.lengths:
                raise ValueError(f"no length recorded for request {rid}")
        self._pool_sorted = sorted((self.lengths[r], r) for r in self.cpu_pool)
        self._batch_tokens = [sum(self.lengths[r] for r in b) for b in self.batches]

    # -- bookkeeping hooks -------------------------------------------------

    def configure_blocks(self, block_size: int):
        """Set the paged-KV granularity and rebuild the resident-block count."""
        self._block_size = block_size
        self._resident_blocks = sum(
            blocks_for_tokens(self.lengths[r], block_size) for r in self.gpu_resident)

    def batch_tokens(self, idx: int) -> int:
        return self._batch_tokens[idx]

    def resident_blocks(self) -> int:
        return self._resident_blocks

    def pool_view(self) -> dict:
        return {rid: self.lengths[rid] for rid in self.cpu_pool}

    def _pool_add(self, rid):
        self.cpu_pool.add(rid)
        bisect.insort(self._pool_sorted, (self.lengths[rid], rid))

    def _pool_remove(self, rid):
        self.cpu_pool.remove(rid)
        idx = bisect.bisect_left(self._pool_sorted, (self.lengths[rid], rid))
        del self._pool_sorted[idx]

    def bump_generated(self, rid) -> bool:
        """Record one generated token; returns True when a new block opened."""
        old = self.lengths[rid]
        self.lengths[rid] = old + 1
        crossed = old % self._block_size == 0
        if rid in self._batch_of:
            self._batch_tokens[self._batch_of[rid]] += 1
            if crossed:
                self._resident_blocks += 1
        return crossed

    def remove_request(self, rid):
        """Drop a completed request from every structure, freeing its blocks."""
        if rid in self.cpu_pool:
            self._pool_remove(rid)
        if rid in self.gpu_resident:
            self.gpu_resident.remove(rid)
            self._resident_blocks -= blocks_for_tokens(self.lengths[rid], self._block_size)
        idx = self._batch_of.pop(rid, None)
        if idx is not None:
            self.batches[idx].remove(rid)
            self._batch_tokens[idx] -= self.lengths[rid]
        self.lengths.pop(rid, None)

    def admit_resident(self, rid, batch_idx, length):
        """Place a new GPU-resident request directly into a batch (episode load)."""
        self.lengths[rid] = length
        self.gpu_resident.add(rid)
        self.batches[batch_idx].add(rid)
        self._batch_of[rid] = batch_idx
        self._batch_tokens[batch_idx] += length
        self._resident_blocks += blocks_for_tokens(length, self._block_size)

    def admit_pooled(self, rid, length):
        """Register a decode-ready request whose KV lives in CPU memory."""
        self.lengths[rid] = length
        self._pool_add(rid)


def _plan_step(state: SchedulerState, params: EstimatorParams, cfg: ClusterConfig,
               mode: str = "dynamic", quota_tokens: int = 0) -> StepPlan:
    """Build the StepPlan for iteration state.t without mutating anything.

    mode selects the prefetch policy: "dynamic" (bandwidth-derived budget,
    warm-up/steady selectors), "static" (fixed quota_tokens, short-first),
    or "none" (no prefetching at all).
    """
    if all(not b for b in state.batches) and not state.cpu_pool:
        raise EmptySystem("no batched requests and an empty CPU pool")
    if state.n != cfg.n:
        raise ValueError("scheduler state and cluster config disagree on n")
    if state._block_size != cfg.block_size:
        state.configure_blocks(cfg.block_size)  # derived bookkeeping only
    i, j, k = batch_indices(state.t, state.n)
    exec_ids = frozenset(state.batches[i])
    predicted = estimate_decode_time(params, len(exec_ids), state._batch_tokens[i])
    if mode == "dynamic":
        if state.ema_alpha is not None and state._ema is not None:
            budget_time = state.ema_alpha * predicted + (1 - state.ema_alpha) * state._ema
        else:
            budget_time = predicted
        budget = prefetch_budget(cfg.h2d_bandwidth, budget_time, cfg.kv_bytes_per_token)
    elif mode == "static":
        budget = int(quota_tokens)
    else:
        budget = 0
    steady = state.steady or detect_steady(
        list(state.budget_history) + [budget], state.window_w, state.stability_threshold)

    residual = frozenset(residual_set(state.batches[j], state.gpu_resident))
    residual_tokens = sum(state.lengths[r] for r in residual)

    bs = cfg.block_size
    free = capacity_blocks(cfg) - state._resident_blocks
    growth_now = sum(1 for r in exec_ids if state.lengths[r] % bs == 0)
    protected = exec_ids | residual
    evictable = [r for r in sorted(state.batches[k]) if r not in protected]
    evictable_blocks = sum(blocks_for_tokens(state.lengths[r], bs) for r in evictable)
    # A fixed free-block reserve covers the worst case of a whole batch
    # crossing block boundaries in lockstep. Keeping the reserve constant
    # (rather than per-plan-sized) makes steady-state eviction match the
    # prefetched volume, so batch token totals stay put. During dynamic
    # warm-up, prefetch is funded by free blocks only: the phase exists to
    # expand memory, and budget-sized evict-refill churn at saturation would
    # keep batch times oscillating and the budget from ever stabilizing.
    # The steady matcher (and the static baseline, whose unconditional churn
    # is its documented weakness) may additionally overwrite batch k.
    reserve = max(len(b) for b in state.batches) + state.n
    max_new_blocks = free - growth_now - reserve
    if mode == "static" or (mode == "dynamic" and steady):
        max_new_blocks += evictable_blocks
    if max_new_blocks < 0:
        max_new_blocks = 0

    prefetch = set()
    if budget > 0 and state.cpu_pool and mode != "none":
        if mode == "dynamic" and steady:
            t_res = estimate_decode_time(params, len(residual), residual_tokens)
            gap = predicted - t_res
            eps = params.alpha / 2 if state.match_epsilon is None else state.match_epsilon
            prefetch = _steady_core(state._pool_sorted, budget, gap, params,
                                    state.theta, state.max_refine_steps, eps,
                                    bs, max_new_blocks, 1)
        else:
            prefetch = _warmup_core(state._pool_sorted, budget, bs, max_new_blocks, 1)
    if not prefetch and state.cpu_pool and all(not b for b in state.batches) and mode != "none":
        # Bootstrap: a truncated budget must not strand an idle pipeline. The
        # budget is widened to the admitted length so feasibility still holds.
        length, rid = state._pool_sorted[0]
        if blocks_for_tokens(length, bs) + 1 <= max_new_blocks:
            prefetch = {rid}
            budget = max(budget, length)

    prefetch_tokens = sum(state.lengths[r] for r in prefetch)
    evictions = []
    if mode != "none":
        # A closed-set baseline reserved full growth at admission and must
        # never evict; prefetching modes reclaim batch-k blocks on demand,
        # restoring the free pool to the standing reserve.
        blocks_needed = sum(blocks_for_tokens(state.lengths[r], bs) for r in prefetch)
        deficit = blocks_needed + len(prefetch) + growth_now + reserve - free
        freed = 0
        if deficit > 0:
            for rid in evictable:
                if freed >= deficit:
                    break
                evictions.append(rid)
                freed += blocks_for_tokens(state.lengths[rid], bs)

    return StepPlan(
        t=state.t,
        exec_batch_index=i,
        next_batch_index=j,
        evict_batch_index=k,
        exec_batch=exec_ids,
        prefetch_set=frozenset(prefetch),
        evictions=tuple(evictions),
        residual=residual,
        updated_next_batch=frozenset(residual | prefetch),
        prefetch_budget_tokens=budget,
        predicted_exec_seconds=predicted,
        steady=steady,
        residual_tokens=residual_tokens,
        prefetch_tokens=prefetch_tokens,
    )


def schedule_step(state: SchedulerState, params: EstimatorParams,
                  cfg: ClusterConfig) -> StepPlan:
    """Plan iteration state.t of the prefetch-aware decode scheduler."""
    return _plan_step(state, params, cfg, mode="dynamic")


def commit_plan(state: SchedulerState, plan: StepPlan, cfg: ClusterConfig):
    """Apply a StepPlan: move residency, rebuild batch j, advance the clock."""
    if plan.t != state.t:
        raise ValueError(f"stale plan (plan t={plan.t}, state t={state.t})")
    bs = cfg.block_size
    k = plan.evict_batch_index
    for rid in plan.evictions:
        state.batches[k].remove(rid)
        state._batch_of.pop(rid)
        state._batch_tokens[k] -= state.lengths[rid]
        state.gpu_resident.remove(rid)
        state._resident_blocks -= blocks_for_tokens(state.lengths[rid], bs)
        state._pool_add(rid)
    j = plan.next_batch_index
    for rid in plan.prefetch_set:
        state._pool_remove(rid)
        state.gpu_resident.add(rid)
        state._resident_blocks += blocks_for_tokens(state.lengths[rid], bs)
        state._batch_of[rid] = j
    state.batches[j] = set(plan.updated_next_batch)
    state._batch_tokens[j] = sum(state.lengths[r] for r in state.batches[j])
    state.budget_history.append(plan.prefetch_budget_tokens)
    state.steady = state.steady or plan.steady
    if state.ema_alpha is not None:
        if state._ema is None:
            state._ema = plan.predicted_exec_seconds
        else:
            state._ema = (state.ema_alpha * plan.predicted_exec_seconds
                          + (1 - state.ema_alpha) * state._ema)
    state.t += 1
