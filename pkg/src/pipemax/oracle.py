"""Independent reference implementations used to cross-check the library.

Each oracle recomputes a result along a different arithmetic path than the
implementation it validates: a dynamic program for the prefill makespan,
exhaustive subset enumeration for steady-phase prefetch selection, and
exact rational arithmetic for the memory-budget formulas. None of them
share code with the modules they check.
"""

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

from .model_core import ClusterConfig, EstimatorParams, PrefillInstance
from . import model_core

ENUMERATION_CAP = 20


class PoolTooLarge(ValueError):
    """Pool exceeds the exhaustive-enumeration cap."""


def prefill_makespan_dp(inst: PrefillInstance) -> float:
    """Prefill makespan by dynamic program over (request, stage) completions.

    comp[s] after processing request i holds the time request i leaves
    stage s; each cell is the later of "previous request left this stage"
    and "this request left the previous stage", plus the stage time.
    """
    comp = [0.0] * inst.n
    for t in inst.stage_times:
        comp[0] = comp[0] + t  # stage 0 never idles while requests remain
        for s in range(1, inst.n):
            comp[s] = max(comp[s], comp[s - 1]) + t
    return comp[inst.n - 1]


@dataclass(frozen=True)
class SelectionOptimum:
    ids: frozenset
    error: float
    total_length: int
    saturated: bool


def _subset_key(subset_ids, total_len, modeled, budget, gap, theta):
    # Lexicographic: saturation >= theta*budget first, then gap error,
    # then fewest requests, then lowest id tuple.
    saturated = total_len >= theta * budget
    return (0 if saturated else 1, abs(modeled - gap), len(subset_ids), tuple(sorted(subset_ids)))


def exhaustive_prefetch_select(pool: dict, budget_tokens: int, gap_seconds: float,
                               params: EstimatorParams, theta: float = 0.9):
    """Enumerate every feasible subset of the pool and return the optimum.

    `pool` maps request id -> prefix length. Applies the same lexicographic
    objective the greedy selector targets, so results are directly
    comparable. Returns (optimal_id_set, optimal_gap_error).
    """
    if len(pool) > ENUMERATION_CAP:
        raise PoolTooLarge(f"pool of {len(pool)} exceeds cap {ENUMERATION_CAP}")
    ids = sorted(pool)
    best_ids = frozenset()
    best_key = _subset_key((), 0, 0.0, budget_tokens, gap_seconds, theta)
    for r in range(1, len(ids) + 1):
        for combo in combinations(ids, r):
            total = 0
            for rid in combo:
                total += pool[rid]
            if total > budget_tokens:
                continue
            modeled = params.alpha * len(combo) + params.beta * total
            key = _subset_key(combo, total, modeled, budget_tokens, gap_seconds, theta)
            if key < best_key:
                best_key = key
                best_ids = frozenset(combo)
    return best_ids, best_key[1]


@dataclass(frozen=True)
class BudgetCheckReport:
    expected_system_tokens: int
    expected_per_batch_tokens: int
    actual_system_tokens: int
    actual_per_batch_tokens: int

    @property
    def matches(self) -> bool:
        return (self.expected_system_tokens == self.actual_system_tokens
                and self.expected_per_batch_tokens == self.actual_per_batch_tokens)


def closed_form_decode_budget_check(cfg: ClusterConfig) -> BudgetCheckReport:
    """Re-derive the token capacities with exact rationals and diff them
    against the library's integer arithmetic.

    Starts from first principles: each GPU holds a W/n weight shard, each
    token's KV is sharded T/n per GPU, and n batches stay resident.
    """
    per_gpu_kv = Fraction(cfg.mem_per_gpu) - Fraction(cfg.model_bytes, cfg.n)
    per_gpu_per_token = Fraction(cfg.kv_bytes_per_token, cfg.n)
    system_tokens = per_gpu_kv / per_gpu_per_token
    per_batch = system_tokens / cfg.n
    return BudgetCheckReport(
        expected_system_tokens=int(system_tokens),  # Fraction floors toward zero; positive here
        expected_per_batch_tokens=int(per_batch),
        actual_system_tokens=model_core.system_token_capacity(cfg),
        actual_per_batch_tokens=model_core.per_batch_token_budget(cfg),
    )
