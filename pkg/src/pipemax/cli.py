"""Command-line front end: pipemax-sim {simulate|compare|validate|calibrate|gen-workload|report}.

Configuration is a single JSON document with a top-level schema_version;
unknown keys anywhere are rejected so a typo cannot silently change a run.
All randomness derives from one 64-bit seed. Exit codes: 0 success, 1
validation failure, 2 configuration error, 3 simulation error.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import replace

import numpy as np

from . import model_core, oracle, pipeline_sim, scheduler, workload
from .model_core import ClusterConfig, EstimatorParams, PrefillInstance
from .pipeline_sim import EventTrace, NoiseSpec
from .workload import LengthSpec, WorkloadSpec

CONFIG_SCHEMA_VERSION = 1

_CLUSTER_KEYS = {"n", "mem_per_gpu", "model_bytes", "kv_bytes_per_token",
                 "h2d_bandwidth", "d2h_bandwidth", "cpu_kv_capacity",
                 "activation_bytes_per_token", "per_transfer_overhead",
                 "layers_per_stage", "block_size", "per_token_prefill_seconds"}
_ESTIMATOR_KEYS = {"alpha", "beta", "delta", "calibrate_from"}
_DIST_KEYS = {"family", "target_avg", "target_median", "min", "max", "sd"}
_WORKLOAD_KEYS = {"trace", "count", "input_dist", "output_dist", "seed"}
_SCHED_KEYS = {"theta", "window_w", "stability_threshold", "max_refine_steps",
               "match_epsilon", "rho_hi", "ema_alpha"}
_NOISE_KEYS = {"family", "sigma", "clip_sigmas"}
_OUTPUT_KEYS = {"trace_path", "metrics_path"}
_TOP_KEYS = {"schema_version", "seed", "cluster", "estimator", "workload",
             "scheduler", "noise", "output"}


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {CONFIG_SCHEMA_VERSION}")
    for section, keys in (("cluster", _CLUSTER_KEYS), ("estimator", _ESTIMATOR_KEYS),
                          ("workload", _WORKLOAD_KEYS), ("scheduler", _SCHED_KEYS),
                          ("noise", _NOISE_KEYS), ("output", _OUTPUT_KEYS)):
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"{section} must be an object")
            _check_keys(raw[section], keys, section)
    for dist in ("input_dist", "output_dist"):
        if dist in raw.get("workload", {}):
            _check_keys(raw["workload"][dist], _DIST_KEYS, f"workload.{dist}")
    if "cluster" not in raw:
        raise ConfigError("config needs a cluster section")
    return raw


def _build_cluster(raw: dict) -> ClusterConfig:
    try:
        return ClusterConfig(**raw["cluster"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad cluster config: {exc}") from exc


def _build_estimator(raw: dict) -> EstimatorParams:
    section = raw.get("estimator")
    if section is None:
        raise ConfigError("config needs an estimator section")
    if "calibrate_from" in section:
        samples = _read_samples_csv(section["calibrate_from"])
        return model_core.calibrate_estimator(samples)
    try:
        return EstimatorParams(alpha=section["alpha"], beta=section["beta"],
                               delta=section["delta"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad estimator config: {exc}") from exc


def _build_workload(raw: dict, seed: int):
    section = raw.get("workload")
    if section is None:
        raise ConfigError("config needs a workload section")
    if "trace" in section:
        try:
            return workload.load_trace(section["trace"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad workload trace: {exc}") from exc
    try:
        spec = WorkloadSpec(
            count=section["count"],
            input_dist=LengthSpec(**section["input_dist"]),
            output_dist=LengthSpec(**section["output_dist"]),
            seed=section.get("seed", seed),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad workload spec: {exc}") from exc
    return workload.generate_synthetic(spec)


def _build_noise(raw: dict) -> NoiseSpec:
    section = raw.get("noise")
    if section is None:
        return NoiseSpec()
    try:
        return NoiseSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad noise spec: {exc}") from exc


def _read_samples_csv(path: str):
    samples = []
    try:
        with open(path) as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    samples.append((float(row[0]), float(row[1]), float(row[2])))
                except (ValueError, IndexError):
                    if not samples:  # tolerate one header row
                        continue
                    raise ConfigError(f"bad sample row in {path}: {row}")
    except FileNotFoundError as exc:
        raise ConfigError(f"samples file not found: {path}") from exc
    if not samples:
        raise ConfigError(f"no samples in {path}")
    return samples


def _timestamp(args):
    return None if args.no_timestamp else time.strftime("%Y-%m-%dT%H:%M:%S")


def _episode_kwargs(raw: dict):
    knobs = dict(raw.get("scheduler", {}))
    rho_hi = knobs.pop("rho_hi", 0.9)
    return knobs, rho_hi


def cmd_simulate(args) -> int:
    raw = load_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    cfg = _build_cluster(raw)
    params = _build_estimator(raw)
    reqs = _build_workload(raw, seed)
    noise = _build_noise(raw)
    knobs, rho_hi = _episode_kwargs(raw)
    out = raw.get("output", {})
    metrics_path = args.out or out.get("metrics_path", "metrics.json")
    trace_path = out.get("trace_path", "trace.jsonl")
    trace = EventTrace()
    try:
        metrics = pipeline_sim.run_episode(
            reqs, cfg, params, policy="dynamic", seed=seed, noise_spec=noise,
            scheduler_knobs=knobs, rho_hi=rho_hi, trace=trace)
    except (pipeline_sim.CapacityError, model_core.NoKvHeadroom) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 3
    trace.to_jsonl(trace_path, timestamp=_timestamp(args))
    with open(metrics_path, "w") as fh:
        json.dump(metrics.to_record("dynamic", seed, timestamp=_timestamp(args)),
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"tokens_per_second={metrics.tokens_per_second:.3f} "
          f"wall_seconds={metrics.wall_seconds:.3f} "
          f"stall_seconds={metrics.stall_seconds:.3f}")
    return 0


def _parse_policies(text: str):
    policies = [p.strip() for p in text.split(",") if p.strip()]
    for p in policies:
        pipeline_sim._parse_policy(p)  # raises ValueError on unknown names
    return policies


def cmd_compare(args) -> int:
    raw = load_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    try:
        policies = _parse_policies(args.policies)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    cfg = _build_cluster(raw)
    params = _build_estimator(raw)
    noise = _build_noise(raw)
    knobs, rho_hi = _episode_kwargs(raw)
    out_path = args.out or "compare.csv"
    rows = []
    for policy in policies:
        reqs = _build_workload(raw, seed)  # identical seeded workload per policy
        metrics = pipeline_sim.run_episode(
            reqs, cfg, params, policy=policy, seed=seed, noise_spec=noise,
            scheduler_knobs=knobs, rho_hi=rho_hi)
        record = metrics.to_record(policy, seed)
        rows.append((policy, record["tokens_per_second"], record["stall_seconds"],
                     record["mean_prefetched_token_fraction"]))
    with open(out_path, "w", newline="") as fh:
        stamp = _timestamp(args)
        if stamp is not None:
            fh.write(f"# generated_at={stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["policy", "tokens_per_second", "stall_seconds",
                         "prefetched_token_fraction"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])
    for row in rows:
        print(f"{row[0]}: {row[1]:.3f} tokens/s")
    return 0


def _suite_prefill_equivalence(rng, n_cases=300):
    failures = 0
    for _ in range(n_cases):
        m = int(rng.integers(1, 33))
        n = int(rng.integers(1, 9))
        lengths = rng.integers(1, 5001, size=m)
        scale = 1e-3
        inst = PrefillInstance(tuple(float(v) * scale for v in lengths), n)
        closed = model_core.prefill_makespan_closed_form(inst)
        dp = oracle.prefill_makespan_dp(inst)
        cfg = ClusterConfig(n=n, mem_per_gpu=10**9, model_bytes=n * 10**8,
                            kv_bytes_per_token=1, h2d_bandwidth=1e12,
                            d2h_bandwidth=1e12, cpu_kv_capacity=10**12,
                            per_token_prefill_seconds=scale)
        reqs = [model_core.Request(i, int(v), 1) for i, v in enumerate(lengths)]
        _, sim = pipeline_sim.simulate_prefill(reqs, cfg, offload=False)
        ref = max(abs(closed), 1e-12)
        if abs(closed - dp) / ref > 1e-9 or abs(closed - sim) / ref > 1e-9:
            failures += 1
    return n_cases - failures, n_cases


def _suite_budget_formulas(rng, n_cases=100):
    failures = 0
    for _ in range(n_cases):
        n = int(rng.integers(1, 9))
        model = int(rng.integers(10**8, 10**11))
        mem = model // n + int(rng.integers(10**8, 10**10))
        kv = int(rng.integers(10**3, 10**6))
        cfg = ClusterConfig(n=n, mem_per_gpu=mem, model_bytes=model,
                            kv_bytes_per_token=kv, h2d_bandwidth=1e9,
                            d2h_bandwidth=1e9, cpu_kv_capacity=10**12)
        if not oracle.closed_form_decode_budget_check(cfg).matches:
            failures += 1
    return n_cases - failures, n_cases


def _suite_scheduler_vs_exhaustive(rng, n_cases=200):
    params = EstimatorParams(alpha=1e-3, beta=1e-5, delta=0.0)
    failures = 0
    for _ in range(n_cases):
        size = int(rng.integers(1, 13))
        pool = {int(i): int(rng.integers(10, 500)) for i in range(size)}
        budget = int(rng.integers(50, 1200))
        gap = float(rng.uniform(0, 0.02))
        got = scheduler.select_prefetch_steady(pool, budget, gap, params)
        if sum(pool[r] for r in got) > budget:
            failures += 1
            continue
        _, best_err = oracle.exhaustive_prefetch_select(pool, budget, gap, params)
        modeled = params.alpha * len(got) + params.beta * sum(pool[r] for r in got)
        if abs(modeled - gap) > 2 * best_err + params.alpha + 1e-12:
            failures += 1
    passed = n_cases - failures
    # The heuristic only has to land inside the bound for 90% of instances.
    return passed, n_cases


def cmd_validate(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 20240901)
    suites = [
        ("prefill_equivalence", _suite_prefill_equivalence, 1.0),
        ("budget_formulas", _suite_budget_formulas, 1.0),
        ("scheduler_vs_exhaustive", _suite_scheduler_vs_exhaustive, 0.9),
    ]
    failed = []
    for name, fn, required in suites:
        passed, total = fn(rng)
        ok = passed >= required * total
        print(f"{name}: {passed}/{total} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"failed suites: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_calibrate(args) -> int:
    samples = _read_samples_csv(args.samples)
    try:
        params = model_core.calibrate_estimator(samples)
    except model_core.DegenerateSamples as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_path = args.out or "estimator.json"
    record = {"alpha": params.alpha, "beta": params.beta, "delta": params.delta}
    stamp = _timestamp(args)
    if stamp is not None:
        record["generated_at"] = stamp
    with open(out_path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"alpha={params.alpha:.6e} beta={params.beta:.6e} delta={params.delta:.6e}")
    return 0


def cmd_gen_workload(args) -> int:
    try:
        with open(args.spec) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad workload spec: {exc}") from exc
    _check_keys(raw, _WORKLOAD_KEYS, "workload spec")
    for dist in ("input_dist", "output_dist"):
        if dist in raw:
            _check_keys(raw[dist], _DIST_KEYS, f"workload spec {dist}")
    try:
        spec = WorkloadSpec(
            count=raw["count"],
            input_dist=LengthSpec(**raw["input_dist"]),
            output_dist=LengthSpec(**raw["output_dist"]),
            seed=raw.get("seed", args.seed if args.seed is not None else 0),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad workload spec: {exc}") from exc
    reqs = workload.generate_synthetic(spec)
    out_path = args.out or "workload.jsonl"
    with open(out_path, "w") as fh:
        for r in reqs:
            fh.write(json.dumps({"id": r.id, "input_len": r.input_len,
                                 "output_len": r.output_len}) + "\n")
    stats = workload.summarize(reqs)
    print(f"wrote {stats.count} requests: in avg/med {stats.input_avg:.2f}/"
          f"{stats.input_median:.0f}, out avg/med {stats.output_avg:.2f}/"
          f"{stats.output_median:.0f}")
    return 0


def cmd_report(args) -> int:
    rows = []
    try:
        with open(args.trace) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event.get("kind") != "stage_compute_start":
                    continue
                payload = event.get("payload", {})
                if payload.get("phase") != "decode" or payload.get("stage") != 0:
                    continue
                capacity = payload.get("capacity_tokens", 0)
                res = payload.get("next_residual_tokens", 0)
                pre = payload.get("next_prefetched_tokens", 0)
                rows.append((payload.get("iter"), payload.get("exec_seconds"),
                             res / capacity if capacity else 0.0,
                             pre / capacity if capacity else 0.0))
    except FileNotFoundError as exc:
        raise ConfigError(f"trace not found: {args.trace}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"trace is not valid JSONL: {exc}") from exc
    out_path = args.out or "report.csv"
    with open(out_path, "w", newline="") as fh:
        stamp = _timestamp(args)
        if stamp is not None:
            fh.write(f"# generated_at={stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["iter", "exec_seconds", "resident_fraction",
                         "prefetched_fraction"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.9f}", f"{row[2]:.6f}", f"{row[3]:.6f}"])
    print(f"wrote {len(rows)} iterations to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipemax-sim",
        description="Pipeline-parallel decode simulator with KV-cache offloading")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--no-timestamp", action="store_true",
                        help="omit timestamps for byte-identical outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one dynamic episode")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="metrics output path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("compare", help="run several policies on one workload")
    p.add_argument("--config", required=True)
    p.add_argument("--policies",
                   default="dynamic,static:0.05,static:0.10,static:0.15,"
                           "static:0.20,static:0.25,no_prefetch")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("validate", help="run the oracle cross-check suites")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("calibrate", help="fit estimator params from a CSV of (b, L, seconds)")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("gen-workload", help="materialize a synthetic workload trace")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gen_workload)

    p = sub.add_parser("report", help="per-iteration decode series from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, workload.SpecError, workload.ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (pipeline_sim.CapacityError, pipeline_sim.OutOfMemory,
            pipeline_sim.ConfigError, model_core.NoKvHeadroom) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
