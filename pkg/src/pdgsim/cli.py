"""Experiment driver: policy sweeps across seeds from a JSON config.

Emits one metrics JSON and one CDF CSV per (policy, seed) cell, a pooled
summary across policies, and a separate timing sidecar per cell (wall-clock
policy runtimes are kept out of the deterministic metrics files). The
`compare` command reports relative improvements between policies over
summaries produced on the same workload.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from typing import Optional

from .errors import ConfigError
from .metrics import Metrics, build_metrics, pooled_dsr, pooled_mean_act
from .pdgraph import RateProfile
from .prewarm import CachePolicy
from .sched import Policy
from .simcore import SimConfig, Simulator, realize_workload, standalone_time
from .workload import (
    WorkloadSpec,
    assign_deadlines,
    build_cache_suite,
    build_deadline_suite,
    build_default_suite,
    build_knob_suite,
    build_point_mass_suite,
    build_refinement_suite,
    generate,
    ingest_trace,
)

ENV_PREFIX = "PDGSIM_"

DEFAULT_MIX = {"small": 0.72, "medium": 0.26, "large": 0.02}

SUITES = ("default", "deadline", "point-mass", "cache", "knob", "refinement")


def _atomic_write(path: str, data: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config(path: str) -> dict:
    """Read a config file and apply PDGSIM_* environment overrides.

    An env var PDGSIM_<KEY> overrides top-level key <key> (lowercased);
    values are parsed as JSON when possible, else taken as strings.
    """
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read config: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be an object")
    for name, raw in sorted(os.environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def _require(cfg: dict, key: str, kind, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{where}: missing key {key!r}")
    val = cfg[key]
    if not isinstance(val, kind):
        raise ConfigError(f"{where}.{key}: expected {kind}, got {type(val).__name__}")
    return val


def parse_policies(cfg: dict) -> list[Policy]:
    names = _require(cfg, "policies", list)
    policies = []
    for i, name in enumerate(names):
        try:
            policies.append(Policy(name))
        except ValueError:
            known = ", ".join(p.value for p in Policy)
            raise ConfigError(
                f"config.policies[{i}]: unknown policy {name!r} (known: {known})"
            )
    if not policies:
        raise ConfigError("config.policies: must not be empty")
    return policies


def parse_seeds(cfg: dict) -> list[int]:
    seeds = _require(cfg, "seeds", list)
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config.seeds: must be a non-empty list of integers")
    return seeds


def build_sim_config(cfg: dict, content_sizes: dict) -> SimConfig:
    env_cfg = cfg.get("env", {})
    sim_cfg = cfg.get("sim", {})
    env = RateProfile(
        prefill_rate=float(env_cfg.get("prefill_rate", 10000.0)),
        decode_rate=float(env_cfg.get("decode_rate", 50.0)),
    )
    policy_name = sim_cfg.get("cache_policy", "lru")
    try:
        cache_policy = CachePolicy(policy_name)
    except ValueError:
        known = ", ".join(p.value for p in CachePolicy)
        raise ConfigError(
            f"config.sim.cache_policy: unknown policy {policy_name!r} (known: {known})"
        )
    try:
        return SimConfig(
            env=env,
            llm_slots=int(sim_cfg.get("llm_slots", 8)),
            docker_pool=int(sim_cfg.get("docker_pool", 8)),
            dnn_pool=int(sim_cfg.get("dnn_pool", 8)),
            refresh_period=float(sim_cfg.get("refresh_period", 5.0)),
            preemption_enabled=bool(sim_cfg.get("preemption_enabled", True)),
            preemption_hysteresis=float(sim_cfg.get("preemption_hysteresis", 1.5)),
            mc_samples=int(sim_cfg.get("mc_samples", 512)),
            bucket_count=int(sim_cfg.get("bucket_count", 10)),
            knob_k=float(sim_cfg.get("knob_k", 0.5)),
            cache_policy=cache_policy,
            cache_capacity=float(sim_cfg.get("cache_capacity", 1e9)),
            tool_cache_capacity=float(sim_cfg.get("tool_cache_capacity", 1e18)),
            content_sizes=dict(content_sizes),
            default_content_size=float(sim_cfg.get("default_content_size", 1.0)),
            refinement_enabled=bool(sim_cfg.get("refinement_enabled", True)),
            overrun_penalty_factor=float(sim_cfg.get("overrun_penalty_factor", 2.0)),
            demand_mismatch=float(sim_cfg.get("demand_mismatch", 1.0)),
            visit_cap=int(sim_cfg.get("visit_cap", 64)),
            keep_event_log=bool(sim_cfg.get("keep_event_log", True)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config.sim: invalid value: {e}")


def build_suite(wcfg: dict) -> tuple[dict, dict, dict]:
    """Graphs, size-class map, and content sizes for the configured suite."""
    suite = wcfg.get("suite", "default")
    suite_seed = int(wcfg.get("suite_seed", 0))
    trials = int(wcfg.get("trials", 200))
    bucket_count = int(wcfg.get("bucket_count", 10))
    if suite == "default":
        graphs, class_apps = build_default_suite(suite_seed, trials=trials,
                                                 bucket_count=bucket_count)
        return graphs, class_apps, {}
    if suite == "deadline":
        graphs, class_apps = build_deadline_suite(suite_seed, trials=trials)
        return graphs, class_apps, {}
    if suite == "point-mass":
        graphs, class_apps = build_point_mass_suite(suite_seed)
        return graphs, class_apps, {}
    if suite == "cache":
        graphs, class_apps, sizes = build_cache_suite(suite_seed)
        return graphs, class_apps, sizes
    if suite == "knob":
        graphs, class_apps = build_knob_suite(suite_seed)
        return graphs, class_apps, {}
    if suite == "refinement":
        graphs, class_apps = build_refinement_suite(suite_seed)
        return graphs, class_apps, {}
    raise ConfigError(
        f"config.workload.suite: unknown suite {suite!r} (known: {', '.join(SUITES)})"
    )


def build_workload(wcfg: dict, class_apps: dict, seed: int) -> WorkloadSpec:
    mix = wcfg.get("mix")
    if mix is None:
        mix = DEFAULT_MIX if wcfg.get("suite", "default") == "default" else {
            cls: 1.0 / len(class_apps) for cls in sorted(class_apps)
        }
    mix = {cls: w for cls, w in mix.items() if cls in class_apps}
    total = sum(mix.values())
    if total <= 0:
        raise ConfigError("config.workload.mix: no usable size classes")
    mix = {cls: w / total for cls, w in mix.items()}
    trace = wcfg.get("trace")
    if trace:
        return ingest_trace(trace, mix=mix, class_apps=class_apps, seed=seed)
    return generate(
        mix,
        n_apps=int(wcfg.get("n_apps", 50)),
        window=float(wcfg.get("window", 300.0)),
        burst_profile=wcfg.get("burst_profile", "uniform"),
        seed=seed,
        class_apps=class_apps,
    )


def workload_identity(cfg: dict) -> str:
    """Stable hash of everything that defines the workload across policies."""
    wcfg = cfg.get("workload", {})
    payload = json.dumps(
        {"workload": wcfg, "seeds": sorted(cfg.get("seeds", [])),
         "env": cfg.get("env", {}), "sim": cfg.get("sim", {})},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_cell(graphs: dict, workload: WorkloadSpec, policy: Policy,
             sim_config: SimConfig, seed: int) -> tuple:
    """One (policy, seed) simulation; returns (SimResult, Metrics)."""
    result = Simulator(graphs, workload, policy, sim_config, seed).run()
    return result, build_metrics(result)


def run_experiment(config_path: str, out_dir: Optional[str] = None,
                   policies_override: Optional[list[str]] = None,
                   seeds_override: Optional[list[int]] = None) -> dict:
    """Execute the config's policy x seed sweep; write artifacts; return
    the summary document."""
    cfg = load_config(config_path)
    if policies_override:
        cfg["policies"] = policies_override
    if seeds_override:
        cfg["seeds"] = seeds_override
    if out_dir:
        cfg["out"] = out_dir
    policies = parse_policies(cfg)
    seeds = parse_seeds(cfg)
    out = cfg.get("out", "results")
    wcfg = cfg.get("workload", {})
    if not isinstance(wcfg, dict):
        raise ConfigError("config.workload: must be an object")
    graphs, class_apps, content_sizes = build_suite(wcfg)
    sim_config = build_sim_config(cfg, content_sizes)
    factors = [tuple(f) for f in wcfg.get("deadline_factors", [])]
    if any(p.needs_deadline for p in policies) and not factors:
        raise ConfigError(
            "config.workload.deadline_factors: required by a deadline policy"
        )
    os.makedirs(out, exist_ok=True)

    workloads: dict[int, WorkloadSpec] = {}
    for seed in seeds:
        wl = build_workload(wcfg, class_apps, seed)
        if factors:
            demands = [
                standalone_time(stages)
                for stages in realize_workload(graphs, wl, sim_config, seed)
            ]
            wl = assign_deadlines(wl, demands, factors)
        workloads[seed] = wl

    summary: dict = {
        "workload_id": workload_identity(cfg),
        "seeds": seeds,
        "policies": {},
    }
    for policy in policies:
        per_seed = {}
        all_metrics = []
        hits_misses = []
        for seed in seeds:
            result, m = run_cell(graphs, workloads[seed], policy, sim_config, seed)
            stem = os.path.join(out, f"{policy.value}-seed{seed}")
            _atomic_write(stem + ".metrics.json", m.to_json() + "\n")
            cdf_lines = ["act,cumulative_fraction"]
            cdf_lines += [f"{a!r},{f!r}" for a, f in m.cdf]
            _atomic_write(stem + ".cdf.csv", "\n".join(cdf_lines) + "\n")
            _atomic_write(
                stem + ".timing.json",
                json.dumps({
                    "mean_policy_runtime_ns": m.mean_policy_runtime_ns,
                    "refreshes": len(result.policy_runtime_ns),
                }) + "\n",
            )
            if sim_config.keep_event_log and cfg.get("write_event_log"):
                _atomic_write(stem + ".events.log",
                              "\n".join(result.event_log) + "\n")
            hm = result.cache_stats["overall"]
            hits_misses.append((hm["hits"], hm["misses"]))
            all_metrics.append(m)
            per_seed[str(seed)] = {
                "mean_act": m.mean_act,
                "p50_act": m.p50_act,
                "p95_act": m.p95_act,
                "dsr_overall": m.dsr_overall,
                "cache_hit_ratio": m.cache_hit_ratio,
                "n_apps": m.n_apps,
                "latency_saved": m.latency_saved,
                "wasted_backend_time": m.wasted_backend_time,
            }
        hits = sum(h for h, _ in hits_misses)
        misses = sum(ms for _, ms in hits_misses)
        summary["policies"][policy.value] = {
            "per_seed": per_seed,
            "pooled": {
                "mean_act": pooled_mean_act(all_metrics),
                "dsr_overall": pooled_dsr(all_metrics),
                "cache_hit_ratio": hits / (hits + misses) if hits + misses else 0.0,
                "n_apps": sum(m.n_apps for m in all_metrics),
            },
        }
    _atomic_write(os.path.join(out, "summary.json"),
                  json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def _relative_reduction(base: float, other: float) -> Optional[float]:
    if base == 0:
        return None
    return (base - other) / base


def compare(summary_paths: list[str], baseline: Optional[str] = None) -> dict:
    """Relative improvements between policies over matching summaries.

    All summaries must share the workload identity and the seed set; the
    baseline defaults to the first policy of the first summary.
    """
    if len(summary_paths) < 2 and baseline is None:
        pass  # a single multi-policy summary is fine
    docs = []
    for path in summary_paths:
        with open(path) as fh:
            docs.append(json.load(fh))
    ident = docs[0].get("workload_id")
    seeds = sorted(docs[0].get("seeds", []))
    merged: dict[str, dict] = {}
    for path, doc in zip(summary_paths, docs):
        if doc.get("workload_id") != ident:
            raise ConfigError(
                f"{path}: workload identity {doc.get('workload_id')!r} does not "
                f"match {ident!r}"
            )
        if sorted(doc.get("seeds", [])) != seeds:
            raise ConfigError(f"{path}: seed set differs from {seeds}")
        merged.update(doc.get("policies", {}))
    if len(merged) < 2:
        raise ConfigError("compare requires at least two distinct policies")
    if baseline is None:
        baseline = next(iter(docs[0]["policies"]))
    if baseline not in merged:
        raise ConfigError(f"baseline policy {baseline!r} not found in summaries")
    base = merged[baseline]
    report = {"workload_id": ident, "seeds": seeds, "baseline": baseline,
              "policies": {}}
    for name, entry in merged.items():
        if name == baseline:
            continue
        per_seed = {}
        for s in map(str, seeds):
            b = base["per_seed"][s]
            o = entry["per_seed"][s]
            per_seed[s] = {
                "mean_act_reduction": _relative_reduction(b["mean_act"], o["mean_act"]),
                "dsr_delta": (
                    o["dsr_overall"] - b["dsr_overall"]
                    if o["dsr_overall"] is not None and b["dsr_overall"] is not None
                    else None
                ),
            }
        bp, op = base["pooled"], entry["pooled"]
        report["policies"][name] = {
            "per_seed": per_seed,
            "pooled": {
                "mean_act_reduction": _relative_reduction(bp["mean_act"], op["mean_act"]),
                "dsr_delta": (
                    op["dsr_overall"] - bp["dsr_overall"]
                    if op["dsr_overall"] is not None and bp["dsr_overall"] is not None
                    else None
                ),
                "hit_ratio_ratio": (
                    op["cache_hit_ratio"] / bp["cache_hit_ratio"]
                    if bp["cache_hit_ratio"] else None
                ),
            },
        }
    return report


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdgsim",
        description="Run scheduling/prewarming experiments over simulated "
                    "LLM application workloads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a policy x seed sweep")
    p_run.add_argument("--config", required=True, help="JSON config path")
    p_run.add_argument("--policy", action="append", default=None,
                       help="override config policies (repeatable)")
    p_run.add_argument("--seed", action="append", type=int, default=None,
                       help="override config seeds (repeatable)")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_cmp = sub.add_parser("compare", help="compare policies across summaries")
    p_cmp.add_argument("summaries", nargs="+", help="summary.json paths")
    p_cmp.add_argument("--baseline", default=None, help="baseline policy name")
    p_cmp.add_argument("--out", default=None, help="directory for comparison.json")
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            summary = run_experiment(args.config, out_dir=args.out,
                                     policies_override=args.policy,
                                     seeds_override=args.seed)
            for name, entry in summary["policies"].items():
                pooled = entry["pooled"]
                dsr = pooled["dsr_overall"]
                print(f"{name}: mean ACT {pooled['mean_act']:.3f} s"
                      + (f", DSR {dsr:.3f}" if dsr is not None else "")
                      + f", hit ratio {pooled['cache_hit_ratio']:.3f}")
            return 0
        report = compare(args.summaries, baseline=args.baseline)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _atomic_write(os.path.join(args.out, "comparison.json"),
                          json.dumps(report, sort_keys=True, indent=2) + "\n")
        for name, entry in report["policies"].items():
            red = entry["pooled"]["mean_act_reduction"]
            print(f"{name} vs {report['baseline']}: "
                  + (f"mean ACT reduction {red:.1%}" if red is not None else "n/a"))
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
