"""Result aggregation: completion-time statistics, deadline satisfaction,
cache hit ratios, prewarm wastage, and policy-runtime accounting.

Metrics serialization is byte-stable for a fixed input; wall-clock policy
runtimes are reported separately so the deterministic artifact never embeds
a timing measurement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .simcore import SimResult


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile; reconstructible from the CDF points."""
    if not sorted_values:
        raise ValueError("percentile of empty data")
    if not (0.0 < q <= 1.0):
        raise ValueError(f"q must be in (0, 1], got {q}")
    idx = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[idx]


@dataclass
class Metrics:
    """Aggregates over one (policy, seed) simulation run."""

    policy: str
    seed: int
    n_apps: int
    records: list = field(default_factory=list)
    mean_act: float = 0.0
    p50_act: float = 0.0
    p95_act: float = 0.0
    dsr_overall: Optional[float] = None
    dsr_by_class: dict = field(default_factory=dict)
    cache_hit_ratio: float = 0.0
    latency_saved: float = 0.0
    wasted_backend_time: float = 0.0
    mean_policy_runtime_ns: Optional[float] = None
    cdf: list = field(default_factory=list)  # (act, cumulative fraction)
    total_events: int = 0

    def to_dict(self, include_runtime: bool = False) -> dict:
        doc = {
            "policy": self.policy,
            "seed": self.seed,
            "n_apps": self.n_apps,
            "mean_act": self.mean_act,
            "p50_act": self.p50_act,
            "p95_act": self.p95_act,
            "dsr_overall": self.dsr_overall,
            "dsr_by_class": self.dsr_by_class,
            "cache_hit_ratio": self.cache_hit_ratio,
            "latency_saved": self.latency_saved,
            "wasted_backend_time": self.wasted_backend_time,
            "total_events": self.total_events,
            "cdf": [[a, f] for a, f in self.cdf],
            "records": self.records,
        }
        if include_runtime:
            doc["mean_policy_runtime_ns"] = self.mean_policy_runtime_ns
        return doc

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime=include_runtime),
                          sort_keys=True, separators=(",", ":"))


def build_metrics(result: SimResult) -> Metrics:
    records = result.app_records
    m = Metrics(
        policy=result.policy.value,
        seed=result.seed,
        n_apps=len(records),
        records=records,
        cache_hit_ratio=result.cache_stats["overall"]["hit_ratio"],
        latency_saved=result.prewarm_report["latency_saved"],
        wasted_backend_time=result.prewarm_report["wasted_backend_time"],
        total_events=result.total_events,
    )
    if result.policy_runtime_ns:
        m.mean_policy_runtime_ns = (
            sum(result.policy_runtime_ns) / len(result.policy_runtime_ns)
        )
    if not records:
        return m
    acts = sorted(r["act"] for r in records)
    n = len(acts)
    m.mean_act = sum(acts) / n
    m.p50_act = percentile(acts, 0.50)
    m.p95_act = percentile(acts, 0.95)
    m.cdf = [(a, (i + 1) / n) for i, a in enumerate(acts)]
    with_deadline = [r for r in records if r["met"] is not None]
    if with_deadline:
        m.dsr_overall = sum(1 for r in with_deadline if r["met"]) / len(with_deadline)
        by_class: dict[str, list] = {}
        for r in with_deadline:
            by_class.setdefault(r["deadline_class"] or "unspecified", []).append(r)
        m.dsr_by_class = {
            cls: sum(1 for r in rs if r["met"]) / len(rs)
            for cls, rs in sorted(by_class.items())
        }
    return m


def pooled_mean_act(metrics: list[Metrics]) -> float:
    total = sum(m.mean_act * m.n_apps for m in metrics)
    count = sum(m.n_apps for m in metrics)
    if count == 0:
        raise ValueError("no applications across runs")
    return total / count


def pooled_dsr(metrics: list[Metrics]) -> Optional[float]:
    hits = 0
    count = 0
    for m in metrics:
        for r in m.records:
            if r["met"] is not None:
                count += 1
                hits += bool(r["met"])
    return hits / count if count else None


def pooled_hit_ratio(metrics_hits_misses: list[tuple[int, int]]) -> float:
    hits = sum(h for h, _ in metrics_hits_misses)
    misses = sum(ms for _, ms in metrics_hits_misses)
    total = hits + misses
    return hits / total if total else 0.0
