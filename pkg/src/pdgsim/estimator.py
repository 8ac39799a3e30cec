"""Demand estimation: correlation masks, conditional filtering, random walks.

The estimator refines a prior (profiled) demand distribution with runtime
observations of completed units, then estimates the remaining service time
of an application by Monte Carlo random walk over the demand graph. An
exact enumeration oracle is provided for acyclic small-support graphs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .distributions import EmpiricalDistribution
from .errors import EstimationError, GraphError
from .pdgraph import FunctionalUnit, PDGraph, RateProfile, UnitRecord

log = logging.getLogger(__name__)

DEFAULT_CORRELATION_THRESHOLD = 0.5
MIN_CONDITIONAL_SAMPLES = 5
WALK_VISIT_CAP = 64


@dataclass(frozen=True)
class Observation:
    """Execution information of a just-completed unit of a live application."""

    unit_id: str
    input_len: float = 0.0
    output_len: float = 0.0
    parallelism: int = 1
    completion_time: float = 0.0


@dataclass
class RemainingDemand:
    """Monte Carlo draws of an application's total remaining service time."""

    samples: list[float]
    sample_count: int
    conditioned: bool = False
    capped_walks: int = 0

    def __post_init__(self):
        if self.sample_count != len(self.samples) or self.sample_count <= 0:
            raise EstimationError("sample_count must equal len(samples) and be > 0")
        if any(s < 0 for s in self.samples):
            raise EstimationError("remaining-demand samples must be >= 0")

    def mean(self) -> float:
        return sum(self.samples) / self.sample_count

    def max(self) -> float:
        return max(self.samples)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation coefficient using population moments.

    Clamped to [-1, 1] against round-off. Constant inputs have an
    undefined correlation and are rejected.
    """
    if len(x) != len(y):
        raise EstimationError("pearson: inputs must have equal length")
    if len(x) < 2:
        raise EstimationError("pearson: need at least 2 points")
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        raise EstimationError("pearson: undefined correlation (constant input)")
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def _joined_pairs(
    graph: PDGraph, unit_id: str
) -> list[tuple[UnitRecord, UnitRecord]]:
    """(upstream record, unit record) pairs joined on trial_id."""
    unit = graph.units[unit_id]
    by_trial = {rec.trial_id: rec for rec in unit.records}
    pairs = []
    for up_id in graph.upstreams_of(unit_id):
        for up_rec in graph.units[up_id].records:
            if up_rec.next_unit == unit_id and up_rec.trial_id in by_trial:
                pairs.append((up_rec, by_trial[up_rec.trial_id]))
    return pairs


def _flag(xs: list[float], ys: list[float], threshold: float, what: str) -> bool:
    if len(xs) < 2:
        log.warning("mask %s left false: fewer than 2 joined records", what)
        return False
    try:
        rho = pearson(xs, ys)
    except EstimationError:
        return False
    return abs(rho) > threshold


def build_masks(
    graph: PDGraph, threshold: float = DEFAULT_CORRELATION_THRESHOLD
) -> PDGraph:
    """Set every unit's correlation mask from its joined historical records.

    A flag is true iff |rho| of the corresponding variable pair strictly
    exceeds the threshold. Units with insufficient records keep the flag
    false (with a warning).
    """
    for uid in sorted(graph.units):
        unit = graph.units[uid]
        if not graph.upstreams_of(uid):
            unit.masks.output_own_input = _flag(
                [r.output_len for r in unit.records],
                [r.input_len for r in unit.records],
                threshold, f"{uid}:O~I",
            )
            continue
        pairs = _joined_pairs(graph, uid)
        up_in = [p[0].input_len for p in pairs]
        up_out = [p[0].output_len for p in pairs]
        up_par = [float(p[0].parallelism) for p in pairs]
        my_in = [p[1].input_len for p in pairs]
        my_out = [p[1].output_len for p in pairs]
        my_par = [float(p[1].parallelism) for p in pairs]
        own_in = [r.input_len for r in unit.records]
        own_out = [r.output_len for r in unit.records]
        unit.masks.input_upstream_input = _flag(my_in, up_in, threshold, f"{uid}:I~upI")
        unit.masks.input_upstream_output = _flag(my_in, up_out, threshold, f"{uid}:I~upO")
        unit.masks.output_upstream_output = _flag(my_out, up_out, threshold, f"{uid}:O~upO")
        unit.masks.output_own_input = _flag(own_out, own_in, threshold, f"{uid}:O~I")
        unit.masks.parallelism_upstream_parallelism = _flag(
            my_par, up_par, threshold, f"{uid}:P~upP"
        )
    return graph


@dataclass
class ConditionedDemand:
    """Per-variable demand distributions after conditional filtering."""

    input_dist: EmpiricalDistribution
    output_dist: EmpiricalDistribution
    parallelism_dist: EmpiricalDistribution
    conditioned: bool


def conditional_filter(
    unit: FunctionalUnit,
    observed: Observation,
    upstream: FunctionalUnit,
    min_conditional_samples: int = MIN_CONDITIONAL_SAMPLES,
) -> ConditionedDemand:
    """Filter the unit's demand history by the observed upstream execution.

    Joins the two units' records on trial_id and keeps tuples whose masked
    upstream variables fall in the same bucket as the observation. Falls
    back to the unconditioned distribution per variable when fewer than
    `min_conditional_samples` tuples survive.
    """
    by_trial = {rec.trial_id: rec for rec in unit.records}
    pairs = [
        (up_rec, by_trial[up_rec.trial_id])
        for up_rec in upstream.records
        if up_rec.next_unit == unit.unit_id and up_rec.trial_id in by_trial
    ]
    bc = unit.bucket_count

    def matches(up_rec: UnitRecord, conditions: list[tuple[str, float, EmpiricalDistribution]]):
        for attr, obs_value, dist in conditions:
            if not dist:
                return False
            if dist.bucket_index(getattr(up_rec, attr)) != dist.bucket_index(obs_value):
                return False
        return True

    def conditioned_values(
        target_attr: str,
        conditions: list[tuple[str, float, EmpiricalDistribution]],
        fallback: EmpiricalDistribution,
    ) -> tuple[EmpiricalDistribution, bool]:
        if not conditions:
            return fallback, False
        if not pairs:
            log.warning(
                "no joined records for %s; unconditioned fallback", unit.unit_id
            )
            return fallback, False
        kept = [
            getattr(rec, target_attr)
            for up_rec, rec in pairs
            if matches(up_rec, conditions)
        ]
        if len(kept) < min_conditional_samples:
            return fallback, False
        return (
            EmpiricalDistribution(kept, capacity=unit.capacity, bucket_count=bc),
            True,
        )

    m = unit.masks
    in_conditions = []
    if m.input_upstream_input:
        in_conditions.append(("input_len", observed.input_len, upstream.input_dist))
    if m.input_upstream_output:
        in_conditions.append(("output_len", observed.output_len, upstream.output_dist))
    out_conditions = []
    if m.output_upstream_output:
        out_conditions.append(("output_len", observed.output_len, upstream.output_dist))
    par_conditions = []
    if m.parallelism_upstream_parallelism:
        par_conditions.append(
            ("parallelism", float(observed.parallelism), upstream.parallelism_dist)
        )

    input_dist, in_c = conditioned_values("input_len", in_conditions, unit.input_dist)
    output_dist, out_c = conditioned_values("output_len", out_conditions, unit.output_dist)
    par_dist, par_c = conditioned_values(
        "parallelism", par_conditions, unit.parallelism_dist
    )
    return ConditionedDemand(
        input_dist=input_dist,
        output_dist=output_dist,
        parallelism_dist=par_dist,
        conditioned=in_c or out_c or par_c,
    )


class _UnitSampler:
    """Vectorized per-unit demand sampler used by the random walk."""

    def __init__(self, unit: FunctionalUnit, env: RateProfile,
                 override: Optional[ConditionedDemand] = None):
        self.is_llm = unit.is_llm
        self.env = env
        if self.is_llm:
            in_dist = override.input_dist if override else unit.input_dist
            out_dist = override.output_dist if override else unit.output_dist
            if not in_dist or not out_dist:
                raise EstimationError(
                    f"unit {unit.unit_id!r} has no token-length samples"
                )
            self.in_vals = np.asarray(in_dist.samples)
            self.out_vals = np.asarray(out_dist.samples)
            # Within-unit correlation: outputs drawn from records whose
            # input falls in the same bucket as the drawn input.
            self.own_bucket_outputs = None
            if unit.masks.output_own_input and override is None and len(unit.records) > 0:
                groups: dict[int, list[float]] = {}
                for rec in unit.records:
                    groups.setdefault(
                        unit.input_dist.bucket_index(rec.input_len), []
                    ).append(rec.output_len)
                self.own_bucket_outputs = {
                    b: np.asarray(v) for b, v in groups.items()
                }
                self.input_dist = unit.input_dist
        else:
            dur = unit.duration_dist
            if not dur:
                raise EstimationError(f"unit {unit.unit_id!r} has no duration samples")
            self.dur_vals = np.asarray(dur.samples)

    def draw_times(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if not self.is_llm:
            return rng.choice(self.dur_vals, size=m)
        i = rng.choice(self.in_vals, size=m)
        if self.own_bucket_outputs is not None:
            o = np.empty(m)
            buckets = np.array([self.input_dist.bucket_index(v) for v in i])
            for b in np.unique(buckets):
                idx = buckets == b
                pool = self.own_bucket_outputs.get(int(b))
                if pool is None or len(pool) == 0:
                    pool = self.out_vals
                o[idx] = rng.choice(pool, size=int(idx.sum()))
        else:
            o = rng.choice(self.out_vals, size=m)
        return i / self.env.prefill_rate + o / self.env.decode_rate


def _conditioning_for(
    graph: PDGraph, current_unit: str, observations: Sequence[Observation]
) -> Optional[ConditionedDemand]:
    """Conditioned demand for the current unit, if its immediate upstream
    was observed (observations propagate one hop only)."""
    unit = graph.units[current_unit]
    for obs in reversed(list(observations)):
        up = graph.units.get(obs.unit_id)
        if up is None or current_unit not in up.successors:
            continue
        if not unit.masks.any():
            return None
        return conditional_filter(unit, obs, up)
    return None


def monte_carlo_remaining_demand(
    graph: PDGraph,
    current_unit: str,
    observations: Sequence[Observation],
    env: RateProfile,
    n: int,
    seed: int,
    visit_cap: int = WALK_VISIT_CAP,
) -> RemainingDemand:
    """Estimate remaining service time by n random walks from current_unit.

    Each walk draws the current unit's demand (conditionally filtered where
    masks apply to an observed immediate upstream), converts token draws to
    seconds, and jumps to a successor by branch probability (terminating
    with the residual probability). Deterministic given identical inputs.
    """
    if n < 1:
        raise EstimationError(f"sample count must be >= 1, got {n}")
    if current_unit not in graph.units:
        raise EstimationError(f"unknown unit {current_unit!r}")
    rng = np.random.default_rng(seed)
    unit_ids = sorted(graph.units)
    index = {uid: i for i, uid in enumerate(unit_ids)}

    override = _conditioning_for(graph, current_unit, observations)
    samplers = {}
    succ_tables = {}
    for uid in unit_ids:
        unit = graph.units[uid]
        ov = override if uid == current_unit else None
        samplers[uid] = _UnitSampler(unit, env, override=ov)
        succs = sorted(unit.successors.items())
        cum = np.cumsum([p for _, p in succs])
        nxt = np.array([index[s] for s, _ in succs] + [-1], dtype=np.int64)
        succ_tables[uid] = (cum, nxt)

    cur = np.full(n, index[current_unit], dtype=np.int64)
    total = np.zeros(n)
    for _ in range(visit_cap):
        active = cur >= 0
        if not active.any():
            break
        for ui in np.unique(cur[active]):
            uid = unit_ids[ui]
            at = np.flatnonzero(cur == ui)
            total[at] += samplers[uid].draw_times(len(at), rng)
            cum, nxt = succ_tables[uid]
            u = rng.random(len(at))
            cur[at] = nxt[np.searchsorted(cum, u, side="right")] if len(cum) else -1
    capped = int((cur >= 0).sum())
    if capped:
        log.warning("%d of %d walks hit the %d-visit cap", capped, n, visit_cap)
    return RemainingDemand(
        samples=total.tolist(),
        sample_count=n,
        conditioned=bool(override is not None and override.conditioned),
        capped_walks=capped,
    )


def _distinct_weighted(values: Sequence[float], limit: int) -> list[tuple[float, float]]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    if len(counts) > limit:
        raise EstimationError(
            f"support too large for exact enumeration: {len(counts)} > {limit}"
        )
    n = len(values)
    return [(v, c / n) for v, c in sorted(counts.items())]


def exact_remaining_demand(
    graph: PDGraph,
    current_unit: str,
    env: RateProfile = RateProfile(),
    max_support: int = 16,
) -> float:
    """Exact expected remaining service time for acyclic small-support graphs.

    Test oracle: enumerates all demand value combinations weighted by
    probability and solves the branch recursion exactly. Rejects cyclic
    graphs and distributions with more than `max_support` distinct values.
    """
    if current_unit not in graph.units:
        raise EstimationError(f"unknown unit {current_unit!r}")

    expected: dict[str, float] = {}
    on_stack: set[str] = set()

    def unit_mean(uid: str) -> float:
        unit = graph.units[uid]
        if unit.is_llm:
            ins = _distinct_weighted(unit.input_dist.samples, max_support)
            outs = _distinct_weighted(unit.output_dist.samples, max_support)
            total = 0.0
            for iv, ip in ins:
                for ov, op in outs:
                    total += ip * op * (iv / env.prefill_rate + ov / env.decode_rate)
            return total
        durs = _distinct_weighted(unit.duration_dist.samples, max_support)
        return sum(v * p for v, p in durs)

    def walk(uid: str) -> float:
        if uid in expected:
            return expected[uid]
        if uid in on_stack:
            raise EstimationError(f"cycle detected at unit {uid!r}")
        on_stack.add(uid)
        e = unit_mean(uid)
        for succ, p in sorted(graph.units[uid].successors.items()):
            if p > 0.0:
                e += p * walk(succ)
        on_stack.discard(uid)
        expected[uid] = e
        return e

    return walk(current_unit)
