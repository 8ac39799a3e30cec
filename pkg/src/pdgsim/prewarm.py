"""Speculative backend prewarming and warm-content cache management.

A prewarm plan exists only when the branch-selection probability of the
target unit clears the effectiveness knob K; the trigger is placed at the
latest bucket-grid time keeping the expected effectiveness at or above K
(latest-safe semantics minimize idle waste). Warm-content caches (KV
prefixes, LoRA adapters, docker images, DNN tools) support reactive LRU,
waiting-queue prefetch (EPWQ), and plan-driven prefetch policies with
hit-ratio accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .distributions import EmpiricalDistribution
from .pdgraph import BackendSpec

DEFAULT_KNOB = 0.5


@dataclass
class PrewarmPlan:
    """Decision record for one speculative warm-up."""

    target_backend: BackendSpec
    p_s: float  # branch-selection probability of the target unit
    t_p: float  # warm-up duration
    trigger_time: float
    p_e: float  # expected effectiveness at the trigger
    knob: float

    def __post_init__(self):
        if not (0.0 <= self.knob <= 1.0):
            raise ValueError(f"knob must be in [0, 1], got {self.knob}")
        if self.p_s < self.knob:
            raise ValueError("plan must not exist when p_s < K")


def plan_prewarm(
    completion_dist: EmpiricalDistribution,
    p_s: float,
    t_p: float,
    knob: float,
    now: float,
    target_backend: Optional[BackendSpec] = None,
) -> Optional[PrewarmPlan]:
    """Whether and when to prewarm a cold backend for a downstream unit.

    `completion_dist` holds absolute completion times of the running unit,
    conditioned on it still running at `now`. No plan when p_s < K.
    Otherwise the trigger is the latest time on the bucket-boundary grid
    (shifted by the warm-up duration) with p_s * P(completion >= trigger +
    t_p) >= K, clamped to `now`; if even an immediate trigger misses the
    bar, trigger immediately with the achieved effectiveness recorded.
    """
    if not (0.0 <= knob <= 1.0):
        raise ValueError(f"knob must be in [0, 1], got {knob}")
    if t_p < 0:
        raise ValueError(f"warm-up duration must be >= 0, got {t_p}")
    if p_s < knob:
        return None
    samples = [s for s in completion_dist.samples if s > now]
    if not samples:
        samples = completion_dist.samples
    cond = EmpiricalDistribution(
        samples, capacity=max(len(samples), 1),
        bucket_count=completion_dist.bucket_count,
    )
    candidates = sorted(
        {max(b - t_p, now) for b in cond.bucket_boundaries()} | {now},
        reverse=True,
    )
    for t_s in candidates:
        p_e = p_s * cond.survival(t_s + t_p)
        if p_e >= knob:
            return PrewarmPlan(
                target_backend=target_backend,
                p_s=p_s,
                t_p=t_p,
                trigger_time=t_s,
                p_e=p_e,
                knob=knob,
            )
    # Unachievable even immediately: the branch already cleared K, and a
    # late warm-up still shortens the residual cold time.
    return PrewarmPlan(
        target_backend=target_backend,
        p_s=p_s,
        t_p=t_p,
        trigger_time=now,
        p_e=p_s * cond.survival(now + t_p),
        knob=knob,
    )


class CachePolicy(Enum):
    LRU = "lru"
    EPWQ = "epwq"
    HERMES_PLAN = "plan"  # plan-driven prefetch at the prewarm trigger


@dataclass
class CacheEntry:
    size: float
    last_access: float
    warm_at: float  # entry is warm once now >= warm_at

    def is_warm(self, now: float) -> bool:
        return now >= self.warm_at


@dataclass
class AccessResult:
    hit: bool
    ready_at: float  # when the content is usable (== access time on a hit)


class CacheState:
    """Warm-content cache with LRU eviction and hit/miss accounting."""

    def __init__(
        self,
        capacity: float,
        policy: CachePolicy = CachePolicy.LRU,
        default_load_time: float = 0.0,
    ):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.policy = policy
        self.default_load_time = default_load_time
        self.entries: dict[str, CacheEntry] = {}
        self.hits = 0
        self.misses = 0

    @property
    def used(self) -> float:
        return sum(e.size for e in self.entries.values())

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def _evict_to_fit(self, size: float, keep: Optional[str] = None) -> None:
        while self.used + size > self.capacity:
            victims = [cid for cid in self.entries if cid != keep]
            if not victims:
                break
            lru = min(victims, key=lambda cid: (self.entries[cid].last_access, cid))
            del self.entries[lru]

    def admit(self, content_id: str, size: float, now: float, load_time: float) -> CacheEntry:
        """Insert (or refresh) an entry that starts warming now."""
        if size > self.capacity:
            raise ValueError(
                f"content {content_id!r} of size {size} exceeds capacity {self.capacity}"
            )
        entry = self.entries.get(content_id)
        if entry is not None:
            entry.last_access = now
            # keep the earlier warm completion if already warming
            entry.warm_at = min(entry.warm_at, now + load_time)
            return entry
        self._evict_to_fit(size, keep=content_id)
        entry = CacheEntry(size=size, last_access=now, warm_at=now + load_time)
        self.entries[content_id] = entry
        return entry

    def access(self, content_id: str, size: float, now: float,
               load_time: Optional[float] = None) -> AccessResult:
        """Demand access: hit iff resident and warm; a miss starts (or joins)
        the warm-up and reports when the content becomes usable."""
        if size > self.capacity:
            raise ValueError(
                f"content {content_id!r} of size {size} exceeds capacity {self.capacity}"
            )
        lt = self.default_load_time if load_time is None else load_time
        entry = self.entries.get(content_id)
        if entry is not None:
            entry.last_access = now
            if entry.is_warm(now):
                self.hits += 1
                return AccessResult(hit=True, ready_at=now)
            self.misses += 1  # arrived before warm-up completed
            return AccessResult(hit=False, ready_at=entry.warm_at)
        self.misses += 1
        entry = self.admit(content_id, size, now, lt)
        return AccessResult(hit=False, ready_at=entry.warm_at)

    def prefetch(self, content_id: str, size: float, now: float,
                 load_time: Optional[float] = None) -> None:
        """Speculative load; not counted in hit/miss accounting."""
        lt = self.default_load_time if load_time is None else load_time
        self.admit(content_id, size, now, lt)

    def is_warm(self, content_id: str, now: float) -> bool:
        entry = self.entries.get(content_id)
        return entry is not None and entry.is_warm(now)


def cache_access(cache: CacheState, content_id: str, size: float, now: float,
                 load_time: Optional[float] = None) -> AccessResult:
    return cache.access(content_id, size, now, load_time)


@dataclass(frozen=True)
class PrefetchAction:
    content_id: str
    at_time: float


@dataclass
class PrefetchContext:
    now: float = 0.0
    plan: Optional[PrewarmPlan] = None


def cache_prefetch_signal(
    cache: CacheState,
    content_id: str,
    size: float,
    policy: CachePolicy,
    context: PrefetchContext,
) -> Optional[PrefetchAction]:
    """When (if ever) a policy speculatively loads content.

    Reactive LRU never prefetches. EPWQ prefetches the moment the request
    enters the waiting queue. Plan-driven prefetch fires at the prewarm
    plan's trigger time, possibly before the request exists.
    """
    if policy is not cache.policy:
        raise ValueError(
            f"policy {policy.value} does not match cache policy {cache.policy.value}"
        )
    if policy is CachePolicy.LRU:
        return None
    if policy is CachePolicy.EPWQ:
        return PrefetchAction(content_id=content_id, at_time=context.now)
    if context.plan is None:
        return None
    return PrefetchAction(content_id=content_id, at_time=context.plan.trigger_time)


@dataclass
class PlanOutcome:
    """Post-hoc result of one executed prewarm plan."""

    plan: PrewarmPlan
    arrived_at: Optional[float] = None  # target request arrival, if it came
    cancelled_at: Optional[float] = None  # branch resolved elsewhere


@dataclass
class WastageReport:
    latency_saved: float = 0.0
    wasted_backend_time: float = 0.0


def wastage_accounting(outcomes: list[PlanOutcome]) -> WastageReport:
    """Aggregate saved latency and wasted backend occupancy over plans.

    A plan whose target arrived at t_a saves the overlap of the warm-up
    with the wait (vs a cold start) and wastes any idle time between warm
    completion and arrival; a plan whose branch was never taken wastes the
    full occupancy from trigger to cancellation.
    """
    report = WastageReport()
    for out in outcomes:
        t_s = out.plan.trigger_time
        t_p = out.plan.t_p
        if out.arrived_at is not None:
            report.latency_saved += min(t_p, max(0.0, out.arrived_at - t_s))
            report.wasted_backend_time += max(0.0, out.arrived_at - (t_s + t_p))
        elif out.cancelled_at is not None:
            report.wasted_backend_time += max(0.0, out.cancelled_at - t_s)
    return report
