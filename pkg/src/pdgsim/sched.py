"""Scheduling priorities over live application instances.

The Gittins rank conditions the total-demand distribution on the service
already attained and takes the best cost-to-completion-probability ratio
over candidate service budgets; the infimum over an empirical distribution
is attained at a support point, so only support offsets are evaluated.
Worst-case slack drives the deadline policy; classical baselines share the
same priority interface (lower key = served first).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .distributions import EmpiricalDistribution
from .errors import EstimationError, ExhaustedDistributionError
from .estimator import RemainingDemand

OVERRUN_PENALTY_FACTOR = 2.0


class Policy(Enum):
    GITTINS = "gittins"
    LSTF = "lstf"
    FCFS_REQUEST = "fcfs-request"
    FCFS_APP = "fcfs-app"
    SRPT_MEAN = "srpt-mean"
    EDF = "edf"
    FAIR_SHARE = "fair-share"

    @property
    def needs_estimate(self) -> bool:
        return self in (Policy.GITTINS, Policy.LSTF, Policy.SRPT_MEAN)

    @property
    def needs_deadline(self) -> bool:
        return self in (Policy.LSTF, Policy.EDF)


def _samples_of(dist) -> list[float]:
    if isinstance(dist, (EmpiricalDistribution, RemainingDemand)):
        return list(dist.samples)
    return list(dist)


def gittins_rank(dist, age: float) -> float:
    """Gittins rank of a demand distribution conditioned on age.

    Candidate budgets are the distinct sample offsets above the age; the
    rank is the minimum over candidates of expected truncated remaining
    work divided by completion probability. Raises when no sample exceeds
    the age (the caller must refresh or penalize).
    """
    samples = _samples_of(dist)
    if not samples:
        raise EstimationError("gittins_rank: empty distribution")
    tail = sorted(s - age for s in samples if s > age)
    if not tail:
        raise ExhaustedDistributionError(
            f"no sample exceeds age {age}; distribution exhausted"
        )
    n = len(tail)
    if tail[0] == tail[-1]:  # degenerate remaining demand: rank is exact
        return tail[0]
    best = float("inf")
    prefix = 0.0
    i = 0
    while i < n:
        j = i
        while j < n and tail[j] == tail[i]:
            prefix += tail[j]
            j += 1
        d = tail[i]
        # E[min(X - age, d) | X > age] * n  and  P(X - age <= d | X > age) * n
        num = prefix + d * (n - j)
        ratio = num / j
        if ratio < best:
            best = ratio
        i = j
    return best


def gittins_rank_points(
    values: Sequence[float], probs: Sequence[float], age: float
) -> float:
    """Gittins rank of a weighted discrete distribution (e.g. bucket view)."""
    v = np.asarray(values, dtype=float)
    p = np.asarray(probs, dtype=float)
    r = gittins_rank_batch(v[None, :], p[None, :], np.array([age]))
    if np.isnan(r[0]):
        raise ExhaustedDistributionError(
            f"no support point exceeds age {age}; distribution exhausted"
        )
    return float(r[0])


def gittins_rank_batch(
    values: np.ndarray, probs: np.ndarray, ages: np.ndarray
) -> np.ndarray:
    """Vectorized Gittins ranks for N instances with aligned support grids.

    values, probs: (N, B) arrays with rows sorted ascending by value;
    ages: (N,). Rows whose entire support lies at or below the age yield
    NaN (exhausted); the caller applies its overrun policy.
    """
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    ages = np.asarray(ages, dtype=float)
    d = values - ages[:, None]
    alive = d > 0
    mass = np.where(alive, probs, 0.0)
    z = mass.sum(axis=1)
    exhausted = z <= 0
    zsafe = np.where(exhausted, 1.0, z)
    cond = mass / zsafe[:, None]
    cum_p = np.cumsum(cond, axis=1)
    cum_pv = np.cumsum(cond * np.where(alive, d, 0.0), axis=1)
    # candidate budget at column j: d[:, j]; num = E[min(T, d_j)], den = P(T <= d_j)
    num = cum_pv + np.where(alive, d, 0.0) * (1.0 - cum_p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / cum_p
    ratio = np.where(alive & (cum_p > 0), ratio, np.inf)
    ranks = ratio.min(axis=1)
    return np.where(exhausted, np.nan, ranks)


def lstf_slack(dist, age: float, deadline: float, now: float) -> float:
    """Worst-case slack: deadline - now - (sup(demand) - age).

    Negative when the deadline is unreachable even in the worst case.
    """
    samples = _samples_of(dist)
    if not samples:
        raise EstimationError("lstf_slack: empty distribution")
    return deadline - now - (max(samples) - age)


@dataclass
class ApplicationInstance:
    """A live application run as seen by the scheduler."""

    app_instance_id: str
    graph_ref: str
    arrival_time: float
    tenant_id: str = "default"
    deadline: Optional[float] = None
    attained_service: float = 0.0
    remaining: Optional[RemainingDemand] = None
    estimate_age: float = 0.0  # attained service when `remaining` was estimated
    current_units: set = field(default_factory=set)
    completion_time: Optional[float] = None
    last_refresh: float = float("-inf")
    observation_pending: bool = False
    overrun_flagged: bool = False
    # bucket view of `remaining`, cached at estimate time for fast refresh
    bucket_values: Optional[np.ndarray] = None
    bucket_probs: Optional[np.ndarray] = None
    shifted_values: Optional[np.ndarray] = None  # bucket_values + estimate_age
    bucket_width: int = 0
    worst_case: float = 0.0

    def __post_init__(self):
        self.tiebreak = (self.arrival_time, self.app_instance_id)

    def set_remaining(self, remaining: RemainingDemand, bucket_count: int) -> None:
        self.remaining = remaining
        self.estimate_age = self.attained_service
        dist = EmpiricalDistribution(remaining.samples,
                                     capacity=max(len(remaining.samples), 1),
                                     bucket_count=bucket_count)
        values, probs = dist.bucket_points()
        self.bucket_values = np.asarray(values)
        self.bucket_probs = np.asarray(probs)
        self.shifted_values = self.bucket_values + self.estimate_age
        self.bucket_width = len(values)
        self.worst_case = max(remaining.samples)


class Priority(NamedTuple):
    """Scheduling key; lower is served first; ties broken deterministically."""

    policy: Policy
    key: float
    tiebreak: tuple

    def sort_key(self) -> tuple:
        return (self.key, *self.tiebreak)


def compute_priority(
    policy: Policy,
    app: ApplicationInstance,
    now: float,
    tenant_service: Optional[dict[str, float]] = None,
    overrun_penalty_factor: float = OVERRUN_PENALTY_FACTOR,
) -> Priority:
    """Priority key of one instance under the selected policy."""
    tiebreak = (app.arrival_time, app.app_instance_id)
    if policy in (Policy.FCFS_APP, Policy.FCFS_REQUEST):
        return Priority(policy, app.arrival_time, tiebreak)
    if policy is Policy.EDF:
        if app.deadline is None:
            raise EstimationError(f"{app.app_instance_id}: EDF requires a deadline")
        return Priority(policy, app.deadline, tiebreak)
    if policy is Policy.FAIR_SHARE:
        served = (tenant_service or {}).get(app.tenant_id, 0.0)
        return Priority(policy, served, tiebreak)
    if app.remaining is None:
        raise EstimationError(
            f"{app.app_instance_id}: policy {policy.value} requires a demand estimate"
        )
    served_since = app.attained_service - app.estimate_age
    if policy is Policy.SRPT_MEAN:
        return Priority(policy, app.remaining.mean() - served_since, tiebreak)
    if policy is Policy.LSTF:
        if app.deadline is None:
            raise EstimationError(f"{app.app_instance_id}: LSTF requires a deadline")
        total = [s + app.estimate_age for s in app.remaining.samples]
        key = lstf_slack(total, app.attained_service, app.deadline, now)
        return Priority(policy, key, tiebreak)
    if policy is Policy.GITTINS:
        values = app.shifted_values
        try:
            key = gittins_rank_points(values, app.bucket_probs, app.attained_service)
        except ExhaustedDistributionError:
            key = app.attained_service * overrun_penalty_factor
            app.overrun_flagged = True
        return Priority(policy, key, tiebreak)
    raise ValueError(f"unknown policy {policy!r}")


@dataclass
class RefreshResult:
    refreshed: list[str]
    elapsed_ns: int
    priorities: dict[str, Priority]


def refresh_priorities(
    live: Iterable[ApplicationInstance],
    now: float,
    bucket_period: float,
    policy: Policy = Policy.GITTINS,
    tenant_service: Optional[dict[str, float]] = None,
    overrun_penalty_factor: float = OVERRUN_PENALTY_FACTOR,
    force: bool = False,
) -> RefreshResult:
    """Recompute priority keys for instances that are due for a refresh.

    An instance is due when a bucket period elapsed since its last refresh
    or when an observation arrived since then. Gittins keys for all due
    instances are computed in one vectorized pass; the measured elapsed
    time covers only priority recomputation.
    """
    if bucket_period <= 0:
        raise ValueError("bucket_period must be positive")
    instances = list(live)
    due = [
        a
        for a in instances
        if force or a.observation_pending or (now - a.last_refresh) >= bucket_period
    ]
    priorities: dict[str, Priority] = {}
    start = time.perf_counter_ns()
    rest = due
    if policy is Policy.GITTINS and due:
        gittins_apps = [a for a in due if a.remaining is not None]
        rest = [a for a in due if a.remaining is None]
        if gittins_apps:
            m = len(gittins_apps)
            width0 = gittins_apps[0].bucket_width
            if all(a.bucket_width == width0 for a in gittins_apps):
                vals = np.concatenate(
                    [a.shifted_values for a in gittins_apps]).reshape(m, width0)
                prbs = np.concatenate(
                    [a.bucket_probs for a in gittins_apps]).reshape(m, width0)
            else:  # ragged widths: pad with the last support point, zero mass
                width = max(a.bucket_width for a in gittins_apps)
                vals = np.zeros((m, width))
                prbs = np.zeros((m, width))
                for i, a in enumerate(gittins_apps):
                    k = a.bucket_width
                    vals[i, :k] = a.shifted_values
                    prbs[i, :k] = a.bucket_probs
                    if k < width:
                        vals[i, k:] = vals[i, k - 1]
            ages = np.fromiter(
                (a.attained_service for a in gittins_apps), float, m)
            ranks = gittins_rank_batch(vals, prbs, ages)
            nan = np.isnan(ranks)
            if nan.any():
                ranks = np.where(nan, ages * overrun_penalty_factor, ranks)
                for a, flagged in zip(gittins_apps, nan.tolist()):
                    if flagged:
                        a.overrun_flagged = True
            keys = ranks.tolist()
            for a, key in zip(gittins_apps, keys):
                priorities[a.app_instance_id] = Priority(
                    Policy.GITTINS, key, a.tiebreak
                )
    for a in rest:
        priorities[a.app_instance_id] = compute_priority(
            policy, a, now, tenant_service, overrun_penalty_factor
        )
    elapsed = time.perf_counter_ns() - start
    for a in due:
        a.last_refresh = now
        a.observation_pending = False
    return RefreshResult(
        refreshed=[a.app_instance_id for a in due],
        elapsed_ns=elapsed,
        priorities=priorities,
    )
