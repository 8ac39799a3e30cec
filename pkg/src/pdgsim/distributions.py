"""FIFO-capped empirical distributions with a bucketed view.

Every demand quantity in the system (token lengths, durations, request
parallelism) is stored as raw samples rather than fitted coefficients.
Samples beyond the capacity evict the oldest entry, so the distribution
tracks the most recent profiling runs.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, Sequence

from .errors import EstimationError

DEFAULT_CAPACITY = 1000
DEFAULT_BUCKET_COUNT = 10

Bucket = tuple[float, float, float]  # (lower, upper, probability)


class EmpiricalDistribution:
    """A capped list of non-negative samples with equal-width bucketing."""

    __slots__ = ("_samples", "capacity", "bucket_count", "_buckets")

    def __init__(
        self,
        samples: Iterable[float] = (),
        capacity: int = DEFAULT_CAPACITY,
        bucket_count: int = DEFAULT_BUCKET_COUNT,
    ):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if bucket_count <= 0:
            raise ValueError(f"bucket_count must be positive, got {bucket_count}")
        self.capacity = capacity
        self.bucket_count = bucket_count
        self._samples: deque[float] = deque(maxlen=capacity)
        self._buckets: list[Bucket] | None = None
        for s in samples:
            self.add(s)

    def add(self, value: float) -> None:
        if value < 0:
            raise ValueError(f"samples must be non-negative, got {value}")
        self._samples.append(float(value))
        self._buckets = None  # bucket boundaries are lazy, invalidated on insert

    def extend(self, values: Iterable[float]) -> None:
        for v in values:
            self.add(v)

    @property
    def samples(self) -> list[float]:
        return list(self._samples)

    def __len__(self) -> int:
        return len(self._samples)

    def __bool__(self) -> bool:
        return len(self._samples) > 0

    def min(self) -> float:
        return min(self._samples)

    def max(self) -> float:
        return max(self._samples)

    def mean(self) -> float:
        return sum(self._samples) / len(self._samples)

    def survival(self, x: float) -> float:
        """P(X >= x) over the samples."""
        if not self._samples:
            return 0.0
        return sum(1 for s in self._samples if s >= x) / len(self._samples)

    def bucketize(self) -> list[Bucket]:
        """Equal-width buckets over [min, max]; probabilities sum to 1.

        A degenerate sample set (all values equal) yields one point-mass
        bucket instead of dividing a zero-width range.
        """
        if self._buckets is not None:
            return self._buckets
        if not self._samples:
            raise EstimationError("cannot bucketize: no data")
        lo, hi = min(self._samples), max(self._samples)
        n = len(self._samples)
        if lo == hi:
            self._buckets = [(lo, hi, 1.0)]
            return self._buckets
        k = self.bucket_count
        width = (hi - lo) / k
        counts = [0] * k
        for s in self._samples:
            idx = int((s - lo) / width)
            if idx >= k:  # a sample equal to max falls in the last bucket
                idx = k - 1
            counts[idx] += 1
        self._buckets = [
            (lo + i * width, lo + (i + 1) * width, counts[i] / n) for i in range(k)
        ]
        return self._buckets

    def bucket_index(self, value: float) -> int:
        """Index of the bucket `value` falls in (clamped to the range)."""
        buckets = self.bucketize()
        lo = buckets[0][0]
        hi = buckets[-1][1]
        if hi == lo:
            return 0
        if value <= lo:
            return 0
        if value >= hi:
            return len(buckets) - 1
        return min(int((value - lo) / ((hi - lo) / len(buckets))), len(buckets) - 1)

    def bucket_boundaries(self) -> list[float]:
        buckets = self.bucketize()
        bounds = [buckets[0][0]]
        bounds.extend(b[1] for b in buckets)
        if bounds[0] == bounds[-1]:
            return [bounds[0]]
        return bounds

    def bucket_points(self) -> tuple[list[float], list[float]]:
        """Bucket midpoints and their probabilities (zero-mass buckets kept)."""
        buckets = self.bucketize()
        values = [(lo + hi) / 2.0 for lo, hi, _ in buckets]
        probs = [p for _, _, p in buckets]
        return values, probs

    def __repr__(self) -> str:
        return (
            f"EmpiricalDistribution(n={len(self._samples)}, "
            f"capacity={self.capacity}, bucket_count={self.bucket_count})"
        )


def bucketize(dist: EmpiricalDistribution) -> list[Bucket]:
    """Bucketed view of a distribution; errors on empty sample lists."""
    return dist.bucketize()


def from_samples(
    samples: Sequence[float],
    capacity: int = DEFAULT_CAPACITY,
    bucket_count: int = DEFAULT_BUCKET_COUNT,
) -> EmpiricalDistribution:
    return EmpiricalDistribution(samples, capacity=capacity, bucket_count=bucket_count)
