import pytest
from hypothesis import given, strategies as st

from pdgsim.distributions import EmpiricalDistribution, bucketize, from_samples
from pdgsim.errors import EstimationError


class TestFifoCapacity:
    def test_insert_below_capacity_keeps_all(self):
        d = EmpiricalDistribution(range(999), capacity=1000)
        d.add(999)
        assert len(d) == 1000
        assert d.samples == [float(i) for i in range(1000)]

    def test_insert_at_capacity_evicts_oldest(self):
        d = EmpiricalDistribution(range(1000), capacity=1000)
        d.add(1000)
        assert len(d) == 1000
        assert d.samples[0] == 1.0
        assert d.samples[-1] == 1000.0

    @given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=50),
           st.integers(min_value=1, max_value=10))
    def test_survivors_are_last_capacity_inserted(self, values, capacity):
        d = EmpiricalDistribution(values, capacity=capacity)
        assert d.samples == [float(v) for v in values[-capacity:]]

    def test_negative_sample_rejected(self):
        d = EmpiricalDistribution()
        with pytest.raises(ValueError):
            d.add(-1.0)

    def test_invalid_capacity_rejected(self):
        with pytest.raises(ValueError):
            EmpiricalDistribution(capacity=0)
        with pytest.raises(ValueError):
            EmpiricalDistribution(bucket_count=0)


class TestBucketize:
    def test_two_bucket_example(self):
        d = EmpiricalDistribution([1, 1, 2, 9], bucket_count=2)
        assert bucketize(d) == [(1.0, 5.0, 0.75), (5.0, 9.0, 0.25)]

    def test_degenerate_point_mass(self):
        d = EmpiricalDistribution([7, 7, 7])
        assert bucketize(d) == [(7.0, 7.0, 1.0)]

    def test_uniform_range_bucket_index(self):
        d = EmpiricalDistribution([0, 100], bucket_count=10)
        assert d.bucket_index(35) == 3

    def test_max_sample_in_last_bucket(self):
        d = EmpiricalDistribution([0, 10], bucket_count=10)
        buckets = d.bucketize()
        assert buckets[-1][2] == 0.5

    def test_empty_rejected(self):
        with pytest.raises(EstimationError):
            EmpiricalDistribution().bucketize()

    def test_idempotent(self):
        d = EmpiricalDistribution([3, 8, 1, 9])
        assert d.bucketize() == d.bucketize()

    @given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=100),
           st.integers(min_value=1, max_value=20))
    def test_probabilities_sum_to_one(self, values, bucket_count):
        d = EmpiricalDistribution(values, bucket_count=bucket_count)
        assert abs(sum(p for _, _, p in d.bucketize()) - 1.0) < 1e-9

    def test_cache_invalidated_on_insert(self):
        d = EmpiricalDistribution([1, 2], bucket_count=2)
        first = d.bucketize()
        d.add(100)
        assert d.bucketize() != first


class TestStats:
    def test_survival_counts_at_or_above(self):
        d = EmpiricalDistribution([1, 2, 3, 4])
        assert d.survival(3) == 0.5
        assert d.survival(0) == 1.0
        assert d.survival(5) == 0.0

    def test_bucket_points_align_with_buckets(self):
        d = EmpiricalDistribution([1, 1, 2, 9], bucket_count=2)
        values, probs = d.bucket_points()
        assert values == [3.0, 7.0]
        assert probs == [0.75, 0.25]

    def test_from_samples_helper(self):
        d = from_samples([4, 5], capacity=10, bucket_count=3)
        assert d.samples == [4.0, 5.0]
        assert d.capacity == 10
