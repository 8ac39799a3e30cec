import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdgsim.distributions import EmpiricalDistribution
from pdgsim.errors import EstimationError, ExhaustedDistributionError
from pdgsim.estimator import RemainingDemand
from pdgsim.sched import (
    ApplicationInstance,
    Policy,
    compute_priority,
    gittins_rank,
    gittins_rank_batch,
    gittins_rank_points,
    lstf_slack,
    refresh_priorities,
)


def brute_force_rank(samples, age, grid_steps=2000):
    """Dense-grid reference: evaluate the ratio at many candidate budgets,
    always including the support offsets."""
    tail = sorted(s - age for s in samples if s > age)
    lo, hi = tail[0], tail[-1]
    candidates = set(tail)
    if hi > lo:
        step = (hi - lo) / grid_steps
        candidates.update(lo + i * step for i in range(grid_steps + 1))
    n = len(tail)
    best = float("inf")
    for d in sorted(candidates):
        num = sum(min(t, d) for t in tail) / n
        den = sum(1 for t in tail if t <= d) / n
        if den > 0:
            best = min(best, num / den)
    return best


class TestGittinsRank:
    def test_point_mass_is_remaining_time(self):
        assert gittins_rank([10.0] * 4, 4.0) == pytest.approx(6.0)

    def test_two_point_age_zero(self):
        # candidates 2 -> (2*0.5+2*0.5)/0.5 = 4, 10 -> 6/1 = 6
        assert gittins_rank([2.0, 10.0], 0.0) == pytest.approx(4.0)

    def test_two_point_conditioned_past_first(self):
        assert gittins_rank([2.0, 10.0], 2.0) == pytest.approx(8.0)

    def test_exhausted_distribution_raises(self):
        with pytest.raises(ExhaustedDistributionError):
            gittins_rank([2.0, 10.0], 10.0)

    def test_empty_rejected(self):
        with pytest.raises(EstimationError):
            gittins_rank([], 0.0)

    def test_accepts_distribution_objects(self):
        dist = EmpiricalDistribution([2.0, 10.0])
        rem = RemainingDemand([2.0, 10.0], 2)
        assert gittins_rank(dist, 0.0) == gittins_rank(rem, 0.0) == pytest.approx(4.0)

    def test_point_mass_rank_decreases_with_age(self):
        ranks = [gittins_rank([50.0] * 3, a) for a in (0.0, 10.0, 30.0, 49.0)]
        assert ranks == sorted(ranks, reverse=True)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(min_value=0.1, max_value=1e3), min_size=2, max_size=30),
        st.floats(min_value=0.0, max_value=0.9),
    )
    def test_matches_dense_grid_brute_force(self, samples, age_frac):
        age = age_frac * max(samples)
        if not any(s > age for s in samples):
            return
        assert gittins_rank(samples, age) == pytest.approx(
            brute_force_rank(samples, age), abs=1e-9
        )

    def test_points_form_matches_sample_form(self):
        samples = [1.0, 1.0, 4.0, 9.0]
        values, counts = np.unique(samples, return_counts=True)
        probs = counts / counts.sum()
        for age in (0.0, 0.5, 2.0, 5.0):
            assert gittins_rank_points(values, probs, age) == pytest.approx(
                gittins_rank(samples, age)
            )

    def test_points_exhausted_raises(self):
        with pytest.raises(ExhaustedDistributionError):
            gittins_rank_points([3.0], [1.0], 3.0)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(11)
        n, b = 40, 10
        vals = np.sort(rng.uniform(1, 100, size=(n, b)), axis=1)
        probs = rng.uniform(0.1, 1, size=(n, b))
        probs /= probs.sum(axis=1, keepdims=True)
        ages = rng.uniform(0, 50, size=n)
        ranks = gittins_rank_batch(vals, probs, ages)
        for i in range(n):
            if np.isnan(ranks[i]):
                assert not (vals[i] > ages[i]).any()
            else:
                assert ranks[i] == pytest.approx(
                    gittins_rank_points(vals[i], probs[i], ages[i])
                )


class TestLstfSlack:
    def test_direct_substitution(self):
        assert lstf_slack([50.0], 10.0, 100.0, 20.0) == pytest.approx(40.0)

    def test_negative_slack_permitted(self):
        assert lstf_slack([50.0], 10.0, 30.0, 20.0) == pytest.approx(-30.0)

    def test_worst_case_already_served(self):
        assert lstf_slack([50.0], 50.0, 80.0, 20.0) == pytest.approx(60.0)

    def test_antitone_in_sup_monotone_in_deadline_and_age(self):
        base = lstf_slack([40.0], 5.0, 100.0, 0.0)
        assert lstf_slack([60.0], 5.0, 100.0, 0.0) < base
        assert lstf_slack([40.0], 5.0, 120.0, 0.0) > base
        assert lstf_slack([40.0], 9.0, 100.0, 0.0) > base


def make_instance(app_id="app-0", arrival=0.0, deadline=None, samples=None,
                  attained=0.0, tenant="t0"):
    inst = ApplicationInstance(
        app_instance_id=app_id, graph_ref="g", arrival_time=arrival,
        tenant_id=tenant, deadline=deadline, attained_service=attained,
    )
    if samples is not None:
        inst.set_remaining(RemainingDemand(list(samples), len(samples)), 10)
    return inst


class TestComputePriority:
    def test_fcfs_uses_arrival(self):
        a = make_instance("a", arrival=5.0)
        b = make_instance("b", arrival=3.0)
        ka = compute_priority(Policy.FCFS_APP, a, now=10.0)
        kb = compute_priority(Policy.FCFS_APP, b, now=10.0)
        assert (ka.key, kb.key) == (5.0, 3.0)
        assert kb.sort_key() < ka.sort_key()

    def test_edf_uses_deadline(self):
        a = make_instance("a", deadline=40.0)
        b = make_instance("b", deadline=90.0)
        assert compute_priority(Policy.EDF, a, 0.0).key == 40.0
        assert compute_priority(Policy.EDF, b, 0.0).key == 90.0

    def test_edf_without_deadline_rejected(self):
        with pytest.raises(EstimationError):
            compute_priority(Policy.EDF, make_instance(), 0.0)

    def test_fair_share_uses_tenant_service(self):
        a = make_instance("a", tenant="t0")
        b = make_instance("b", tenant="t1")
        served = {"t0": 30.0, "t1": 5.0}
        assert compute_priority(Policy.FAIR_SHARE, a, 0.0, served).key == 30.0
        assert compute_priority(Policy.FAIR_SHARE, b, 0.0, served).key == 5.0

    def test_srpt_mean_nets_service_since_estimate(self):
        inst = make_instance(samples=[10.0, 20.0])
        inst.attained_service = 4.0  # estimate was taken at age 0
        assert compute_priority(Policy.SRPT_MEAN, inst, 0.0).key == pytest.approx(11.0)

    def test_gittins_point_mass_orders_like_srpt(self):
        short = make_instance("s", samples=[6.0, 6.0])
        long = make_instance("l", samples=[20.0, 20.0])
        ks = compute_priority(Policy.GITTINS, short, 0.0)
        kl = compute_priority(Policy.GITTINS, long, 0.0)
        assert ks.key < kl.key
        assert ks.key == pytest.approx(
            compute_priority(Policy.SRPT_MEAN, short, 0.0).key
        )

    def test_gittins_overrun_penalty(self):
        inst = make_instance(samples=[5.0, 5.0])
        inst.attained_service = 8.0
        prio = compute_priority(Policy.GITTINS, inst, 0.0,
                                overrun_penalty_factor=2.0)
        assert prio.key == pytest.approx(16.0)
        assert inst.overrun_flagged

    def test_missing_estimate_rejected(self):
        with pytest.raises(EstimationError):
            compute_priority(Policy.GITTINS, make_instance(), 0.0)

    def test_lstf_uses_worst_case_total(self):
        inst = make_instance(deadline=100.0, samples=[30.0, 50.0])
        prio = compute_priority(Policy.LSTF, inst, now=20.0)
        assert prio.key == pytest.approx(100.0 - 20.0 - 50.0)


class TestRefreshPriorities:
    def test_not_due_is_noop(self):
        inst = make_instance(samples=[10.0])
        inst.last_refresh = 100.0
        res = refresh_priorities([inst], now=101.0, bucket_period=5.0)
        assert res.refreshed == []
        assert res.priorities == {}

    def test_period_elapsed_refreshes(self):
        inst = make_instance(samples=[10.0])
        inst.last_refresh = 100.0
        res = refresh_priorities([inst], now=106.0, bucket_period=5.0)
        assert res.refreshed == ["app-0"]
        assert inst.last_refresh == 106.0

    def test_observation_forces_mid_period_refresh(self):
        inst = make_instance(samples=[10.0])
        inst.last_refresh = 100.0
        inst.observation_pending = True
        res = refresh_priorities([inst], now=101.0, bucket_period=5.0)
        assert res.refreshed == ["app-0"]
        assert inst.observation_pending is False

    def test_invalid_period_rejected(self):
        with pytest.raises(ValueError):
            refresh_priorities([], now=0.0, bucket_period=0.0)

    def test_batch_refresh_matches_scalar_priorities(self):
        rng = np.random.default_rng(3)
        insts = []
        for i in range(30):
            samples = rng.uniform(1, 200, size=25).tolist()
            inst = make_instance(f"app-{i:02d}", arrival=float(i), samples=samples)
            inst.attained_service = float(rng.uniform(0, 20))
            insts.append(inst)
        res = refresh_priorities(insts, now=10.0, bucket_period=5.0,
                                 policy=Policy.GITTINS)
        for inst in insts:
            expect = compute_priority(Policy.GITTINS, inst, 10.0)
            assert res.priorities[inst.app_instance_id].key == pytest.approx(
                expect.key, rel=1e-12
            )

    def test_measures_elapsed_time(self):
        inst = make_instance(samples=[10.0, 20.0])
        res = refresh_priorities([inst], now=10.0, bucket_period=5.0)
        assert res.elapsed_ns >= 0


class TestPolicyEnum:
    def test_cli_names(self):
        assert {p.value for p in Policy} == {
            "gittins", "lstf", "fcfs-request", "fcfs-app",
            "srpt-mean", "edf", "fair-share",
        }

    def test_estimate_and_deadline_requirements(self):
        assert Policy.GITTINS.needs_estimate
        assert Policy.LSTF.needs_deadline
        assert not Policy.FCFS_APP.needs_estimate
        assert not Policy.EDF.needs_estimate
