import json
import math

import pytest

from pdgsim.errors import GraphError, PdgsimError
from pdgsim.estimator import build_masks
from pdgsim.workload import (
    Arrival,
    WorkloadSpec,
    archetype,
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

MIX = {"small": 0.72, "medium": 0.26, "large": 0.02}


class TestGenerate:
    def test_mix_counts_within_three_sigma(self):
        spec = generate(MIX, n_apps=1000, window=100.0, seed=4)
        counts = {c: 0 for c in MIX}
        for a in spec.arrivals:
            counts[a.size_class] += 1
        for cls, p in MIX.items():
            sigma = math.sqrt(1000 * p * (1 - p))
            assert abs(counts[cls] - 1000 * p) <= 3 * sigma

    def test_single_arrival_in_window(self):
        for profile in ("uniform", "bursty"):
            spec = generate(MIX, n_apps=1, window=50.0, burst_profile=profile, seed=1)
            assert len(spec.arrivals) == 1
            assert 0.0 <= spec.arrivals[0].time <= 50.0

    def test_seed_determinism(self):
        a = generate(MIX, 100, 60.0, seed=9)
        b = generate(MIX, 100, 60.0, seed=9)
        assert a.to_dict() == b.to_dict()

    def test_invalid_weights_rejected(self):
        with pytest.raises(PdgsimError):
            generate({"small": 0.7, "large": 0.7}, 10, 10.0)

    def test_arrivals_sorted(self):
        spec = generate(MIX, 200, 100.0, burst_profile="bursty", seed=2)
        times = [a.time for a in spec.arrivals]
        assert times == sorted(times)

    def test_unknown_burst_profile_rejected(self):
        with pytest.raises(PdgsimError):
            generate(MIX, 10, 10.0, burst_profile="tsunami")


class TestAssignDeadlines:
    def spec(self, n=3):
        arrivals = [Arrival(time=float(i) * 10, app_id="x", tenant_id="t")
                    for i in range(n)]
        return WorkloadSpec(arrivals, {"small": 1.0}, 100.0, seed=0)

    def test_substitution(self):
        out = assign_deadlines(self.spec(1), [10.0], [(1.5, 1.0)])
        assert out.arrivals[0].deadline == pytest.approx(0.0 + 1.5 * 10.0)

    def test_class_labels(self):
        out = assign_deadlines(self.spec(50), [10.0] * 50,
                               [(1.2, 0.4), (1.5, 0.3), (2.0, 0.3)])
        labels = {a.deadline_class for a in out.arrivals}
        assert labels <= {"tight", "modest", "loose"}
        tight = [a for a in out.arrivals if a.deadline_class == "tight"]
        assert all(a.deadline == pytest.approx(a.time + 12.0) for a in tight)

    def test_single_factor_applies_everywhere(self):
        out = assign_deadlines(self.spec(5), [7.0] * 5, [(2.0, 1.0)])
        assert all(a.deadline == pytest.approx(a.time + 14.0) for a in out.arrivals)

    def test_misaligned_demands_rejected(self):
        with pytest.raises(PdgsimError):
            assign_deadlines(self.spec(3), [1.0], [(2.0, 1.0)])


class TestIngestTrace:
    def write(self, tmp_path, lines):
        path = tmp_path / "trace.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return str(path)

    def test_reads_in_order(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"t": t}) for t in (1.0, 2.5, 9.0)])
        spec = ingest_trace(path)
        assert [a.time for a in spec.arrivals] == [1.0, 2.5, 9.0]

    def test_unsorted_normalized_stable(self, tmp_path):
        path = self.write(tmp_path, [
            json.dumps({"t": 5.0, "tenant": "x"}),
            json.dumps({"t": 1.0}),
            json.dumps({"t": 5.0, "tenant": "y"}),
        ])
        spec = ingest_trace(path)
        assert [a.time for a in spec.arrivals] == [1.0, 5.0, 5.0]
        assert [a.tenant_id for a in spec.arrivals[1:]] == ["x", "y"]

    def test_negative_timestamp_rejected_with_line(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"t": 1.0}), json.dumps({"t": -3.0})])
        with pytest.raises(PdgsimError, match=":2:"):
            ingest_trace(path)

    def test_schema_violation_rejected_with_line(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"t": 1.0}), "not json"])
        with pytest.raises(PdgsimError, match=":2:"):
            ingest_trace(path)

    def test_classes_respected(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"t": 1.0, "class": "small"})])
        spec = ingest_trace(path, mix={"small": 1.0},
                            class_apps={"small": ["app-a"]})
        assert spec.arrivals[0].app_id == "app-a"


class TestArchetypes:
    def test_unknown_kind_rejected(self):
        with pytest.raises(GraphError):
            archetype("spiral", {}, seed=0)

    def test_react_loop_branch_frequency(self):
        g = archetype("react-loop", {"trials": 1000, "loop_back": 0.6}, seed=3)
        assert g.units["think"].successors["think"] == pytest.approx(0.6, abs=0.05)

    def test_fanout_parallelism_point_mass(self):
        g = archetype("fanout-reduce", {"trials": 50, "fanout": 8}, seed=1)
        assert set(g.units["map"].parallelism_dist.samples) == {8.0}

    def test_verify_chain_discovers_correlation(self):
        g = archetype("verify-chain", {"trials": 200}, seed=2)
        assert g.units["verify"].masks.input_upstream_output is True

    @pytest.mark.parametrize("kind", ["fanout-reduce", "verify-chain", "react-loop",
                                      "plan-execute", "code-check"])
    def test_all_archetypes_validate(self, kind):
        g = archetype(kind, {"trials": 60}, seed=5)
        g.validate()  # raises on any structural violation

    def test_seed_determinism(self):
        from pdgsim.pdgraph import graph_to_dict
        a = archetype("plan-execute", {"trials": 40}, seed=7)
        b = archetype("plan-execute", {"trials": 40}, seed=7)
        assert graph_to_dict(a) == graph_to_dict(b)


class TestSuites:
    def test_default_suite_classes(self):
        graphs, class_apps = build_default_suite(0, trials=30)
        for cls, ids in class_apps.items():
            for app_id in ids:
                assert app_id in graphs
                graphs[app_id].validate()

    def test_point_mass_suite_is_degenerate(self):
        graphs, _ = build_point_mass_suite(0)
        for g in graphs.values():
            for unit in g.units.values():
                assert len(set(unit.output_dist.samples)) == 1

    def test_cache_suite_returns_sizes(self):
        graphs, class_apps, sizes = build_cache_suite(0, n_contents=4, trials=10)
        assert len(sizes) == 4
        assert all(s == 1.0 for s in sizes.values())

    def test_knob_suite_branch_probabilities_spread(self):
        graphs, _ = build_knob_suite(0, n_graphs=10)
        probs = sorted({round(g.units["work"].successors.get("tool", 0.0), 2)
                        for g in graphs.values()})
        assert probs == [0.16, 0.36, 0.56, 0.76, 0.96] or len(probs) == 5

    def test_deadline_suite_heavy_apps_are_tail_dominated(self):
        graphs, class_apps = build_deadline_suite(0, trials=40)
        for app_id in class_apps["heavy"]:
            g = graphs[app_id]
            g.validate()
            llm = g.units["plan"].output_dist.mean()
            tail = g.units["run"].duration_dist.mean()
            assert tail > 10 * (llm / 50.0)  # decode time is a sliver of the tail
        for app_id in class_apps["small"]:
            assert set(graphs[app_id].units) == {"answer"}

    def test_refinement_suite_bimodal(self):
        graphs, _ = build_refinement_suite(0, trials=100)
        g = graphs["bimodal-verify"]
        outs = g.units["extract"].output_dist.samples
        assert max(outs) > 5 * min(outs)


class TestWorkloadSpecRoundTrip:
    def test_save_load_identical(self, tmp_path):
        spec = generate(MIX, 20, 60.0, seed=8)
        spec = assign_deadlines(spec, [5.0] * 20, [(1.5, 1.0)])
        path = str(tmp_path / "wl.json")
        spec.save(path)
        assert WorkloadSpec.load(path).to_dict() == spec.to_dict()

    def test_unsorted_arrivals_rejected(self):
        with pytest.raises(PdgsimError):
            WorkloadSpec(
                [Arrival(5.0, "a", "t"), Arrival(1.0, "a", "t")],
                {"small": 1.0}, 10.0,
            )
