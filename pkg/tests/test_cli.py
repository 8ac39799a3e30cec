import json
import os

import pytest

from pdgsim.cli import (
    build_suite,
    build_workload,
    compare,
    load_config,
    main,
    run_experiment,
)
from pdgsim.errors import ConfigError
from pdgsim.metrics import Metrics, build_metrics, percentile, pooled_mean_act
from pdgsim.sched import Policy
from pdgsim.simcore import SimConfig, run_simulation
from pdgsim.workload import build_default_suite, generate

MIX = {"small": 0.72, "medium": 0.26, "large": 0.02}


def write_config(tmp_path, **overrides):
    cfg = {
        "workload": {
            "suite": "default",
            "n_apps": 12,
            "window": 60.0,
            "trials": 40,
            "deadline_factors": [[1.2, 0.34], [1.5, 0.33], [2.0, 0.33]],
        },
        "sim": {"mc_samples": 48, "refresh_period": 5.0},
        "policies": ["gittins", "fcfs-app"],
        "seeds": [1, 2],
        "out": str(tmp_path / "results"),
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path), cfg


class TestMetrics:
    def result(self):
        graphs, class_apps = build_default_suite(0, trials=40)
        wl = generate(MIX, 15, 80.0, seed=3, class_apps=class_apps)
        return run_simulation(graphs, wl, Policy.GITTINS,
                              SimConfig(mc_samples=48), seed=3)

    def test_percentile_order_and_cdf(self):
        m = build_metrics(self.result())
        assert m.p50_act <= m.p95_act
        fracs = [f for _, f in m.cdf]
        assert fracs == sorted(fracs)
        assert fracs[-1] == pytest.approx(1.0)
        acts = [a for a, _ in m.cdf]
        assert acts == sorted(acts)

    def test_cdf_reconstructs_percentiles(self):
        m = build_metrics(self.result())
        acts = [a for a, _ in m.cdf]
        assert percentile(acts, 0.5) == m.p50_act
        assert percentile(acts, 0.95) == m.p95_act

    def test_aggregates_equal_recomputation(self):
        m = build_metrics(self.result())
        assert m.mean_act == pytest.approx(
            sum(r["act"] for r in m.records) / len(m.records)
        )
        assert m.n_apps == len(m.records)

    def test_dsr_bounds(self):
        graphs, class_apps = build_default_suite(0, trials=40)
        wl = generate(MIX, 10, 60.0, seed=4, class_apps=class_apps)
        from pdgsim.simcore import realize_workload, standalone_time
        from pdgsim.workload import assign_deadlines
        cfg = SimConfig(mc_samples=48)
        demands = [standalone_time(s) for s in realize_workload(graphs, wl, cfg, 4)]
        wl = assign_deadlines(wl, demands, [(1.5, 1.0)])
        m = build_metrics(run_simulation(graphs, wl, Policy.EDF, cfg, seed=4))
        assert 0.0 <= m.dsr_overall <= 1.0
        for v in m.dsr_by_class.values():
            assert 0.0 <= v <= 1.0

    def test_pooled_mean_weighted(self):
        a = Metrics("p", 1, n_apps=2, mean_act=10.0)
        b = Metrics("p", 2, n_apps=6, mean_act=2.0)
        assert pooled_mean_act([a, b]) == pytest.approx((20 + 12) / 8)

    def test_percentile_validation(self):
        with pytest.raises(ValueError):
            percentile([], 0.5)
        with pytest.raises(ValueError):
            percentile([1.0], 1.5)


class TestRunExperiment:
    def test_emits_cell_files_and_summary(self, tmp_path):
        path, cfg = write_config(tmp_path)
        summary = run_experiment(path)
        out = cfg["out"]
        for policy in ("gittins", "fcfs-app"):
            for seed in (1, 2):
                stem = os.path.join(out, f"{policy}-seed{seed}")
                assert os.path.exists(stem + ".metrics.json")
                assert os.path.exists(stem + ".cdf.csv")
                assert os.path.exists(stem + ".timing.json")
        assert os.path.exists(os.path.join(out, "summary.json"))
        assert set(summary["policies"]) == {"gittins", "fcfs-app"}

    def test_rerun_byte_identical_metrics(self, tmp_path):
        path, cfg = write_config(tmp_path)
        run_experiment(path)
        stem = os.path.join(cfg["out"], "gittins-seed1")
        with open(stem + ".metrics.json", "rb") as fh:
            first = fh.read()
        run_experiment(path)
        with open(stem + ".metrics.json", "rb") as fh:
            assert fh.read() == first

    def test_unknown_policy_names_key(self, tmp_path):
        path, _ = write_config(tmp_path, policies=["gittins", "lifo"])
        with pytest.raises(ConfigError, match=r"policies\[1\].*lifo"):
            run_experiment(path)

    def test_unknown_suite_rejected(self, tmp_path):
        path, _ = write_config(tmp_path, workload={"suite": "imaginary"})
        with pytest.raises(ConfigError, match="imaginary"):
            run_experiment(path)

    def test_deadline_policy_requires_factors(self, tmp_path):
        path, _ = write_config(
            tmp_path, policies=["edf"],
            workload={"suite": "default", "n_apps": 5, "window": 30.0, "trials": 40},
        )
        with pytest.raises(ConfigError, match="deadline_factors"):
            run_experiment(path)

    def test_env_override(self, tmp_path, monkeypatch):
        path, _ = write_config(tmp_path)
        monkeypatch.setenv("PDGSIM_SEEDS", "[7]")
        cfg = load_config(path)
        assert cfg["seeds"] == [7]

    def test_summary_matches_cell_files(self, tmp_path):
        path, cfg = write_config(tmp_path, policies=["fcfs-app"], seeds=[1])
        summary = run_experiment(path)
        with open(os.path.join(cfg["out"], "fcfs-app-seed1.metrics.json")) as fh:
            cell = json.load(fh)
        per_seed = summary["policies"]["fcfs-app"]["per_seed"]["1"]
        assert per_seed["mean_act"] == pytest.approx(cell["mean_act"])
        assert per_seed["n_apps"] == cell["n_apps"]

    def test_cli_entry_point_run(self, tmp_path, capsys):
        path, cfg = write_config(tmp_path, policies=["fcfs-app"], seeds=[1])
        assert main(["run", "--config", path]) == 0
        assert "fcfs-app" in capsys.readouterr().out

    def test_cli_invalid_config_exit_code(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, policies=["warp"])
        assert main(["run", "--config", path]) == 2
        assert "warp" in capsys.readouterr().err


def summary_doc(workload_id="w1", seeds=(1, 2), **policies):
    doc = {"workload_id": workload_id, "seeds": list(seeds), "policies": {}}
    for name, mean in policies.items():
        doc["policies"][name] = {
            "per_seed": {
                str(s): {"mean_act": mean, "dsr_overall": None,
                         "cache_hit_ratio": 0.0, "n_apps": 10}
                for s in seeds
            },
            "pooled": {"mean_act": mean, "dsr_overall": None,
                       "cache_hit_ratio": 0.0, "n_apps": 10 * len(seeds)},
        }
    return doc


class TestCompare:
    def write(self, tmp_path, name, doc):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return str(path)

    def test_hand_built_reduction(self, tmp_path):
        p = self.write(tmp_path, "s.json",
                       summary_doc(base=10.0, better=4.0))
        report = compare([p], baseline="base")
        assert report["policies"]["better"]["pooled"]["mean_act_reduction"] == \
            pytest.approx(0.6)

    def test_equal_policies_zero_improvement(self, tmp_path):
        p = self.write(tmp_path, "s.json", summary_doc(a=8.0, b=8.0))
        report = compare([p], baseline="a")
        assert report["policies"]["b"]["pooled"]["mean_act_reduction"] == 0.0

    def test_mismatched_workload_rejected(self, tmp_path):
        p1 = self.write(tmp_path, "s1.json", summary_doc("w1", a=8.0))
        p2 = self.write(tmp_path, "s2.json", summary_doc("w2", b=4.0))
        with pytest.raises(ConfigError, match="identity"):
            compare([p1, p2])

    def test_missing_seed_overlap_rejected(self, tmp_path):
        p1 = self.write(tmp_path, "s1.json", summary_doc("w1", (1, 2), a=8.0))
        p2 = self.write(tmp_path, "s2.json", summary_doc("w1", (3, 4), b=4.0))
        with pytest.raises(ConfigError, match="seed"):
            compare([p1, p2])

    def test_real_summaries_compare(self, tmp_path):
        path, cfg = write_config(tmp_path)
        run_experiment(path)
        report = compare([os.path.join(cfg["out"], "summary.json")],
                         baseline="fcfs-app")
        assert "gittins" in report["policies"]


class TestBuildHelpers:
    def test_build_suite_all_kinds(self):
        for suite in ("default", "deadline", "point-mass", "cache", "knob",
                      "refinement"):
            graphs, class_apps, sizes = build_suite({"suite": suite, "trials": 20})
            assert graphs and class_apps

    def test_build_workload_normalizes_mix(self):
        _, class_apps, _ = build_suite({"suite": "point-mass"})
        wl = build_workload({"suite": "point-mass", "n_apps": 5, "window": 10.0},
                            class_apps, seed=1)
        assert len(wl.arrivals) == 5
