import json
import math

import numpy as np
import pytest

from optsel.harness import config as cfgmod
from optsel.harness import runner
from optsel.simkit.loop import MetricsRow


def test_three_seeds_three_csvs_and_summary(tmp_path, small_config):
    cfg = small_config.replace(**{"seeds": [1, 2, 3], "strategies": ["random"]})
    doc = runner.write_outputs(cfg, *runner.run_sweep(cfg), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["config.yaml", "metrics_random_seed1.csv", "metrics_random_seed2.csv",
                     "metrics_random_seed3.csv", "summary.json"]
    stats = doc["strategies"]["random"]["final_metric"]
    finals = [r["final_metric"] for r in doc["runs"]]
    assert stats["n"] == 3
    assert stats["std"] == pytest.approx(np.std(finals, ddof=1), rel=1e-12)
    assert json.loads((tmp_path / "summary.json").read_text())["complete"] is True
    assert cfgmod.load(tmp_path / "config.yaml") == cfg


def test_same_config_same_outputs(tmp_path, small_config):
    cfg = small_config.replace(**{"seeds": [0, 1], "strategies": ["two_stage", "random"]})
    a, b = tmp_path / "a", tmp_path / "b"
    runner.write_outputs(cfg, *runner.run_sweep(cfg), a)
    runner.write_outputs(cfg, *runner.run_sweep(cfg, workers=2), b)
    for p in a.glob("*.csv"):
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_summary_recomputable_from_csvs(tmp_path, small_config):
    cfg = small_config.replace(**{"seeds": [0, 1, 2], "strategies": ["two_stage", "topk_raw"]})
    doc = runner.write_outputs(cfg, *runner.run_sweep(cfg), tmp_path)
    again = runner.recompute_summary(tmp_path, cfg)
    assert again["order"] == doc["order"]
    for st, s in doc["strategies"].items():
        for key in ("best_metric", "final_metric", "best_accuracy", "final_accuracy"):
            for stat in ("mean", "std"):
                assert abs(again["strategies"][st][key][stat] - s[key][stat]) <= 1e-12


def test_run_experiment_env_override(tmp_path, small_config, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text(cfgmod.dumps(small_config.replace(**{"strategies": ["random"]})))
    monkeypatch.setenv("OPTSEL_OUTPUT_DIR", str(tmp_path / "env_out"))
    doc = runner.run_experiment(path)
    assert doc["complete"]
    assert (tmp_path / "env_out" / "metrics_random_seed0.csv").exists()


def test_failed_run_is_recorded(tmp_path, small_config, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaboom")
    monkeypatch.setattr(runner, "simulate", boom)
    runs, failures = runner.run_sweep(small_config.replace(**{"strategies": ["random"]}))
    assert runs == [] and failures[0]["error"] == "RuntimeError: kaboom"


def test_summarize_rows_threshold_and_best():
    rows = [MetricsRow(0, 2.0, 0.1, math.nan, math.nan, 0.0, 0.0),
            MetricsRow(5, 1.0, 0.5, 0.5, 1.0, 1.0, 0.1),
            MetricsRow(10, 1.2, 0.4, 0.5, 1.0, 1.0, 0.2)]
    s = runner.summarize_rows("x", 0, rows, threshold=1.1)
    assert (s.best_metric, s.final_metric, s.steps_to_threshold) == (1.0, 1.2, 5)
    assert runner.summarize_rows("x", 0, rows, threshold=0.5).steps_to_threshold is None


def test_aggregate_orders_by_final_loss():
    mk = lambda st, f: runner.RunSummary(st, 0, f, f, None, 0.0)
    doc = runner.aggregate([mk("a", 2.0), mk("b", 1.0), mk("c", 1.5)])
    assert doc["order"] == ["b", "c", "a"]
    assert doc["strategies"]["a"]["final_metric"]["std"] == 0.0


def test_ablation_table_layout_and_flags(tmp_path, small_config):
    cfg = small_config.replace(**{"seeds": [0, 1]})
    rows = runner.ablation_suite(cfg, str(tmp_path))
    assert [r["variant"] for r in rows] == list(runner.ABLATION_VARIANTS)
    for r in rows:
        assert {"best_mean", "final_mean", "best_std", "final_std"} <= set(r)
    md = (tmp_path / "ablation.md").read_text().splitlines()
    assert len(md) == 2 + len(runner.ABLATION_VARIANTS)
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 1 + len(runner.ABLATION_VARIANTS)
    # only ridge weighting can apply a negative weight
    for r in rows:
        if r["variant"] != "unbounded":
            assert r["negative_weights_applied"] is False


def test_negative_weight_flag_propagates():
    s = runner.RunSummary("unbounded", 0, 1.0, 1.0, None, 0.0, negative_weights_applied=True)
    doc = runner.aggregate([s, runner.RunSummary("unbounded", 1, 1.0, 1.0, None, 0.0)])
    rows = runner.ablation_table(doc)
    assert rows[0]["negative_weights_applied"] is True
    assert "| unbounded |" in runner.ablation_markdown(rows) and "| yes |" in runner.ablation_markdown(rows)


@pytest.mark.slow
def test_two_stage_not_worse_than_vanilla_reweight():
    from optsel.harness.config import ExperimentConfig
    from optsel.simkit.loop import simulate
    cfg = ExperimentConfig()
    ours = np.array([simulate(cfg, "two_stage", s).final.target_loss for s in range(5)])
    vanilla = np.array([simulate(cfg, "vanilla_reweight", s).final.target_loss for s in range(5)])
    assert ours.mean() <= vanilla.mean(), (ours.mean(), vanilla.mean())
