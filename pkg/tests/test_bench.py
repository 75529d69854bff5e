import csv
import json

import numpy as np
import pytest

from flowguide.bench.cli import main
from flowguide.bench.config import build_config, default_lambda_grid, load_config
from flowguide.bench.experiments import (ResultsConflict, experiment_cells, run_experiment,
                                         run_latency, wilson_interval)
from flowguide.policies import load_policy
from flowguide.sdf import PointCloud, load_grid, write_ply

FAST = """
trials = 2
[sampler]
num_steps = 4
init_candidates = 2
[execution]
max_chunks = 2
"""


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.toml"
    path.write_text(FAST)
    return str(path)


def test_lambda_grid():
    grid = default_lambda_grid(0.02, 4, 8)
    assert len(grid) == 8
    assert grid[0] == pytest.approx(2e-4) and grid[-1] == pytest.approx(2.0)
    assert np.sqrt(grid[3] * grid[4]) == pytest.approx(0.02)
    assert np.allclose(np.diff(np.log10(grid)), 4 / 7)


def test_wilson_interval():
    lo, hi = wilson_interval(5, 10)
    # closed-form Wilson score interval at 95%
    z, p, n = 1.959963984540054, 0.5, 10
    centre = (p + z**2 / (2 * n)) / (1 + z**2 / n)
    half = z / (1 + z**2 / n) * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2))
    assert (lo, hi) == pytest.approx((centre - half, centre + half))
    assert wilson_interval(0, 0) == (0.0, 1.0)
    assert wilson_interval(10, 10)[1] == pytest.approx(1.0)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        build_config("sweep-lambda", {"sweep": {"grid": []}})
    with pytest.raises(ValueError):
        build_config("ablation", trials=0)
    with pytest.raises(ValueError):
        build_config("ablation", {"colour": "blue"})
    with pytest.raises(ValueError):
        build_config("ablation", {"fields": {"gravity": {}}})
    with pytest.raises(ValueError):
        build_config("nonsense")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"trials": 3, "fields": {"semantic": {"sigma": 0.2}}}))
    cfg = load_config("synergy", str(path), seed=9)
    assert cfg.trials == 3 and cfg.seed == 9 and list(cfg.fields) == ["semantic"]


def test_cells_per_experiment():
    names = lambda exp: [c.name for c in experiment_cells(build_config(exp))]
    assert len(names("sweep-lambda")) == 9
    assert len(names("ablation")) == 4
    assert len(names("synergy")) == 4
    assert names("posthoc") == ["none", "posthoc", "guided"]


def test_run_and_resume(tmp_path):
    cfg = build_config("ablation", {"sampler": {"num_steps": 4}, "execution": {"max_chunks": 2}},
                       trials=2, out=str(tmp_path / "out"))
    table = run_experiment(cfg)
    assert len(table) == 4 and all(r.trials == 2 for r in table)
    lines = (tmp_path / "out" / "episodes.jsonl").read_text().splitlines()
    assert len(lines) == 8
    again = run_experiment(cfg)
    assert (tmp_path / "out" / "episodes.jsonl").read_text().splitlines() == lines
    assert again.deterministic_rows() == table.deterministic_rows()
    with open(tmp_path / "out" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and rows[0]["ci_method"] == "wilson"
    meta = json.loads((tmp_path / "out" / "meta.json").read_text())
    assert meta["config_hash"] == cfg.digest() and "numpy" in meta["versions"]
    other = build_config("ablation", {"sampler": {"num_steps": 5}}, trials=2, out=str(tmp_path / "out"))
    with pytest.raises(ResultsConflict):
        run_experiment(other)


def test_latency_report(tmp_path):
    cfg = build_config("latency", {"sampler": {"num_steps": 4}, "chunks": 3}, out=str(tmp_path))
    report = run_latency(cfg)
    assert report["unguided"]["chunks"] == 3 and report["guided"]["chunks"] == 3
    assert report["unguided"]["stage_seconds_per_chunk"]["chain_gradient"] == 0.0
    assert report["guided"]["stage_seconds_per_chunk"]["chain_gradient"] > 0.0
    assert report["ratio_inference"] > 0 and report["grid_rebuild_64_seconds"] > 0
    assert (tmp_path / "latency.json").exists()


@pytest.mark.parametrize("command", ["sweep-lambda", "ablation", "synergy", "posthoc", "demo-follow"])
def test_cli_experiments(command, fast_config, tmp_path, capsys):
    out = tmp_path / command
    assert main([command, "--config", fast_config, "--trials", "1", "--out", str(out)]) == 0
    for name in ("episodes.jsonl", "summary.csv", "meta.json"):
        assert (out / name).exists()
    assert "results in" in capsys.readouterr().out


def test_cli_errors(fast_config, tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["ablation", "--config", fast_config, "--trials", "1", "--out", out]) == 0
    assert main(["ablation", "--config", fast_config, "--trials", "2", "--out", out]) == 2
    assert main(["ablation", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["ablation", "--trials", "0", "--out", out]) == 2
    with pytest.raises(SystemExit):
        main(["teleport"])


def test_cli_latency(tmp_path, capsys):
    cfg = tmp_path / "l.toml"
    cfg.write_text("chunks = 2\n[sampler]\nnum_steps = 4\n")
    assert main(["latency", "--config", str(cfg), "--out", str(tmp_path / "lat")]) == 0
    assert "ratio_inference" in json.loads(capsys.readouterr().out)


def test_cli_train_policy(tmp_path):
    out = tmp_path / "pol"
    assert main(["train-policy", "--episodes", "6", "--components", "2", "--out", str(out)]) == 0
    pol = load_policy(out / "policy.json")
    assert pol.means_.shape[1] == 15 * 7
    assert (out / "dataset.csv").exists()
    again = tmp_path / "pol2"
    assert main(["train-policy", "--data", str(out / "dataset.csv"), "--kind", "mlp", "--epochs", "2",
                 "--out", str(again)]) == 0
    assert (again / "policy.json").exists()


def test_cli_build_grid(tmp_path, capsys):
    pts = np.random.default_rng(0).random((50, 3))
    write_ply(tmp_path / "c.ply", PointCloud(pts))
    out = tmp_path / "g"
    assert main(["build-grid", "--cloud", str(tmp_path / "c.ply"), "--voxel-size", "0.05",
                 "--bounds", "0", "0", "0", "1", "1", "1", "--out", str(out)]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["dropped_points"] == 0
    assert load_grid(out / "grid").distances.shape == (20, 20, 20)
