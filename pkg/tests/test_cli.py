"""End-to-end command-line checks: golden outputs, determinism, exit codes.

Golden files live in tests/golden/.  Each golden test writes real command
output to a temp directory and compares bytes; run with UPDATE_GOLDEN=1 to
regenerate the files after an intentional behavior change.
"""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from numpy.random import default_rng

from ctbndesign.cli import main
from ctbndesign.engine import solve_master_equation
from ctbndesign.model import (
    GammaRateSpec,
    amalgamate,
    load_model,
    random_model,
    save_model,
)
from ctbndesign.paths import sample_path, save_trajectories
from ctbndesign.plotting import metric_curves, smoothed_marginal_curves
from ctbndesign.presets import preset_model

GOLDEN = Path(__file__).parent / "golden"


def invoke(*args) -> int:
    return main([str(a) for a in args])


def run_cli(*args):
    """Run the CLI in a fresh interpreter for cross-process determinism checks."""
    proc = subprocess.run([sys.executable, "-m", "ctbndesign.cli", *map(str, args)],
                          capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


def check_golden(produced: Path, golden: Path) -> None:
    data = produced.read_bytes()
    if os.environ.get("UPDATE_GOLDEN"):
        golden.parent.mkdir(parents=True, exist_ok=True)
        golden.write_bytes(data)
    assert golden.exists(), f"golden file missing: {golden} (run with UPDATE_GOLDEN=1)"
    assert data == golden.read_bytes(), f"{produced.name} deviates from {golden.name}"


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["synthetic-structure", "synthetic-parameters"])
def test_generate_round_trip(tmp_path, preset):
    first = tmp_path / "sub" / "truth.json"
    second = tmp_path / "again.json"
    assert invoke("generate", "--preset", preset, "--seed", 4, "--out", first) == 0
    assert invoke("generate", "--preset", preset, "--seed", 4, "--out", second) == 0
    assert first.read_bytes() == second.read_bytes()
    loaded = load_model(first)
    truth = preset_model(preset, seed=4)
    assert loaded.state_cards == truth.state_cards
    assert np.array_equal(loaded.graph, truth.graph)
    for got, want in zip(loaded.rates, truth.rates):
        assert np.array_equal(got, want)


def test_generate_into_directory(tmp_path):
    assert invoke("generate", "--preset", "synthetic-parameters", "--out", tmp_path) == 0
    assert (tmp_path / "model.json").exists()


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def test_run_single_passive_step(tmp_path):
    code = invoke("run", "--preset", "synthetic-parameters", "--strategies", "passive",
                  "--target", "parameters", "-K", 1, "-R", 1, "--samples", 2,
                  "--seed", 0, "--workers", 1, "--out", tmp_path)
    assert code == 0
    frame = pd.read_csv(tmp_path / "metrics.csv")
    # one prior row plus one experiment row
    assert len(frame) == 2
    assert list(frame["step"]) == [0, 1]
    assert frame["intervention"].iloc[0] == "prior"
    assert "wall_time" not in frame.columns


def test_run_golden_parameter_target(tmp_path):
    code = invoke("run", "--preset", "synthetic-parameters",
                  "--strategies", "random,vbhc", "--target", "parameters",
                  "-K", 2, "-R", 2, "--samples", 4, "--seed", 1,
                  "--workers", 1, "--out", tmp_path)
    assert code == 0
    check_golden(tmp_path / "metrics.csv", GOLDEN / "run_parameters_metrics.csv")
    check_golden(tmp_path / "summary.csv", GOLDEN / "run_parameters_summary.csv")
    assert (tmp_path / "figures" / "mse.png").stat().st_size > 0


def test_run_golden_structure_target(tmp_path):
    code = invoke("run", "--preset", "synthetic-structure",
                  "--strategies", "passive,random", "--target", "structure",
                  "-K", 2, "-R", 2, "--samples", 4, "--seed", 2,
                  "--workers", 1, "--out", tmp_path)
    assert code == 0
    check_golden(tmp_path / "metrics.csv", GOLDEN / "run_structure_metrics.csv")
    check_golden(tmp_path / "summary.csv", GOLDEN / "run_structure_summary.csv")
    for metric in ("auroc", "aupr", "entropy"):
        assert (tmp_path / "figures" / f"{metric}.png").stat().st_size > 0


def test_run_rerun_is_bit_identical(tmp_path):
    args = ["run", "--preset", "synthetic-parameters", "--strategies", "random,bhc",
            "--target", "parameters", "-K", 2, "-R", 1, "--samples", 3,
            "--seed", 5, "--workers", 1]
    code1, _, err1 = run_cli(*args, "--out", tmp_path / "a")
    code2, _, err2 = run_cli(*args, "--out", tmp_path / "b")
    assert code1 == 0 and code2 == 0, err1 + err2
    files = sorted(p.relative_to(tmp_path / "a")
                   for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        same = (tmp_path / "b" / rel).read_bytes() == (tmp_path / "a" / rel).read_bytes()
        assert same, f"{rel} differs between identical runs"


def test_worker_count_does_not_change_results(tmp_path):
    base = ["run", "--preset", "synthetic-structure", "--strategies", "random",
            "--target", "structure", "-K", 2, "-R", 2, "--samples", 3, "--seed", 9]
    assert invoke(*base, "--workers", 1, "--out", tmp_path / "w1") == 0
    assert invoke(*base, "--workers", 2, "--out", tmp_path / "w2") == 0
    for name in ("metrics.csv", "summary.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "synthetic-parameters", "seed": 5,
                               "strategies": "passive", "steps": 1, "reps": 1,
                               "samples": 2, "workers": 1}))
    out = tmp_path / "out"
    assert invoke("run", "--config", cfg, "--seed", 7, "--out", out) == 0
    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["seed"] == 7
    assert snapshot["strategies"] == ["passive"]


# ---------------------------------------------------------------------------
# configuration errors
# ---------------------------------------------------------------------------

def test_unknown_strategy_is_a_config_error(tmp_path, capsys):
    code = invoke("run", "--preset", "synthetic-parameters", "--strategies", "warp",
                  "-K", 1, "-R", 1, "--out", tmp_path)
    assert code == 2
    err = capsys.readouterr().err
    assert "unknown strategy" in err and "warp" in err


def test_invalid_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text('{"preset": "synthetic-parameters",,}')
    assert invoke("run", "--config", cfg, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "line 1" in err and "column" in err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"presett": "synthetic-parameters"}')
    assert invoke("generate", "--config", cfg, "--out", tmp_path / "m.json") == 2
    assert "unknown keys" in capsys.readouterr().err


def test_missing_model_source_is_reported(tmp_path, capsys):
    assert invoke("score", "--out", tmp_path) == 2
    assert "model file or a --preset" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

REPORT_KEYS = {"num_trajectories", "max_parents", "entropy", "edge_marginals",
               "auroc", "aupr", "nodes"}


def test_score_without_data_reports_prior(tmp_path):
    out = tmp_path / "score.json"
    assert invoke("score", "--preset", "synthetic-structure", "--seed", 3,
                  "--out", out) == 0
    report = json.loads(out.read_text())
    assert set(report) == REPORT_KEYS
    assert report["num_trajectories"] == 0
    assert report["auroc"] == 0.5
    for node in report["nodes"]:
        assert set(node) == {"node", "candidates"}
        probs = [c["prob"] for c in node["candidates"]]
        assert max(probs) - min(probs) < 1e-12
        assert abs(sum(probs) - 1.0) < 1e-9


def _structure_training_data(path, num=40):
    model = preset_model("synthetic-structure", seed=3)
    rng = default_rng((3, 1))
    pairs = []
    for _ in range(num):
        start = tuple(int(rng.integers(c)) for c in model.state_cards)
        pairs.append((sample_path(model, None, start, 3.0, rng), None))
    save_trajectories(path, pairs)
    return model


def test_score_golden_report(tmp_path):
    truth = _structure_training_data(tmp_path / "trajectories.json")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "synthetic-structure", "seed": 3,
                               "trajectories": str(tmp_path / "trajectories.json"),
                               "max_parents": 2}))
    out = tmp_path / "score.json"
    assert invoke("score", "--config", cfg, "--out", out) == 0
    check_golden(out, GOLDEN / "score_structure.json")
    report = json.loads(out.read_text())
    # enough data that the true parent set wins every node
    for node in report["nodes"]:
        best = max(node["candidates"], key=lambda c: c["log_prob"])
        expected = sorted(int(m) for m in np.flatnonzero(truth.graph[:, node["node"]]))
        assert best["parents"] == expected


def test_malformed_trajectories_are_a_config_error(tmp_path, capsys):
    bad = tmp_path / "trajs.json"
    bad.write_text('{"trajectories": [{"horizon": 2.0}]}')
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "synthetic-structure",
                               "trajectories": str(bad)}))
    assert invoke("score", "--config", cfg, "--out", tmp_path / "s.json") == 2
    assert "malformed trajectory" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# filter-demo
# ---------------------------------------------------------------------------

def test_filter_demo_without_observations_matches_master_equation(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "synthetic-parameters", "seed": 7,
                               "observations": 0, "horizon": 3.0,
                               "integrator_steps": 900}))
    assert invoke("filter-demo", "--config", cfg, "--out", tmp_path) == 0
    frame = pd.read_csv(tmp_path / "marginals.csv", float_precision="round_trip")
    evidence = json.loads((tmp_path / "evidence.json").read_text())
    model = preset_model("synthetic-parameters", seed=7)
    sol = solve_master_equation(amalgamate(model), evidence["initial"], 3.0, steps=900)
    assert np.array_equal(frame["time"].to_numpy(), sol.grid)
    got = frame.drop(columns="time").to_numpy()
    assert np.abs(got - sol.probs).max() < 1e-9
    assert evidence["log_evidence"] == 0.0


FILTER_DEMO_EVIDENCE = -8.20659233074497  # frozen output of the config below


def test_filter_demo_golden_outputs(tmp_path):
    cfg = {"preset": "synthetic-parameters", "seed": 7, "observations": 12,
           "flip_prob": 0.1, "horizon": 3.0, "integrator_steps": 900}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert invoke("filter-demo", "--config", tmp_path / "cfg.json",
                  "--out", tmp_path) == 0
    check_golden(tmp_path / "expected_dwell.csv", GOLDEN / "filter_demo_dwell.csv")
    check_golden(tmp_path / "expected_transitions.csv",
                 GOLDEN / "filter_demo_transitions.csv")
    size = int(np.prod(preset_model("synthetic-parameters", seed=7).state_cards))
    # the written text is shortest round-trip repr; the default reader is lossy
    frame = pd.read_csv(tmp_path / "marginals.csv", float_precision="round_trip")
    assert list(frame.columns) == ["time"] + [f"state_{s}" for s in range(size)]
    # grid is the uniform mesh joined with the observation times
    obs_times = np.linspace(0.0, 3.0, 14)[1:-1]
    expected_grid = np.unique(np.concatenate([np.linspace(0.0, 3.0, 901), obs_times]))
    assert np.array_equal(frame["time"].to_numpy(), expected_grid)
    probs = frame.drop(columns="time").to_numpy()
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9
    dwell = pd.read_csv(tmp_path / "expected_dwell.csv")
    assert abs(dwell["expected_dwell"].sum() - 3.0) < 1e-8
    evidence = json.loads((tmp_path / "evidence.json").read_text())
    assert evidence["num_observations"] == 12
    assert evidence["log_evidence"] == FILTER_DEMO_EVIDENCE
    assert (tmp_path / "figures" / "marginals.png").stat().st_size > 0


def test_unresolvable_filtering_grid_exits_3(tmp_path, capsys):
    # both nodes fast and noise-free snapshots every 0.01: an 800-step mesh
    # cannot drain contradicted states, which the forward pass must report
    rng = default_rng(5)
    model = random_model((2, 2), rng, GammaRateSpec(fast_nodes=(0, 1)),
                         edge_prob=1.0, max_parents=1)
    save_model(model, tmp_path / "model.json", meta={})
    cfg = {"model": str(tmp_path / "model.json"), "horizon": 6.0,
           "observations": 599, "flip_prob": 0.0, "integrator_steps": 800,
           "seed": 3}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert invoke("filter-demo", "--config", tmp_path / "cfg.json",
                  "--out", tmp_path / "out") == 3
    assert "numerical failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# figure rendering
# ---------------------------------------------------------------------------

def test_figures_render_identically(tmp_path):
    frame = pd.DataFrame({
        "strategy": ["random", "random", "vbhc", "vbhc"],
        "step": [0, 1, 0, 1],
        "mse_mean": [1.0, 0.5, 1.0, 0.3],
        "mse_q25": [0.9, 0.4, 0.9, 0.2],
        "mse_q75": [1.1, 0.6, 1.1, 0.4],
    })
    first = metric_curves(frame, "mse", tmp_path / "a.png")
    second = metric_curves(frame, "mse", tmp_path / "b.png")
    assert first is not None and second is not None
    assert first.read_bytes() == second.read_bytes()


def test_metric_curves_skip_absent_metrics(tmp_path):
    frame = pd.DataFrame({"strategy": ["random"], "step": [0],
                          "mse_mean": [np.nan], "mse_q25": [np.nan],
                          "mse_q75": [np.nan]})
    assert metric_curves(frame, "mse", tmp_path / "x.png") is None
    assert not (tmp_path / "x.png").exists()
    assert metric_curves(frame, "auroc", tmp_path / "y.png") is None


def test_smoothed_marginal_figure(tmp_path):
    grid = np.linspace(0.0, 1.0, 50)
    probs = np.column_stack([np.linspace(1.0, 0.0, 50), np.linspace(0.0, 1.0, 50)])
    path = smoothed_marginal_curves(grid, probs, tmp_path / "m.png",
                                    observation_times=[0.5])
    assert path is not None and path.stat().st_size > 0
