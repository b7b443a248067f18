"""Command-line front end: generate models, run comparisons, score data.

Every command is a deterministic function of its resolved configuration: a
JSON config file provides defaults and command-line flags override single
values.  Outputs are written as CSV and JSON with stable key and row order,
plus rendered figures next to the delimited files.

Exit codes: 0 on success, 2 for configuration problems, 3 when numerical
integration or estimation fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from ctbndesign import __version__
from ctbndesign.active import (
    ExperimentConfig,
    TARGETS,
    aggregate,
    auroc_aupr,
    records_to_frame,
    run_sequence,
)
from ctbndesign.bayes import edge_marginals, posterior_entropy, structure_posterior
from ctbndesign.design import STRATEGIES
from ctbndesign.engine import NumericalError, solve_master_equation
from ctbndesign.filtering import ObservationSeries, smoothed_marginals
from ctbndesign.model import amalgamate, load_model, save_model
from ctbndesign.paths import load_trajectories, sample_path
from ctbndesign.plotting import metric_curves, smoothed_marginal_curves
from ctbndesign.presets import (
    DEFAULT_HORIZON,
    DEFAULT_NUM_SAMPLES,
    DEFAULT_NUM_STEPS,
    DEFAULT_REPETITIONS,
    PRESET_NAMES,
    preset_model,
)

__all__ = ["main", "ConfigError"]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

# config-file keys accepted beyond the command-line flags
_EXTRA_KEYS = {
    "model", "trajectories", "max_parents", "max_clamped", "inner_samples",
    "prior_alpha", "prior_beta", "observations", "flip_prob", "initial",
    "integrator_steps",
}
_FLAG_KEYS = {
    "preset", "strategies", "target", "steps", "reps", "horizon", "samples",
    "seed", "out", "workers",
}


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config file {path} is not valid JSON: line {exc.lineno}, "
            f"column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - _FLAG_KEYS - _EXTRA_KEYS)
    if unknown:
        raise ConfigError(f"config file {path}: unknown keys {unknown}")
    return doc


def _resolve(args: argparse.Namespace) -> dict:
    """Merge the config file with flags; flags win wherever both appear."""
    settings = _load_config_file(args.config) if args.config else {}
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if isinstance(settings.get("strategies"), str):
        settings["strategies"] = [s.strip() for s in settings["strategies"].split(",")
                                  if s.strip()]
    return settings


def _validate_run_settings(settings: dict) -> list[str]:
    problems = []
    for name in settings.get("strategies", []):
        if name not in STRATEGIES:
            problems.append(
                f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}")
    target = settings.get("target")
    if target is not None and target not in TARGETS:
        problems.append(f"unknown target {target!r}; expected one of {TARGETS}")
    preset = settings.get("preset")
    if preset is not None and preset not in PRESET_NAMES:
        problems.append(f"unknown preset {preset!r}; expected one of {PRESET_NAMES}")
    for key in ("model", "trajectories"):
        path = settings.get(key)
        if path is not None and not Path(path).exists():
            problems.append(f"{key} file does not exist: {path}")
    for key in ("steps", "reps", "samples", "observations", "workers"):
        value = settings.get(key)
        if value is None:
            continue
        try:
            if int(value) < 0:
                problems.append(f"{key} must be nonnegative, got {value}")
        except (TypeError, ValueError):
            problems.append(f"{key} must be an integer, got {value!r}")
    return problems


def _require_model(settings: dict) -> tuple:
    """Ground-truth model from a file or a preset, with provenance."""
    seed = int(settings.get("seed", 0))
    if settings.get("model"):
        model = load_model(settings["model"])
        return model, {"source": str(settings["model"])}
    preset = settings.get("preset")
    if preset is None:
        raise ConfigError("either a model file or a --preset is required")
    model = preset_model(preset, seed=seed)
    return model, {"preset": preset, "seed": seed, "package": f"ctbndesign {__version__}"}


def _out_dir(settings: dict) -> Path:
    out = settings.get("out")
    if out is None:
        raise ConfigError("an output directory is required (--out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False)


def _config_snapshot(settings: dict, command: str) -> dict:
    doc = {"command": command, "package": f"ctbndesign {__version__}"}
    for key in sorted(_FLAG_KEYS | _EXTRA_KEYS):
        if key in settings and key != "out":
            doc[key] = settings[key]
    return doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(settings: dict) -> int:
    model, meta = _require_model(settings)
    out = settings.get("out", "model.json")
    path = Path(out)
    if path.is_dir():
        path = path / "model.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path, meta=meta)
    print(f"wrote {path}")
    return 0


def _experiment_config(settings: dict, model, strategy: str, target: str) -> ExperimentConfig:
    return ExperimentConfig(
        model=model,
        target=target,
        strategy=strategy,
        num_steps=int(settings.get("steps", DEFAULT_NUM_STEPS)),
        horizon=float(settings.get("horizon", DEFAULT_HORIZON)),
        repetitions=int(settings.get("reps", DEFAULT_REPETITIONS)),
        num_samples=int(settings.get("samples", DEFAULT_NUM_SAMPLES)),
        num_inner=int(settings.get("inner_samples", 10)),
        seed=int(settings.get("seed", 0)),
        max_clamped=int(settings.get("max_clamped", 2)),
        max_parents=int(settings.get("max_parents", 3)),
        prior_alpha=float(settings.get("prior_alpha", 1.0)),
        prior_beta=float(settings.get("prior_beta", 1.0)),
    )


def _run_one(task) -> list:
    config, repetition = task
    return run_sequence(config, repetition).records


def cmd_run(settings: dict) -> int:
    problems = _validate_run_settings(settings)
    if problems:
        raise ConfigError("; ".join(problems))
    model, meta = _require_model(settings)
    target = settings.get("target") or (
        "structure" if settings.get("preset") == "synthetic-structure" else "parameters")
    strategies = settings.get("strategies") or ["random"]
    workers = settings.get("workers")
    workers = int(workers) if workers is not None else (os.cpu_count() or 1)

    base = _experiment_config(settings, model, strategies[0], target)
    tasks = [(replace(base, strategy=name), rep)
             for name in strategies for rep in range(base.repetitions)]
    started = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_one, tasks))
    else:
        chunks = [_run_one(task) for task in tasks]
    records = [record for chunk in chunks for record in chunk]
    elapsed = time.perf_counter() - started

    out = _out_dir(settings)
    _write_json(out / "config.json", _config_snapshot(settings, "run"))
    save_model(model, out / "model.json", meta=meta)
    frame = records_to_frame(records).drop(columns=["wall_time"])
    _write_csv(out / "metrics.csv", frame)
    summary = aggregate(records)
    _write_csv(out / "summary.csv", summary)
    rendered = []
    for metric in ("mse", "auroc", "aupr", "entropy"):
        path = metric_curves(summary, metric, out / "figures" / f"{metric}.png")
        if path is not None:
            rendered.append(path.name)
    print(f"wrote {out}/metrics.csv ({len(records)} rows), summary.csv, "
          f"figures: {', '.join(rendered) or 'none'} [{elapsed:.1f}s]")
    return 0


def cmd_score(settings: dict) -> int:
    problems = _validate_run_settings(settings)
    if problems:
        raise ConfigError("; ".join(problems))
    model, _ = _require_model(settings)
    pairs = []
    if settings.get("trajectories"):
        try:
            pairs = load_trajectories(settings["trajectories"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(
                f"malformed trajectory document {settings['trajectories']}: {exc}") from exc
    max_parents = int(settings.get("max_parents", 3))
    posterior = structure_posterior(
        model.state_cards, pairs, max_parents=max_parents,
        alpha=float(settings.get("prior_alpha", 1.0)),
        beta=float(settings.get("prior_beta", 1.0)))
    marginals = edge_marginals(posterior)
    auroc, aupr = auroc_aupr(marginals, model.graph)
    report = {
        "num_trajectories": len(pairs),
        "max_parents": max_parents,
        "entropy": round(posterior_entropy(posterior), 12),
        "edge_marginals": [[round(float(v), 12) for v in row] for row in marginals],
        "auroc": round(float(auroc), 12),
        "aupr": round(float(aupr), 12),
        "nodes": [
            {
                "node": node,
                "candidates": [
                    {
                        "parents": list(parents),
                        "log_prob": round(float(posterior.log_probs[node][k]), 12),
                        "prob": round(float(posterior.probs(node)[k]), 12),
                    }
                    for k, parents in enumerate(posterior.candidates[node])
                ],
            }
            for node in range(len(model.state_cards))
        ],
    }
    out = settings.get("out")
    if out:
        path = Path(out)
        if path.is_dir():
            path = path / "score.json"
        _write_json(path, report)
        print(f"wrote {path}")
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_filter_demo(settings: dict) -> int:
    problems = _validate_run_settings(settings)
    if problems:
        raise ConfigError("; ".join(problems))
    model, meta = _require_model(settings)
    ctmc = amalgamate(model)
    horizon = float(settings.get("horizon", DEFAULT_HORIZON))
    seed = int(settings.get("seed", 0))
    num_obs = int(settings.get("observations", 20))
    flip_prob = float(settings.get("flip_prob", 0.1))
    steps = settings.get("integrator_steps")
    steps = int(steps) if steps is not None else None

    rng = np.random.default_rng(seed)
    if settings.get("initial") is not None:
        initial = tuple(int(x) for x in settings["initial"])
    else:
        initial = tuple(int(rng.integers(c)) for c in model.state_cards)
    path = sample_path(model, None, initial, horizon, rng)

    size = ctmc.generator.shape[0]
    if num_obs > 0:
        times = np.linspace(0.0, horizon, num_obs + 2)[1:-1]
        segments = list(path.segments())
        states = np.empty((times.size, len(model.state_cards)), dtype=int)
        seg = 0
        for j, t in enumerate(times):
            while seg < len(segments) - 1 and segments[seg][1] <= t:
                seg += 1
            states[j] = segments[seg][2]
        observations = ObservationSeries.from_noisy_states(
            model.state_cards, times, states, flip_prob, horizon)
    else:
        observations = ObservationSeries.empty(size, horizon)
    smoothed = smoothed_marginals(ctmc, initial, observations, steps=steps)

    out = _out_dir(settings)
    _write_json(out / "config.json", _config_snapshot(settings, "filter-demo"))
    marginals = pd.DataFrame(smoothed.probs,
                             columns=[f"state_{s}" for s in range(size)])
    marginals.insert(0, "time", smoothed.grid)
    _write_csv(out / "marginals.csv", marginals)
    dwell = pd.DataFrame({"state": np.arange(size), "expected_dwell": smoothed.dwell})
    _write_csv(out / "expected_dwell.csv", dwell)
    src, dst = np.nonzero(smoothed.transitions)
    transitions = pd.DataFrame({
        "from_state": src,
        "to_state": dst,
        "expected_transitions": smoothed.transitions[src, dst],
    })
    _write_csv(out / "expected_transitions.csv", transitions)
    _write_json(out / "evidence.json", {
        "log_evidence": smoothed.log_evidence,
        "num_observations": int(len(observations)),
        "flip_prob": flip_prob,
        "horizon": horizon,
        "seed": seed,
        "initial": list(initial),
        "model": meta,
    })
    smoothed_marginal_curves(smoothed.grid, smoothed.probs,
                             out / "figures" / "marginals.png",
                             observation_times=observations.times)
    print(f"wrote {out}/marginals.csv ({smoothed.grid.size} rows), "
          f"expected_dwell.csv, expected_transitions.csv, evidence.json")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--preset", choices=PRESET_NAMES,
                        help="built-in benchmark model family")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--out", help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctbndesign",
        description="Active learning of continuous-time Bayesian networks "
                    "through chosen interventions.")
    parser.add_argument("--version", action="version", version=f"ctbndesign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a ground-truth model file")
    _add_common_flags(gen)

    run = sub.add_parser("run", help="run a strategy comparison and write metrics")
    _add_common_flags(run)
    run.add_argument("--strategies",
                     help="comma-separated subset of: " + ", ".join(sorted(STRATEGIES)))
    run.add_argument("--target", choices=TARGETS, help="learning target")
    run.add_argument("-K", "--steps", type=int, help="experiments per repetition")
    run.add_argument("-R", "--reps", type=int, help="independent repetitions")
    run.add_argument("--horizon", type=float, help="trajectory horizon per experiment")
    run.add_argument("--samples", type=int, help="posterior samples per criterion")
    run.add_argument("--workers", type=int, help="parallel repetition workers")

    score = sub.add_parser("score", help="score trajectories into a posterior report")
    _add_common_flags(score)

    demo = sub.add_parser("filter-demo",
                          help="smooth a noisily observed path and export marginals")
    _add_common_flags(demo)
    demo.add_argument("--horizon", type=float, help="trajectory horizon")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "score": cmd_score,
    "filter-demo": cmd_filter_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _resolve(args)
        return _COMMANDS[args.command](settings)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
