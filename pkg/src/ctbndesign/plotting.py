"""Figure rendering for run reports.

Rendering is headless and byte-deterministic on a fixed library stack: the
writer's version stamp is stripped from the image metadata, so rerunning a
seeded command reproduces every figure bit for bit.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

__all__ = [
    "METRIC_LABELS",
    "metric_curves",
    "save_figure",
    "smoothed_marginal_curves",
]

METRIC_LABELS = {
    "mse": "posterior expected squared rate error",
    "auroc": "edge ranking AUROC",
    "aupr": "edge ranking AUPR",
    "entropy": "structure posterior entropy (nats)",
}


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def metric_curves(aggregated: pd.DataFrame, metric: str, path: str | Path) -> Path | None:
    """One mean line per strategy with its interquartile band over steps.

    Returns None when the aggregate carries no values for the metric.
    """
    mean_col = f"{metric}_mean"
    if mean_col not in aggregated.columns or aggregated[mean_col].isna().all():
        return None
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for strategy, group in aggregated.groupby("strategy", sort=True):
        group = group.sort_values("step")
        steps = group["step"].to_numpy()
        ax.plot(steps, group[mean_col].to_numpy(), label=str(strategy), linewidth=1.8)
        lo, hi = f"{metric}_q25", f"{metric}_q75"
        if lo in group.columns and hi in group.columns:
            ax.fill_between(steps, group[lo].to_numpy(), group[hi].to_numpy(), alpha=0.2)
    ax.set_xlabel("experiment step")
    ax.set_ylabel(METRIC_LABELS.get(metric, metric))
    ax.legend(title="strategy")
    fig.tight_layout()
    return save_figure(fig, path)


def smoothed_marginal_curves(grid: np.ndarray, probs: np.ndarray, path: str | Path,
                             observation_times: np.ndarray | None = None) -> Path:
    """Joint-state occupancy over time, one curve per state."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for state in range(probs.shape[1]):
        ax.plot(grid, probs[:, state], label=f"state {state}", linewidth=1.2)
    if observation_times is not None and len(observation_times):
        for t in observation_times:
            ax.axvline(float(t), color="grey", alpha=0.15, linewidth=0.8)
    ax.set_xlabel("time")
    ax.set_ylabel("smoothed probability")
    ax.set_ylim(-0.02, 1.02)
    if probs.shape[1] <= 12:
        ax.legend(ncols=2, fontsize="small")
    fig.tight_layout()
    return save_figure(fig, path)
