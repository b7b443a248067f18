"""Closed-loop simulated experiments comparing intervention-design strategies.

One repetition is a sequential loop: draw a random initial state, let the
strategy pick an intervention from the candidate clamps (the selection sees
the initial state), simulate a single trajectory of fixed length from the
intervened ground truth, absorb its sufficient statistics into the posterior,
and record metrics against the truth.  Ground-truth randomness (initial
states, trajectories) and design randomness (posterior samples inside the
criteria) come from independent per-step streams, so two strategies that pick
the same intervention at the same step of the same repetition observe the
identical trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from ctbndesign.bayes import (
    RatePosterior,
    StructureBelief,
    edge_marginals,
    posterior_entropy,
)
from ctbndesign.design import (
    STRATEGIES,
    candidate_clamp_interventions,
    select_intervention,
)
from ctbndesign.model import Ctbn, Intervention
from ctbndesign.paths import Trajectory, extract_statistics, sample_path

__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "RunResult",
    "run_sequence",
    "run_comparison",
    "mse_posterior",
    "auroc_aupr",
    "records_to_frame",
    "aggregate",
]

TARGETS = ("parameters", "structure")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one strategy needs for a full repetition set."""

    model: Ctbn
    target: str
    strategy: str
    num_steps: int
    horizon: float
    repetitions: int = 1
    num_samples: int = 10
    num_inner: int = 10
    seed: int = 0
    max_clamped: int = 2
    max_parents: int = 3
    prior_alpha: float = 1.0
    prior_beta: float = 1.0
    candidates: tuple[Intervention, ...] | None = None

    def __post_init__(self) -> None:
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.num_steps < 0:
            raise ValueError("num_steps must be nonnegative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.repetitions < 1 or self.num_samples < 1 or self.num_inner < 1:
            raise ValueError("repetitions and sample counts must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.prior_alpha <= 0 or self.prior_beta <= 0:
            raise ValueError("prior hyperparameters must be positive")

    def candidate_list(self) -> list[Intervention]:
        if self.candidates is not None:
            return list(self.candidates)
        return candidate_clamp_interventions(self.model.state_cards, self.max_clamped)


@dataclass
class MetricsRecord:
    """One metrics row; step 0 describes the prior, before any experiment."""

    strategy: str
    repetition: int
    step: int
    intervention: str
    mse: float | None = None
    auroc: float | None = None
    aupr: float | None = None
    entropy: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "repetition": self.repetition,
            "step": self.step,
            "intervention": self.intervention,
            "mse": self.mse,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "entropy": self.entropy,
            "wall_time": self.wall_time,
        }


@dataclass
class RunResult:
    records: list[MetricsRecord]
    history: list[tuple[Trajectory, Intervention]]
    posterior: RatePosterior | None = None
    belief: StructureBelief | None = None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mse_posterior(posterior: RatePosterior, truth_rates: Sequence[np.ndarray]) -> float:
    """Posterior-expected squared error, averaged over off-diagonal cells.

    Per gamma cell the expectation is variance plus squared bias:
    alpha/beta^2 + (alpha/beta - truth)^2.
    """
    if len(truth_rates) != len(posterior.state_cards):
        raise ValueError("truth has the wrong number of nodes")
    total = 0.0
    count = 0
    for n, truth in enumerate(truth_rates):
        a = posterior.alphas(n)
        b = posterior.betas(n)
        if truth.shape != a.shape:
            raise ValueError(f"rate tensor shape mismatch on node {n}")
        card = a.shape[0]
        mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(a.shape, dtype=bool)
        mean = a / b
        cell = a / b ** 2 + (mean - truth) ** 2
        total += float(cell[mask].sum())
        count += int(mask.sum())
    return total / count


def auroc_aupr(marginals: np.ndarray, truth_graph: np.ndarray) -> tuple[float, float]:
    """Edge-ranking quality of marginal edge probabilities.

    Square inputs are read as (marginal matrix, adjacency) with self-edges
    dropped from the ranking; one-dimensional inputs are an already-extracted
    score/label pair.
    """
    marginals = np.asarray(marginals, dtype=float)
    truth = np.asarray(truth_graph, dtype=bool)
    if marginals.shape != truth.shape:
        raise ValueError("marginals and truth must have equal shape")
    if marginals.ndim == 2 and marginals.shape[0] == marginals.shape[1]:
        off = ~np.eye(truth.shape[0], dtype=bool)
        scores = marginals[off]
        labels = truth[off]
    elif marginals.ndim == 1:
        scores = marginals
        labels = truth
    else:
        raise ValueError("inputs must be square matrices or flat vectors")
    if labels.all() or not labels.any():
        raise ValueError("degenerate truth: need at least one present and one absent edge")
    return (float(roc_auc_score(labels, scores)),
            float(average_precision_score(labels, scores)))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _prior_state(config: ExperimentConfig):
    cards = config.model.state_cards
    if config.target == "parameters":
        posterior = RatePosterior.for_graph(cards, config.model.graph,
                                            config.prior_alpha, config.prior_beta)
        return posterior, None
    belief = StructureBelief.flat(cards, max_parents=config.max_parents,
                                  alpha=config.prior_alpha, beta=config.prior_beta)
    return None, belief


def _metrics(config: ExperimentConfig, repetition: int, step: int, label: str,
             posterior: RatePosterior | None, belief: StructureBelief | None,
             wall_time: float) -> MetricsRecord:
    record = MetricsRecord(strategy=config.strategy, repetition=repetition,
                           step=step, intervention=label, wall_time=wall_time)
    if config.target == "parameters":
        record.mse = mse_posterior(posterior, config.model.rates)
    else:
        sp = belief.structure_posterior()
        record.auroc, record.aupr = auroc_aupr(edge_marginals(sp), config.model.graph)
        record.entropy = posterior_entropy(sp)
    return record


def run_sequence(config: ExperimentConfig, repetition: int = 0) -> RunResult:
    """One repetition: prior metrics row plus one row per experiment step."""
    model = config.model
    cards = model.state_cards
    candidates = config.candidate_list()
    posterior, belief = _prior_state(config)
    history: list[tuple[Trajectory, Intervention]] = []

    start = time.perf_counter()
    records = [_metrics(config, repetition, 0, "prior", posterior, belief,
                        time.perf_counter() - start)]
    for step in range(1, config.num_steps + 1):
        start = time.perf_counter()
        truth_rng = np.random.default_rng((config.seed, repetition, step, 0))
        design_rng = np.random.default_rng((config.seed, repetition, step, 1))
        s0 = tuple(int(truth_rng.integers(c)) for c in cards)
        selection = select_intervention(
            config.strategy, candidates, rng=design_rng, target=config.target,
            posterior=posterior, belief=belief, s0=s0, horizon=config.horizon,
            num_samples=config.num_samples, num_inner=config.num_inner)
        intervention = selection.intervention
        traj = sample_path(model, intervention, s0, config.horizon, truth_rng)
        history.append((traj, intervention))
        if config.target == "parameters":
            stats = extract_statistics(traj, model.graph, intervention)
            posterior = posterior.updated(stats)
        else:
            belief = belief.updated([(traj, intervention)])
        records.append(_metrics(config, repetition, step, intervention.label(),
                                posterior, belief, time.perf_counter() - start))
    return RunResult(records=records, history=history,
                     posterior=posterior, belief=belief)


def run_comparison(config: ExperimentConfig,
                   strategies: Sequence[str] | None = None) -> list[MetricsRecord]:
    """All repetitions of each strategy under common per-step truth streams."""
    if strategies is None:
        strategies = (config.strategy,)
    records: list[MetricsRecord] = []
    for strategy in strategies:
        strat_config = replace(config, strategy=strategy)
        for repetition in range(config.repetitions):
            records.extend(run_sequence(strat_config, repetition).records)
    return records


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

_METRIC_COLUMNS = ("mse", "auroc", "aupr", "entropy")


def records_to_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    if not records:
        raise ValueError("no records")
    return pd.DataFrame([r.to_dict() for r in records])


def aggregate(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """Per (strategy, step): mean, variance, and quartiles over repetitions.

    Variance is the population variance so a single repetition aggregates to
    zero spread rather than a missing value.
    """
    frame = records_to_frame(records)
    rows = []
    for (strategy, step), group in frame.groupby(["strategy", "step"], sort=True):
        row: dict = {"strategy": strategy, "step": step,
                     "repetitions": group.shape[0]}
        for metric in _METRIC_COLUMNS:
            # sorting first makes every statistic invariant to record order
            values = np.sort(group[metric].to_numpy(dtype=float))
            if np.all(np.isnan(values)):
                continue
            row[f"{metric}_mean"] = float(np.mean(values))
            row[f"{metric}_var"] = float(np.var(values))
            row[f"{metric}_q25"] = float(np.percentile(values, 25))
            row[f"{metric}_q75"] = float(np.percentile(values, 75))
        rows.append(row)
    return pd.DataFrame(rows)
