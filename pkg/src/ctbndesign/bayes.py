"""Conjugate inference over rates and exhaustive posteriors over parent sets.

Rates carry independent gamma laws per transition cell; trajectory statistics
update them by plain addition (counts into the shape, dwell times into the
rate parameter).  Only condition-0 statistics touch the posterior: cells of a
clamped or overridden node say nothing about the unintervened mechanism.

Structures are handled per node.  Each node has a categorical over candidate
parent sets scored by the closed-form marginal likelihood of its re-extracted
statistics; the joint posterior is the product over nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from ctbndesign.engine import NodeStats, graph_parent_sets
from ctbndesign.model import (
    Ctbn,
    Intervention,
    candidate_parent_sets,
    graph_from_parent_sets,
)
from ctbndesign.paths import SufficientStats, Trajectory, node_statistics

__all__ = [
    "RatePosterior",
    "StructurePosterior",
    "StructureBelief",
    "path_log_likelihood",
    "update_rate_posterior",
    "gamma_kl",
    "structure_marginal_log_likelihood",
    "structure_posterior",
    "posterior_entropy",
    "edge_marginals",
    "sample_rate_posterior",
    "rate_posterior_to_dict",
    "rate_posterior_from_dict",
    "structure_posterior_to_dict",
    "structure_posterior_from_dict",
    "save_posterior",
    "load_posterior",
]


def _offdiag_mask(card: int, configs: int) -> np.ndarray:
    return ~np.eye(card, dtype=bool)[:, :, None] & np.ones((card, card, configs), dtype=bool)


def _config_count(cards: tuple[int, ...], parents: tuple[int, ...]) -> int:
    return prod(cards[m] for m in parents) if parents else 1


# ---------------------------------------------------------------------------
# rate posterior
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RatePosterior:
    """Independent gamma laws over every off-diagonal rate cell.

    The prior (scalars) and the accumulated statistics are kept apart so that
    pooled and sequential updates produce bit-identical hyperparameters: both
    routes sum the statistics in the same order before adding the prior.
    """

    state_cards: tuple[int, ...]
    parent_sets: tuple[tuple[int, ...], ...]
    prior_alpha: float
    prior_beta: float
    counts: tuple[NodeStats, ...]

    def __post_init__(self) -> None:
        if self.prior_alpha <= 0 or self.prior_beta <= 0:
            raise ValueError("prior hyperparameters must be positive")

    @classmethod
    def flat(cls, state_cards, parent_sets, alpha: float = 1.0,
             beta: float = 1.0) -> "RatePosterior":
        cards = tuple(int(c) for c in state_cards)
        psets = tuple(tuple(sorted(int(m) for m in p)) for p in parent_sets)
        counts = tuple(NodeStats.zero(cards[n], _config_count(cards, psets[n]))
                       for n in range(len(cards)))
        return cls(cards, psets, float(alpha), float(beta), counts)

    @classmethod
    def for_graph(cls, state_cards, graph: np.ndarray, alpha: float = 1.0,
                  beta: float = 1.0) -> "RatePosterior":
        return cls.flat(state_cards, graph_parent_sets(graph), alpha, beta)

    def alphas(self, node: int) -> np.ndarray:
        """Shape parameters, shape (card, card, configs); diagonal meaningless."""
        return self.prior_alpha + self.counts[node].trans

    def betas(self, node: int) -> np.ndarray:
        """Rate parameters, shape (card, card, configs); constant over targets."""
        card = self.state_cards[node]
        b = self.prior_beta + self.counts[node].dwell[:, None, :]
        return np.broadcast_to(b, (card, card, b.shape[2])).copy()

    def updated(self, stats: SufficientStats) -> "RatePosterior":
        """Absorb the condition-0 slices of the statistics; returns a new value."""
        if stats.state_cards != self.state_cards or stats.parent_sets != self.parent_sets:
            raise ValueError("statistics shape does not match the posterior")
        merged = []
        for n in range(len(self.state_cards)):
            ns = self.counts[n].copy()
            block = stats.per_node[n].get(0)
            if block is not None:
                ns.add(block)
            merged.append(ns)
        return RatePosterior(self.state_cards, self.parent_sets,
                             self.prior_alpha, self.prior_beta, tuple(merged))

    def mean_rates(self) -> tuple[np.ndarray, ...]:
        out = []
        for n, card in enumerate(self.state_cards):
            lam = self.alphas(n) / self.betas(n)
            lam[np.arange(card), np.arange(card), :] = 0.0
            out.append(lam)
        return tuple(out)

    def sample_rates(self, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        out = []
        for n, card in enumerate(self.state_cards):
            lam = rng.gamma(shape=self.alphas(n), scale=1.0 / self.betas(n))
            lam[np.arange(card), np.arange(card), :] = 0.0
            out.append(lam)
        return tuple(out)

    def sample_ctbn(self, rng: np.random.Generator) -> Ctbn:
        graph = graph_from_parent_sets(self.parent_sets)
        return Ctbn(self.state_cards, graph, self.sample_rates(rng))

    def mean_ctbn(self) -> Ctbn:
        graph = graph_from_parent_sets(self.parent_sets)
        return Ctbn(self.state_cards, graph, self.mean_rates())


def update_rate_posterior(prior: RatePosterior, stats: SufficientStats) -> RatePosterior:
    return prior.updated(stats)


def sample_rate_posterior(posterior: RatePosterior,
                          rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    return posterior.sample_rates(rng)


def gamma_kl(alpha_q, beta_q, alpha_p, beta_p) -> np.ndarray:
    """Elementwise KL(Gamma(aq, bq) || Gamma(ap, bp)), shape-rate convention."""
    aq, bq = np.asarray(alpha_q, dtype=float), np.asarray(beta_q, dtype=float)
    ap, bp = np.asarray(alpha_p, dtype=float), np.asarray(beta_p, dtype=float)
    return ((aq - ap) * digamma(aq) - gammaln(aq) + gammaln(ap)
            + ap * (np.log(bq) - np.log(bp)) + aq * (bp - bq) / bq)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def _block_log_likelihood(block: NodeStats, rates: np.ndarray) -> float:
    card = block.trans.shape[0]
    mask = _offdiag_mask(card, block.trans.shape[2])
    lam = rates
    counted = mask & (block.trans > 0)
    if np.any(counted & (lam <= 0.0)):
        return float("-inf")
    ll = float(np.sum(block.trans[counted] * np.log(lam[counted])))
    ll -= float(np.sum((block.dwell[:, None, :] * lam)[mask]))
    return ll


def path_log_likelihood(stats: SufficientStats, model: Ctbn) -> float:
    """Σ over nodes, conditions and cells of M log Λ − T Λ.

    Condition-0 blocks use the model's own rates, clamp blocks a zero tensor
    (clamped nodes never move, so their contribution vanishes), and override
    blocks the override tensor recorded alongside the statistics.
    """
    if stats.state_cards != model.state_cards:
        raise ValueError("state cardinalities do not match")
    if stats.parent_sets != graph_parent_sets(model.graph):
        raise ValueError("statistics were extracted under a different graph")
    total = 0.0
    for n in range(len(model.state_cards)):
        for key, block in stats.per_node[n].items():
            if key == 0:
                rates = model.rates[n]
            elif key[0] == "clamp":
                continue
            else:
                rates = stats.override_rates[(n, key)]
            total += _block_log_likelihood(block, rates)
    return total


# ---------------------------------------------------------------------------
# structure scoring
# ---------------------------------------------------------------------------

def structure_marginal_log_likelihood(stats: NodeStats, alpha: float = 1.0,
                                      beta: float = 1.0) -> float:
    """Closed-form log-marginal of one node's statistics under gamma priors.

    Includes the prior normalizer so scores are comparable across parent sets
    of different cardinality; zero statistics score exactly 0.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("hyperparameters must be positive")
    card, _, configs = stats.trans.shape
    mask = _offdiag_mask(card, configs)
    a_post = alpha + stats.trans[mask]
    b_post = beta + np.broadcast_to(stats.dwell[:, None, :], stats.trans.shape)[mask]
    post = np.sum(gammaln(a_post) - a_post * np.log(b_post))
    prior = mask.sum() * (gammaln(alpha) - alpha * np.log(beta))
    return float(post - prior)


def _candidate_tables(state_cards, candidates, pairs) -> list[list[NodeStats]]:
    """Pooled condition-0 statistics per (node, candidate parent set)."""
    cards = tuple(state_cards)
    tables = [[NodeStats.zero(cards[n], _config_count(cards, p)) for p in candidates[n]]
              for n in range(len(cards))]
    for traj, iv in pairs:
        if tuple(traj.state_cards) != cards:
            raise ValueError("trajectory cardinalities do not match")
        for n in range(len(cards)):
            if iv is not None and iv.condition_key(n) != 0:
                continue
            for k, parents in enumerate(candidates[n]):
                tables[n][k].add(node_statistics(traj, n, parents, iv))
    return tables


@dataclass(frozen=True, eq=False)
class StructurePosterior:
    """Per-node categoricals over candidate parent sets (product posterior)."""

    state_cards: tuple[int, ...]
    candidates: tuple[tuple[tuple[int, ...], ...], ...]
    log_probs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        for lp in self.log_probs:
            if abs(np.exp(logsumexp(lp)) - 1.0) > 1e-10:
                raise ValueError("per-node log-probabilities must normalize")

    @property
    def num_nodes(self) -> int:
        return len(self.state_cards)

    def probs(self, node: int) -> np.ndarray:
        return np.exp(self.log_probs[node])

    def prob(self, node: int, parents) -> float:
        key = tuple(sorted(int(m) for m in parents))
        return float(self.probs(node)[self.candidates[node].index(key)])

    def entropy(self) -> float:
        total = 0.0
        for lp in self.log_probs:
            p = np.exp(lp)
            total -= float(np.sum(p * np.where(p > 0, lp, 0.0)))
        return total

    def edge_marginals(self) -> np.ndarray:
        n = self.num_nodes
        out = np.zeros((n, n))
        for node in range(n):
            p = self.probs(node)
            for k, parents in enumerate(self.candidates[node]):
                for m in parents:
                    out[m, node] += p[k]
        return out

    def sample_graph(self, rng: np.random.Generator) -> np.ndarray:
        chosen = [self.candidates[n][rng.choice(len(self.candidates[n]), p=self.probs(n))]
                  for n in range(self.num_nodes)]
        return graph_from_parent_sets(chosen)

    def map_graph(self) -> np.ndarray:
        chosen = [self.candidates[n][int(np.argmax(self.log_probs[n]))]
                  for n in range(self.num_nodes)]
        return graph_from_parent_sets(chosen)


def structure_posterior(state_cards, pairs: Sequence[tuple[Trajectory, Intervention | None]],
                        max_parents: int = 3, alpha: float = 1.0, beta: float = 1.0,
                        log_prior=None) -> StructurePosterior:
    """Exhaustively score candidate parent sets from raw trajectories.

    ``log_prior`` maps (node, candidate index) to an unnormalized log prior
    weight; the default is uniform over parent sets per node.
    """
    cards = tuple(int(c) for c in state_cards)
    n_nodes = len(cards)
    candidates = tuple(tuple(candidate_parent_sets(n_nodes, n, max_parents))
                       for n in range(n_nodes))
    tables = _candidate_tables(cards, candidates, pairs)
    log_probs = []
    for n in range(n_nodes):
        scores = np.array([structure_marginal_log_likelihood(tables[n][k], alpha, beta)
                           for k in range(len(candidates[n]))])
        if log_prior is not None:
            scores = scores + np.array([log_prior(n, k) for k in range(len(candidates[n]))])
        log_probs.append(scores - logsumexp(scores))
    return StructurePosterior(cards, candidates, tuple(log_probs))


def posterior_entropy(posterior: StructurePosterior) -> float:
    return posterior.entropy()


def edge_marginals(posterior: StructurePosterior) -> np.ndarray:
    return posterior.edge_marginals()


# ---------------------------------------------------------------------------
# joint working belief
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StructureBelief:
    """Pooled per-candidate statistics driving both posteriors at once.

    Holds one statistics table per (node, candidate parent set); adding a
    trajectory updates every candidate of every free node.  The structure
    posterior and any graph-conditional rate posterior are cheap reads.
    A single-candidate-per-node belief expresses a known structure.
    """

    state_cards: tuple[int, ...]
    candidates: tuple[tuple[tuple[int, ...], ...], ...]
    prior_alpha: float
    prior_beta: float
    tables: tuple[tuple[NodeStats, ...], ...]

    @classmethod
    def flat(cls, state_cards, max_parents: int = 3, alpha: float = 1.0,
             beta: float = 1.0) -> "StructureBelief":
        cards = tuple(int(c) for c in state_cards)
        candidates = tuple(tuple(candidate_parent_sets(len(cards), n, max_parents))
                           for n in range(len(cards)))
        return cls._empty(cards, candidates, alpha, beta)

    @classmethod
    def known_graph(cls, state_cards, graph: np.ndarray, alpha: float = 1.0,
                    beta: float = 1.0) -> "StructureBelief":
        cards = tuple(int(c) for c in state_cards)
        candidates = tuple((p,) for p in graph_parent_sets(graph))
        return cls._empty(cards, candidates, alpha, beta)

    @classmethod
    def _empty(cls, cards, candidates, alpha, beta) -> "StructureBelief":
        tables = tuple(
            tuple(NodeStats.zero(cards[n], _config_count(cards, p)) for p in candidates[n])
            for n in range(len(cards)))
        return cls(cards, candidates, float(alpha), float(beta), tables)

    def updated(self, pairs: Sequence[tuple[Trajectory, Intervention | None]]) -> "StructureBelief":
        tables = [[ns.copy() for ns in row] for row in self.tables]
        for traj, iv in pairs:
            if tuple(traj.state_cards) != self.state_cards:
                raise ValueError("trajectory cardinalities do not match")
            for n in range(len(self.state_cards)):
                if iv is not None and iv.condition_key(n) != 0:
                    continue
                for k, parents in enumerate(self.candidates[n]):
                    tables[n][k].add(node_statistics(traj, n, parents, iv))
        return StructureBelief(self.state_cards, self.candidates, self.prior_alpha,
                               self.prior_beta, tuple(tuple(row) for row in tables))

    def structure_posterior(self, log_prior=None) -> StructurePosterior:
        log_probs = []
        for n in range(len(self.state_cards)):
            scores = np.array([
                structure_marginal_log_likelihood(ns, self.prior_alpha, self.prior_beta)
                for ns in self.tables[n]])
            if log_prior is not None:
                scores = scores + np.array([log_prior(n, k) for k in range(len(scores))])
            log_probs.append(scores - logsumexp(scores))
        return StructurePosterior(self.state_cards, self.candidates, tuple(log_probs))

    def node_hyperparameters(self, node: int, parents) -> tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) arrays of the node's gamma law under one parent set."""
        key = tuple(sorted(int(m) for m in parents))
        ns = self.tables[node][self.candidates[node].index(key)]
        return (self.prior_alpha + ns.trans,
                self.prior_beta + ns.dwell[:, None, :])

    def rate_posterior(self, parent_sets) -> RatePosterior:
        """Graph-conditional rate posterior assembled from the pooled tables."""
        psets = tuple(tuple(sorted(int(m) for m in p)) for p in parent_sets)
        counts = []
        for n in range(len(self.state_cards)):
            ns = self.tables[n][self.candidates[n].index(psets[n])]
            counts.append(ns.copy())
        return RatePosterior(self.state_cards, psets, self.prior_alpha,
                             self.prior_beta, tuple(counts))

    def sample_ctbn(self, rng: np.random.Generator,
                    posterior: StructurePosterior | None = None) -> Ctbn:
        """Draw a graph from the structure posterior, then rates given it."""
        if posterior is None:
            posterior = self.structure_posterior()
        graph = posterior.sample_graph(rng)
        return self.rate_posterior(graph_parent_sets(graph)).sample_ctbn(rng)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def rate_posterior_to_dict(posterior: RatePosterior) -> dict:
    return {
        "kind": "rate_posterior",
        "state_cards": list(posterior.state_cards),
        "parent_sets": [list(p) for p in posterior.parent_sets],
        "prior_alpha": posterior.prior_alpha,
        "prior_beta": posterior.prior_beta,
        "counts": [{"trans": ns.trans.tolist(), "dwell": ns.dwell.tolist()}
                   for ns in posterior.counts],
    }


def rate_posterior_from_dict(doc: dict) -> RatePosterior:
    counts = tuple(NodeStats(np.array(item["trans"], dtype=float),
                             np.array(item["dwell"], dtype=float))
                   for item in doc["counts"])
    return RatePosterior(tuple(doc["state_cards"]),
                         tuple(tuple(p) for p in doc["parent_sets"]),
                         float(doc["prior_alpha"]), float(doc["prior_beta"]), counts)


def structure_posterior_to_dict(posterior: StructurePosterior) -> dict:
    return {
        "kind": "structure_posterior",
        "state_cards": list(posterior.state_cards),
        "candidates": [[list(p) for p in row] for row in posterior.candidates],
        "log_probs": [lp.tolist() for lp in posterior.log_probs],
    }


def structure_posterior_from_dict(doc: dict) -> StructurePosterior:
    return StructurePosterior(
        tuple(doc["state_cards"]),
        tuple(tuple(tuple(p) for p in row) for row in doc["candidates"]),
        tuple(np.array(lp, dtype=float) for lp in doc["log_probs"]))


def save_posterior(path: str | Path, posterior) -> None:
    if isinstance(posterior, RatePosterior):
        doc = rate_posterior_to_dict(posterior)
    elif isinstance(posterior, StructurePosterior):
        doc = structure_posterior_to_dict(posterior)
    else:
        raise TypeError("unsupported posterior type")
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_posterior(path: str | Path):
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") == "rate_posterior":
        return rate_posterior_from_dict(doc)
    if doc.get("kind") == "structure_posterior":
        return structure_posterior_from_dict(doc)
    raise ValueError("unrecognized posterior document")
