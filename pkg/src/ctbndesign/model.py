"""Conditional continuous-time Bayesian networks, interventions, amalgamation.

A model is a directed (possibly cyclic) graph over N nodes together with one
rate tensor per node.  Node ``n`` has a finite state space ``{0, ..., card-1}``
and tensor ``rates[n][x, x', u]`` holding the transition rate from own state
``x`` to ``x'`` while the parents sit in joint configuration ``u``.  Parent
configurations are indexed mixed-radix with the lowest parent index varying
fastest; joint states of the whole network use the same convention over all
nodes.  Diagonal entries ``rates[n][x, x, u]`` are identically zero; exit
rates are derived sums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from math import prod
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Clamp",
    "RateOverride",
    "Intervention",
    "Ctbn",
    "AmalgamatedCtmc",
    "GammaRateSpec",
    "SoftmaxRateSpec",
    "amalgamate",
    "apply_intervention",
    "candidate_parent_sets",
    "graph_from_parent_sets",
    "gamma_rates",
    "softmax_rates",
    "random_graph",
    "random_model",
    "joint_state_table",
    "joint_state_index",
    "parent_config_table",
    "flip_index_table",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "intervention_to_dict",
    "intervention_from_dict",
]


# ---------------------------------------------------------------------------
# joint-state indexing helpers (cached; all arrays returned read-only)
# ---------------------------------------------------------------------------

def _strides(cards: tuple[int, ...]) -> tuple[int, ...]:
    out, acc = [], 1
    for c in cards:
        out.append(acc)
        acc *= c
    return tuple(out)


@lru_cache(maxsize=None)
def joint_state_table(cards: tuple[int, ...]) -> np.ndarray:
    """(S, N) array: row s is the state vector of joint index s.

    Node 0 varies fastest.
    """
    n = len(cards)
    size = prod(cards)
    table = np.zeros((size, n), dtype=np.int64)
    strides = _strides(cards)
    for node, card in enumerate(cards):
        table[:, node] = (np.arange(size) // strides[node]) % card
    table.setflags(write=False)
    return table


def joint_state_index(cards: Sequence[int], states: Sequence[int]) -> int:
    strides = _strides(tuple(cards))
    return int(sum(int(x) * st for x, st in zip(states, strides)))


@lru_cache(maxsize=None)
def parent_config_table(cards: tuple[int, ...], parents: tuple[int, ...]) -> np.ndarray:
    """(S,) array mapping joint state index -> parent configuration index."""
    table = joint_state_table(cards)
    cfg = np.zeros(table.shape[0], dtype=np.int64)
    stride = 1
    for m in parents:  # parents are sorted, lowest index fastest
        cfg += stride * table[:, m]
        stride *= cards[m]
    cfg.setflags(write=False)
    return cfg


@lru_cache(maxsize=None)
def flip_index_table(cards: tuple[int, ...], node: int) -> np.ndarray:
    """(S, card) array: entry [s, v] is the joint index of s with node set to v."""
    table = joint_state_table(cards)
    strides = _strides(cards)
    base = np.arange(table.shape[0], dtype=np.int64)
    out = base[:, None] + (np.arange(cards[node])[None, :] - table[:, node][:, None]) * strides[node]
    out.setflags(write=False)
    return out


def candidate_parent_sets(num_nodes: int, node: int, max_parents: int) -> list[tuple[int, ...]]:
    """All parent sets of ``node`` up to the size bound, smallest first.

    Deterministic order: by (size, lexicographic), the empty set at index 0.
    """
    others = [m for m in range(num_nodes) if m != node]
    sets: list[tuple[int, ...]] = []
    for k in range(min(max_parents, len(others)) + 1):
        sets.extend(combinations(others, k))
    return sets


def graph_from_parent_sets(parent_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """Adjacency matrix with graph[m, n] = True when m is a parent of n."""
    n = len(parent_sets)
    graph = np.zeros((n, n), dtype=bool)
    for node, parents in enumerate(parent_sets):
        for m in parents:
            graph[m, node] = True
    return graph


# ---------------------------------------------------------------------------
# interventions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Clamp:
    """Hold a node at a fixed state; all of its transition rates become zero."""

    state: int


@dataclass(frozen=True, eq=False)
class RateOverride:
    """Replace a node's rate tensor for the duration of an experiment."""

    rates: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.rates, dtype=float)
        _check_rate_tensor(arr, "override")
        arr.setflags(write=False)
        object.__setattr__(self, "rates", arr)

    def digest(self) -> str:
        arr = np.ascontiguousarray(self.rates, dtype=np.float64)
        h = hashlib.sha256()
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
        return h.hexdigest()[:16]


Condition = Clamp | RateOverride | None

# Condition keys identify the regime a node was recorded under when pooling
# statistics: 0 means untouched, clamps key by state, overrides by digest.
ConditionKey = "int | tuple"


@dataclass(frozen=True, eq=False)
class Intervention:
    """Per-node experimental conditions; ``None`` entries are left untouched."""

    conditions: tuple[Condition, ...]

    @classmethod
    def none(cls, num_nodes: int) -> "Intervention":
        return cls(conditions=(None,) * num_nodes)

    @classmethod
    def clamp(cls, num_nodes: int, assignments: dict[int, int]) -> "Intervention":
        conds: list[Condition] = [None] * num_nodes
        for node, state in assignments.items():
            conds[node] = Clamp(int(state))
        return cls(conditions=tuple(conds))

    @property
    def num_nodes(self) -> int:
        return len(self.conditions)

    @property
    def free_nodes(self) -> tuple[int, ...]:
        return tuple(n for n, c in enumerate(self.conditions) if c is None)

    @property
    def clamped(self) -> dict[int, int]:
        return {n: c.state for n, c in enumerate(self.conditions) if isinstance(c, Clamp)}

    def is_noop(self) -> bool:
        return all(c is None for c in self.conditions)

    def condition_key(self, node: int):
        cond = self.conditions[node]
        if cond is None:
            return 0
        if isinstance(cond, Clamp):
            return ("clamp", cond.state)
        return ("override", cond.digest())

    def force_state(self, states: Sequence[int]) -> tuple[int, ...]:
        """Override clamped coordinates of an initial state."""
        out = list(int(x) for x in states)
        for node, cond in enumerate(self.conditions):
            if isinstance(cond, Clamp):
                out[node] = cond.state
        return tuple(out)

    def label(self) -> str:
        if self.is_noop():
            return "observational"
        parts = []
        for node, cond in enumerate(self.conditions):
            if isinstance(cond, Clamp):
                parts.append(f"X{node}={cond.state}")
            elif isinstance(cond, RateOverride):
                parts.append(f"X{node}~override")
        return "do(" + ",".join(parts) + ")"

    def _key(self) -> tuple:
        parts: list = []
        for cond in self.conditions:
            if cond is None:
                parts.append(0)
            elif isinstance(cond, Clamp):
                parts.append((1, cond.state))
            else:
                parts.append((2, cond.digest()))
        return tuple(parts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Intervention):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())


# ---------------------------------------------------------------------------
# the model itself
# ---------------------------------------------------------------------------

def _check_rate_tensor(arr: np.ndarray, where: str) -> None:
    if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{where}: rate tensor must have shape (card, card, configs), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{where}: rates must be finite")
    off = arr.copy()
    idx = np.arange(arr.shape[0])
    off[idx, idx, :] = 0.0
    if np.any(off < 0):
        raise ValueError(f"{where}: negative transition rate")
    if np.any(arr[idx, idx, :] != 0.0):
        raise ValueError(f"{where}: diagonal entries must be stored as zero")


@dataclass(frozen=True, eq=False)
class Ctbn:
    """A conditional CTBN: cardinalities, adjacency, per-node rate tensors.

    ``graph[m, n]`` is True when m is a parent of n.  Instances are immutable;
    arrays are stored read-only.
    """

    state_cards: tuple[int, ...]
    graph: np.ndarray
    rates: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        cards = tuple(int(c) for c in self.state_cards)
        if any(c < 2 for c in cards):
            raise ValueError("state cardinalities must be at least 2")
        n = len(cards)
        graph = np.array(self.graph, dtype=bool)
        if graph.shape != (n, n):
            raise ValueError(f"graph must be ({n}, {n}), got {graph.shape}")
        if np.any(np.diag(graph)):
            raise ValueError("self-loops are not allowed")
        rates = tuple(np.array(r, dtype=float) for r in self.rates)
        if len(rates) != n:
            raise ValueError("one rate tensor per node required")
        for node, arr in enumerate(rates):
            _check_rate_tensor(arr, f"node {node}")
            expected = (cards[node], cards[node], self._config_count(cards, graph, node))
            if arr.shape != expected:
                raise ValueError(f"node {node}: tensor shape {arr.shape}, expected {expected}")
            arr.setflags(write=False)
        graph.setflags(write=False)
        object.__setattr__(self, "state_cards", cards)
        object.__setattr__(self, "graph", graph)
        object.__setattr__(self, "rates", rates)

    @staticmethod
    def _config_count(cards: tuple[int, ...], graph: np.ndarray, node: int) -> int:
        return prod(int(cards[m]) for m in range(len(cards)) if graph[m, node])

    @property
    def num_nodes(self) -> int:
        return len(self.state_cards)

    @property
    def num_joint_states(self) -> int:
        return prod(self.state_cards)

    def parents(self, node: int) -> tuple[int, ...]:
        return tuple(int(m) for m in np.flatnonzero(self.graph[:, node]))

    def num_configs(self, node: int) -> int:
        return self.rates[node].shape[2]

    def parent_config_index(self, node: int, states: Sequence[int]) -> int:
        idx, stride = 0, 1
        for m in self.parents(node):
            idx += stride * int(states[m])
            stride *= self.state_cards[m]
        return idx

    def exit_rates(self, node: int) -> np.ndarray:
        """(card, configs) total rate of leaving each own state."""
        return self.rates[node].sum(axis=1)

    def with_rates(self, rates: Iterable[np.ndarray]) -> "Ctbn":
        return Ctbn(self.state_cards, self.graph, tuple(rates))

    def max_exit_rate(self) -> float:
        return float(max(r.sum(axis=1).max() for r in self.rates))


def apply_intervention(model: Ctbn, intervention: Intervention | None) -> Ctbn:
    """Return the model with clamped nodes silenced and overrides substituted."""
    if intervention is None or intervention.is_noop():
        return model
    if intervention.num_nodes != model.num_nodes:
        raise ValueError("intervention node count does not match the model")
    new_rates = []
    for node, arr in enumerate(model.rates):
        cond = intervention.conditions[node]
        if cond is None:
            new_rates.append(arr)
        elif isinstance(cond, Clamp):
            if not 0 <= cond.state < model.state_cards[node]:
                raise ValueError(f"clamp state {cond.state} out of range for node {node}")
            new_rates.append(np.zeros_like(arr))
        else:
            if cond.rates.shape != arr.shape:
                raise ValueError(f"override for node {node} has shape {cond.rates.shape}, expected {arr.shape}")
            new_rates.append(np.array(cond.rates))
    return model.with_rates(new_rates)


@dataclass(frozen=True, eq=False)
class AmalgamatedCtmc:
    """Flat CTMC over the joint state space; rows of the generator sum to zero."""

    state_cards: tuple[int, ...]
    generator: np.ndarray

    def __post_init__(self) -> None:
        gen = np.array(self.generator, dtype=float)
        gen.setflags(write=False)
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "state_cards", tuple(int(c) for c in self.state_cards))

    @property
    def num_states(self) -> int:
        return self.generator.shape[0]

    def max_exit_rate(self) -> float:
        return float(np.max(-np.diag(self.generator), initial=0.0))


def amalgamate(model: Ctbn, intervention: Intervention | None = None) -> AmalgamatedCtmc:
    """Build the joint generator; only single-node changes carry rate.

    W[s, s'] is the intervened rate of the unique differing node when s and s'
    differ in exactly one coordinate, zero otherwise; diagonals close the rows.
    """
    eff = apply_intervention(model, intervention)
    cards = eff.state_cards
    size = eff.num_joint_states
    table = joint_state_table(cards)
    w = np.zeros((size, size))
    rows = np.arange(size)
    for node in range(eff.num_nodes):
        cfg = parent_config_table(cards, eff.parents(node))
        flips = flip_index_table(cards, node)
        own = table[:, node]
        for target in range(cards[node]):
            mask = own != target
            w[rows[mask], flips[mask, target]] = eff.rates[node][own[mask], target, cfg[mask]]
    w[rows, rows] = -w.sum(axis=1)
    return AmalgamatedCtmc(cards, w)


# ---------------------------------------------------------------------------
# random ground-truth generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaRateSpec:
    """Gamma-distributed cell rates; fast and slow nodes get different shapes."""

    fast_nodes: tuple[int, ...]
    alpha_fast: float = 5.0
    alpha_slow: float = 0.2
    beta_fast: float = 1.0
    beta_slow: float = 1.0


@dataclass(frozen=True)
class SoftmaxRateSpec:
    """Deterministic rates: exit rate of state x grows with parents matching x.

    For node n with parents in configuration u the exit rate from x to any
    x' != x is ``rate * softmax_x(sharpness * #{parents in state x})``.
    """

    fast_nodes: tuple[int, ...]
    sharpness: float = 3.0
    rate_fast: float = 5.0
    rate_slow: float = 0.2


def _parent_state_grid(cards: tuple[int, ...], parents: tuple[int, ...]) -> np.ndarray:
    """(configs, len(parents)) table of parent state vectors, lowest index fastest."""
    pcards = tuple(cards[m] for m in parents)
    count = prod(pcards)
    grid = np.zeros((count, len(parents)), dtype=np.int64)
    stride = 1
    for j, c in enumerate(pcards):
        grid[:, j] = (np.arange(count) // stride) % c
        stride *= c
    return grid


def gamma_rates(cards: Sequence[int], graph: np.ndarray, spec: GammaRateSpec,
                rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    cards = tuple(int(c) for c in cards)
    out = []
    for node in range(len(cards)):
        parents = tuple(int(m) for m in np.flatnonzero(np.asarray(graph, dtype=bool)[:, node]))
        configs = prod(cards[m] for m in parents) if parents else 1
        fast = node in spec.fast_nodes
        alpha = spec.alpha_fast if fast else spec.alpha_slow
        beta = spec.beta_fast if fast else spec.beta_slow
        arr = rng.gamma(shape=alpha, scale=1.0 / beta, size=(cards[node], cards[node], configs))
        idx = np.arange(cards[node])
        arr[idx, idx, :] = 0.0
        out.append(arr)
    return tuple(out)


def softmax_rates(cards: Sequence[int], graph: np.ndarray,
                  spec: SoftmaxRateSpec) -> tuple[np.ndarray, ...]:
    cards = tuple(int(c) for c in cards)
    out = []
    for node in range(len(cards)):
        parents = tuple(int(m) for m in np.flatnonzero(np.asarray(graph, dtype=bool)[:, node]))
        grid = _parent_state_grid(cards, parents)
        card = cards[node]
        rate = spec.rate_fast if node in spec.fast_nodes else spec.rate_slow
        arr = np.zeros((card, card, grid.shape[0]))
        for cfg in range(grid.shape[0]):
            matches = np.array([(grid[cfg] == x).sum() for x in range(card)], dtype=float)
            logits = spec.sharpness * matches
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for x in range(card):
                for xp in range(card):
                    if xp != x:
                        arr[x, xp, cfg] = rate * weights[x]
        out.append(arr)
    return tuple(out)


def random_graph(num_nodes: int, rng: np.random.Generator, edge_prob: float = 0.5,
                 max_parents: int = 3) -> np.ndarray:
    """Independent directed edges at ``edge_prob``, trimmed to the parent bound."""
    graph = np.zeros((num_nodes, num_nodes), dtype=bool)
    for node in range(num_nodes):
        others = [m for m in range(num_nodes) if m != node]
        chosen = [m for m in others if rng.random() < edge_prob]
        if len(chosen) > max_parents:
            chosen = sorted(rng.choice(chosen, size=max_parents, replace=False).tolist())
        graph[chosen, node] = True
    return graph


def random_model(cards: Sequence[int], rng: np.random.Generator,
                 spec: GammaRateSpec | SoftmaxRateSpec,
                 graph: np.ndarray | None = None,
                 edge_prob: float = 0.5, max_parents: int = 3) -> Ctbn:
    """Draw a ground-truth model; the graph is drawn unless supplied."""
    cards = tuple(int(c) for c in cards)
    if graph is None:
        graph = random_graph(len(cards), rng, edge_prob=edge_prob, max_parents=max_parents)
    if isinstance(spec, GammaRateSpec):
        rates = gamma_rates(cards, graph, spec, rng)
    else:
        rates = softmax_rates(cards, graph, spec)
    return Ctbn(cards, graph, rates)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: Ctbn, meta: dict | None = None) -> dict:
    doc = {
        "state_cards": list(model.state_cards),
        "edges": sorted([int(m), int(n)] for m, n in zip(*np.nonzero(model.graph))),
        "rates": [r.tolist() for r in model.rates],
    }
    if meta:
        doc["meta"] = meta
    return doc


def model_from_dict(doc: dict) -> Ctbn:
    cards = tuple(int(c) for c in doc["state_cards"])
    graph = np.zeros((len(cards), len(cards)), dtype=bool)
    for m, n in doc.get("edges", []):
        graph[int(m), int(n)] = True
    rates = tuple(np.array(r, dtype=float) for r in doc["rates"])
    return Ctbn(cards, graph, rates)


def save_model(model: Ctbn, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, meta), indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> Ctbn:
    return model_from_dict(json.loads(Path(path).read_text()))


def intervention_to_dict(intervention: Intervention) -> dict:
    clamps = {str(n): int(x) for n, x in intervention.clamped.items()}
    overrides = {
        str(n): cond.rates.tolist()
        for n, cond in enumerate(intervention.conditions)
        if isinstance(cond, RateOverride)
    }
    return {"num_nodes": intervention.num_nodes, "clamps": clamps, "overrides": overrides}


def intervention_from_dict(doc: dict) -> Intervention:
    num_nodes = int(doc["num_nodes"])
    conds: list[Condition] = [None] * num_nodes
    for key, state in doc.get("clamps", {}).items():
        conds[int(key)] = Clamp(int(state))
    for key, rates in doc.get("overrides", {}).items():
        conds[int(key)] = RateOverride(np.array(rates, dtype=float))
    return Intervention(conditions=tuple(conds))
