"""Exact jump-process simulation and sufficient statistics of trajectories.

Statistics are kept per node and per experimental condition: a node records
its transition counts M(x, x', u) and dwell times T(x, u) under the condition
key it was exposed to (0 when untouched, a clamp or override key otherwise).
Pooling across experiments is cell-wise addition within matching keys; only
the key-0 slices carry evidence about the unintervened mechanism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np

from ctbndesign.engine import NodeStats, graph_parent_sets
from ctbndesign.model import (
    Ctbn,
    Intervention,
    amalgamate,
    intervention_from_dict,
    intervention_to_dict,
    joint_state_index,
    joint_state_table,
    parent_config_table,
)

__all__ = [
    "Trajectory",
    "SufficientStats",
    "sample_path",
    "extract_statistics",
    "node_statistics",
    "pool",
    "simulate_statistics",
    "trajectory_to_dict",
    "trajectory_from_dict",
    "save_trajectories",
    "load_trajectories",
]


@dataclass
class Trajectory:
    """Piecewise-constant path: initial state, (time, node, new state) events."""

    state_cards: tuple[int, ...]
    initial: tuple[int, ...]
    events: list[tuple[float, int, int]]
    horizon: float

    def __post_init__(self) -> None:
        cards = tuple(int(c) for c in self.state_cards)
        object.__setattr__(self, "state_cards", cards)
        init = tuple(int(x) for x in self.initial)
        if len(init) != len(cards) or any(not 0 <= x < c for x, c in zip(init, cards)):
            raise ValueError("initial state out of range")
        object.__setattr__(self, "initial", init)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        state = list(init)
        last = 0.0
        for t, node, new in self.events:
            if not last < t < self.horizon:
                raise ValueError("event times must be strictly increasing within the horizon")
            if not 0 <= node < len(cards):
                raise ValueError("event node out of range")
            if not 0 <= new < cards[node] or new == state[node]:
                raise ValueError("event must change the node's state to a valid value")
            state[node] = new
            last = t

    def segments(self):
        """Yield (t0, t1, state) over the constant pieces of the path."""
        state = list(self.initial)
        t0 = 0.0
        for t, node, new in self.events:
            yield t0, t, tuple(state)
            state[node] = new
            t0 = t
        yield t0, self.horizon, tuple(state)

    @property
    def num_transitions(self) -> int:
        return len(self.events)


def _jump_tables(model: Ctbn, intervention: Intervention | None):
    """Per joint state: target indices, their rates, and (node, new state) labels."""
    ctmc = amalgamate(model, intervention)
    gen = ctmc.generator
    table = joint_state_table(model.state_cards)
    size = gen.shape[0]
    targets, rates, labels = [], [], []
    for s in range(size):
        cols = np.flatnonzero(gen[s] > 0.0)
        cols = cols[cols != s]
        targets.append(cols)
        rates.append(np.cumsum(gen[s, cols]))
        labs = []
        for t in cols:
            (node,) = np.flatnonzero(table[s] != table[t])
            labs.append((int(node), int(table[t, node])))
        labels.append(labs)
    return gen, targets, rates, labels


def sample_path(model: Ctbn, intervention: Intervention | None, initial,
                horizon: float, rng: np.random.Generator) -> Trajectory:
    """Exact simulation of the intervened chain from a forced initial state.

    Clamped coordinates of ``initial`` are overridden to their clamp states.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    init = tuple(int(x) for x in initial)
    if intervention is not None:
        init = intervention.force_state(init)
    gen, targets, cumrates, labels = _jump_tables(model, intervention)
    s = joint_state_index(model.state_cards, init)
    t = 0.0
    events: list[tuple[float, int, int]] = []
    while True:
        exit_rate = -gen[s, s]
        if exit_rate <= 0.0:
            break
        t += rng.exponential(1.0 / exit_rate)
        if t >= horizon:
            break
        u = rng.random() * exit_rate
        j = int(np.searchsorted(cumrates[s], u, side="right"))
        j = min(j, len(targets[s]) - 1)
        node, new = labels[s][j]
        events.append((t, node, new))
        s = targets[s][j]
    return Trajectory(model.state_cards, init, events, horizon)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class SufficientStats:
    """Condition-keyed per-node statistics extracted under a hypothesis graph."""

    state_cards: tuple[int, ...]
    parent_sets: tuple[tuple[int, ...], ...]
    per_node: list[dict]
    override_rates: dict = field(default_factory=dict)

    def observational(self, node: int) -> NodeStats:
        """The key-0 slice, a zero block when the node was never free."""
        stats = self.per_node[node].get(0)
        if stats is None:
            card = self.state_cards[node]
            configs = prod(self.state_cards[m] for m in self.parent_sets[node]) if self.parent_sets[node] else 1
            return NodeStats.zero(card, configs)
        return stats


def _config_count(cards: tuple[int, ...], parents: tuple[int, ...]) -> int:
    return prod(cards[m] for m in parents) if parents else 1


def extract_statistics(traj: Trajectory, graph: np.ndarray,
                       intervention: Intervention | None = None) -> SufficientStats:
    """Count transitions and dwell times under the given hypothesis graph.

    Parent configurations at a jump are read at the left limit, so a parent
    and child flipping in sequence attribute the child's jump to the parent's
    pre-flip state.
    """
    cards = traj.state_cards
    parent_sets = graph_parent_sets(graph)
    if intervention is None:
        intervention = Intervention.none(len(cards))
    keys = [intervention.condition_key(n) for n in range(len(cards))]
    blocks = [
        {keys[n]: NodeStats.zero(cards[n], _config_count(cards, parent_sets[n]))}
        for n in range(len(cards))
    ]
    state = list(traj.initial)

    def cfg(node: int) -> int:
        idx, stride = 0, 1
        for m in parent_sets[node]:
            idx += stride * state[m]
            stride *= cards[m]
        return idx

    t0 = 0.0
    for t, node, new in traj.events:
        dt = t - t0
        for n in range(len(cards)):
            blocks[n][keys[n]].dwell[state[n], cfg(n)] += dt
        blocks[node][keys[node]].trans[state[node], new, cfg(node)] += 1.0
        state[node] = new
        t0 = t
    dt = traj.horizon - t0
    for n in range(len(cards)):
        blocks[n][keys[n]].dwell[state[n], cfg(n)] += dt

    overrides = {}
    for n in range(len(cards)):
        key = keys[n]
        if isinstance(key, tuple) and key[0] == "override":
            overrides[(n, key)] = intervention.conditions[n].rates
    return SufficientStats(cards, parent_sets, blocks, overrides)


def node_statistics(traj: Trajectory, node: int, parents: tuple[int, ...],
                    intervention: Intervention | None = None) -> NodeStats:
    """Statistics of a single node under an arbitrary candidate parent set."""
    cards = traj.state_cards
    parents = tuple(sorted(parents))
    stats = NodeStats.zero(cards[node], _config_count(cards, parents))
    state = list(traj.initial)

    def cfg() -> int:
        idx, stride = 0, 1
        for m in parents:
            idx += stride * state[m]
            stride *= cards[m]
        return idx

    t0 = 0.0
    for t, ev_node, new in traj.events:
        stats.dwell[state[node], cfg()] += t - t0
        if ev_node == node:
            stats.trans[state[node], new, cfg()] += 1.0
        state[ev_node] = new
        t0 = t
    stats.dwell[state[node], cfg()] += traj.horizon - t0
    return stats


def pool(stats_list: Sequence[SufficientStats]) -> SufficientStats:
    """Cell-wise sums within matching condition keys across experiments."""
    if not stats_list:
        raise ValueError("nothing to pool")
    first = stats_list[0]
    for other in stats_list[1:]:
        if other.state_cards != first.state_cards or other.parent_sets != first.parent_sets:
            raise ValueError("pooled statistics must share cardinalities and graph")
    merged: list[dict] = [dict() for _ in first.state_cards]
    overrides: dict = {}
    for stats in stats_list:
        overrides.update(stats.override_rates)
        for n, block in enumerate(stats.per_node):
            for key, ns in block.items():
                if key in merged[n]:
                    merged[n][key].add(ns)
                else:
                    merged[n][key] = ns.copy()
    return SufficientStats(first.state_cards, first.parent_sets, merged, overrides)


def simulate_statistics(model: Ctbn, intervention: Intervention | None, initial,
                        horizon: float, rng: np.random.Generator, n_paths: int,
                        graph: np.ndarray | None = None):
    """Monte Carlo mean and standard error of per-node statistics.

    Uses the same draw order as ``sample_path`` (waiting time, then target),
    so a shared seed reproduces the exact same paths, but accumulates flat
    statistics instead of building event lists.  Condition keys are ignored:
    every node's cells are counted, whatever regime it is in.
    """
    cards = model.state_cards
    parent_sets = graph_parent_sets(model.graph if graph is None else graph)
    init = tuple(int(x) for x in initial)
    if intervention is not None:
        init = intervention.force_state(init)
    gen, targets, cumrates, labels = _jump_tables(model, intervention)
    size = gen.shape[0]

    # flat layout: per node, trans cells then dwell cells
    offsets, total = [], 0
    for n in range(len(cards)):
        c, u = cards[n], _config_count(cards, parent_sets[n])
        offsets.append((total, total + c * c * u))
        total += c * c * u + c * u
    cfg_tables = [parent_config_table(cards, parent_sets[n]) for n in range(len(cards))]
    # per (state, jump choice): flat index of the transition cell it increments
    trans_cell = []
    for s in range(size):
        cells = []
        table = joint_state_table(cards)
        for (node, new) in labels[s]:
            c, u = cards[node], _config_count(cards, parent_sets[node])
            x = table[s, node]
            cells.append(offsets[node][0] + (x * c + new) * u + cfg_tables[node][s])
        trans_cell.append(np.array(cells, dtype=np.int64))
    dwell_cell = np.zeros((size, len(cards)), dtype=np.int64)
    for n in range(len(cards)):
        c, u = cards[n], _config_count(cards, parent_sets[n])
        dwell_cell[:, n] = offsets[n][1] + joint_state_table(cards)[:, n] * u + cfg_tables[n]

    start = joint_state_index(cards, init)
    acc = np.zeros(total)
    acc2 = np.zeros(total)
    path = np.zeros(total)
    joint_dwell = np.zeros(size)
    for _ in range(n_paths):
        path[:] = 0.0
        joint_dwell[:] = 0.0
        s = start
        t = 0.0
        while True:
            exit_rate = -gen[s, s]
            if exit_rate <= 0.0:
                joint_dwell[s] += horizon - t
                break
            dt = rng.exponential(1.0 / exit_rate)
            if t + dt >= horizon:
                joint_dwell[s] += horizon - t
                break
            joint_dwell[s] += dt
            t += dt
            u = rng.random() * exit_rate
            j = int(np.searchsorted(cumrates[s], u, side="right"))
            j = min(j, len(targets[s]) - 1)
            path[trans_cell[s][j]] += 1.0
            s = targets[s][j]
        np.add.at(path, dwell_cell.ravel(), np.repeat(joint_dwell, len(cards)))
        acc += path
        acc2 += path * path

    mean = acc / n_paths
    var = np.maximum(acc2 / n_paths - mean * mean, 0.0) * n_paths / max(n_paths - 1, 1)
    se = np.sqrt(var / n_paths)

    def unpack(flat: np.ndarray) -> list[NodeStats]:
        out = []
        for n in range(len(cards)):
            c, u = cards[n], _config_count(cards, parent_sets[n])
            t0, t1 = offsets[n]
            out.append(NodeStats(flat[t0:t1].reshape(c, c, u).copy(),
                                 flat[t1:t1 + c * u].reshape(c, u).copy()))
        return out

    return unpack(mean), unpack(se)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def trajectory_to_dict(traj: Trajectory, intervention: Intervention | None = None) -> dict:
    doc = {
        "state_cards": list(traj.state_cards),
        "initial": list(traj.initial),
        "events": [[float(t), int(n), int(x)] for t, n, x in traj.events],
        "horizon": float(traj.horizon),
    }
    if intervention is not None:
        doc["intervention"] = intervention_to_dict(intervention)
    return doc


def trajectory_from_dict(doc: dict) -> tuple[Trajectory, Intervention]:
    traj = Trajectory(
        state_cards=tuple(doc["state_cards"]),
        initial=tuple(doc["initial"]),
        events=[(float(t), int(n), int(x)) for t, n, x in doc["events"]],
        horizon=float(doc["horizon"]),
    )
    if "intervention" in doc:
        iv = intervention_from_dict(doc["intervention"])
    else:
        iv = Intervention.none(len(traj.state_cards))
    return traj, iv


def save_trajectories(path: str | Path, pairs: Sequence[tuple[Trajectory, Intervention | None]]) -> None:
    doc = {"trajectories": [trajectory_to_dict(t, iv) for t, iv in pairs]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_trajectories(path: str | Path) -> list[tuple[Trajectory, Intervention]]:
    doc = json.loads(Path(path).read_text())
    return [trajectory_from_dict(item) for item in doc["trajectories"]]
