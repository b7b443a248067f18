"""Forward-backward smoothing for trajectories seen only through snapshots.

A trajectory observed at discrete times through a noisy readout leaves the
path between observations latent.  The backward pass integrates the terminal
value problem for the observation likelihood-to-go and applies a
multiplicative reset at every observation time; the forward pass then
propagates the smoothed marginals with a time-dependent generator whose
off-diagonal entries are the original rates tilted by backward-value ratios.
Expected dwell times and transition counts derived from the marginals slot
into the same conjugate updates as exactly observed paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ctbndesign.bayes import RatePosterior, StructureBelief
from ctbndesign.engine import (
    JointStats,
    NodeStats,
    NumericalError,
    _initial_distribution,
    default_step_count,
    graph_parent_sets,
    project_node_statistics,
)
from ctbndesign.model import AmalgamatedCtmc, Ctbn, Intervention, amalgamate
from ctbndesign.paths import SufficientStats

# Mass tolerated on states the backward values rule out.  Approaching a
# noise-free observation the tilted outflow rate from such states diverges,
# so fixed-step integration always leaves some residue there.  The true
# smoothed mass at the observation is exactly zero, so the residue is
# projected out and the remainder renormalized; relative masses on the
# surviving states are unaffected.  Only when most of the mass sits on
# ruled-out states is the forward value meaningless: either the grid cannot
# resolve the drain at all or the observations contradict the dynamics.
_UNREACHABLE_MASS = 0.5


@dataclass(frozen=True)
class ObservationSeries:
    """Discrete-time readouts as per-time likelihood tables over joint states.

    ``tables[i, s]`` is the likelihood of the i-th reading given joint state
    ``s``.  Rows need not normalize; they scale the evidence only.
    """

    times: np.ndarray
    tables: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        tables = np.asarray(self.tables, dtype=float)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if times.ndim != 1:
            raise ValueError("observation times must be one-dimensional")
        if tables.ndim != 2 or tables.shape[0] != times.size:
            raise ValueError("need one likelihood row per observation time")
        if times.size:
            if np.any(np.diff(times) <= 0):
                raise ValueError("observation times must be strictly increasing")
            if times[0] < 0 or times[-1] > self.horizon:
                raise ValueError("observation times must lie within [0, horizon]")
        if np.any(tables < 0):
            raise ValueError("likelihood entries must be non-negative")
        if times.size and np.any(tables.max(axis=1) <= 0):
            raise ValueError("every observation needs a positive likelihood somewhere")
        times.setflags(write=False)
        tables.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "horizon", float(self.horizon))

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def empty(cls, num_states: int, horizon: float) -> "ObservationSeries":
        return cls(np.empty(0), np.empty((0, int(num_states))), horizon)

    @classmethod
    def from_noisy_states(cls, state_cards, times, states, flip_prob,
                          horizon: float) -> "ObservationSeries":
        """Categorical readout of each node with independent flip noise.

        A node of cardinality c reports its true state with probability
        1 - f and any specific wrong state with probability f / (c - 1).
        ``states`` holds one per-node state vector per observation time.
        """
        cards = tuple(int(c) for c in state_cards)
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=int)
        if states.ndim != 2 or states.shape != (times.size, len(cards)):
            raise ValueError("states must be (num_times, num_nodes)")
        flips = np.broadcast_to(np.asarray(flip_prob, dtype=float), (len(cards),))
        if np.any(flips < 0) or np.any(flips >= 1):
            raise ValueError("flip probabilities must lie in [0, 1)")
        size = int(np.prod(cards))
        digits = []
        stride = 1
        for card in cards:
            digits.append((np.arange(size) // stride) % card)
            stride *= card
        tables = np.ones((times.size, size))
        for n, card in enumerate(cards):
            if card < 2 and flips[n] > 0:
                raise ValueError("cannot flip a degenerate node")
            per_state = np.full(card, flips[n] / max(card - 1, 1))
            hit = 1.0 - flips[n]
            for i in range(times.size):
                row = per_state.copy()
                row[states[i, n]] = hit
                tables[i] *= row[digits[n]]
        return cls(times, tables, horizon)


@dataclass
class BackwardSolution:
    """Backward likelihood-to-go on a half-step grid, slicewise normalized.

    ``grid`` holds the output times; ``fine`` additionally contains every
    interval midpoint, so index 2k on the fine axis is grid point k.  At an
    observation time the stored slice is the left limit (reset applied);
    ``pre_reset`` keeps the right limit for the segment above.  The dropped
    normalization constants are accumulated in ``log_norm`` so that the true
    backward value at time zero is ``rho[0] * exp(log_norm)``.
    """

    grid: np.ndarray
    fine: np.ndarray
    rho: np.ndarray
    pre_reset: dict = field(default_factory=dict)
    log_norm: float = 0.0


def _refined_grid(horizon: float, max_exit: float, obs_times: np.ndarray,
                  steps: int | None) -> np.ndarray:
    if steps is None:
        steps = default_step_count(horizon, max_exit)
    base = np.linspace(0.0, horizon, steps + 1)
    grid = np.unique(np.concatenate([base, obs_times]))
    if grid[0] != 0.0 or grid[-1] != horizon:
        raise ValueError("observation times must lie within [0, horizon]")
    return grid


def _normalize(vec: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    total = float(vec.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise NumericalError(f"{what}: backward value collapsed to zero")
    return vec / total, np.log(total)


def backward_pass(ctmc: AmalgamatedCtmc, observations: ObservationSeries,
                  steps: int | None = None) -> BackwardSolution:
    """Integrate the likelihood-to-go from the horizon down to zero.

    Between observations d(rho)/dt = -W rho; at an observation time the
    right limit is multiplied elementwise by that reading's likelihood row.
    Every stored slice is normalized to unit mass, with the log of the
    dropped constants accumulated for the marginal likelihood.
    """
    size = ctmc.generator.shape[0]
    if observations.tables.shape[1:] != (size,):
        raise ValueError("observation tables do not match the state-space size")
    w = ctmc.generator
    grid = _refined_grid(observations.horizon, ctmc.max_exit_rate(),
                         observations.times, steps)
    num = grid.size
    fine = np.empty(2 * num - 1)
    fine[0::2] = grid
    fine[1::2] = 0.5 * (grid[:-1] + grid[1:])
    rho = np.empty((2 * num - 1, size))
    obs_at = {}
    for i, t in enumerate(observations.times):
        k = int(np.searchsorted(grid, t))
        obs_at[k] = i

    cur = np.full(size, 1.0 / size)
    log_norm = float(np.log(size))
    pre_reset: dict[int, np.ndarray] = {}

    def absorb(k: int, vec: np.ndarray, log_norm: float) -> tuple[np.ndarray, float]:
        if k in obs_at:
            pre_reset[k] = vec.copy()
            vec, gain = _normalize(vec * observations.tables[obs_at[k]],
                                   f"observation at t={grid[k]:g}")
            log_norm += gain
        return vec, log_norm

    cur, log_norm = absorb(num - 1, cur, log_norm)
    rho[2 * (num - 1)] = cur
    for k in range(num - 1, 0, -1):
        h = 0.5 * (grid[k] - grid[k - 1])
        for sub in (2 * k - 1, 2 * k - 2):
            # one RK4 step of d(rho)/ds = W rho in time-to-go s
            k1 = w @ cur
            k2 = w @ (cur + 0.5 * h * k1)
            k3 = w @ (cur + 0.5 * h * k2)
            k4 = w @ (cur + h * k3)
            cur = cur + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            np.maximum(cur, 0.0, out=cur)
            cur, gain = _normalize(cur, f"backward step to t={fine[sub]:g}")
            log_norm += gain
            if sub % 2 == 0:
                cur, log_norm = absorb(sub // 2, cur, log_norm)
            rho[sub] = cur
    return BackwardSolution(grid, fine, rho, pre_reset, log_norm)


def _alive_mask(rho_slice: np.ndarray) -> np.ndarray:
    # a relative floor keeps roundoff-scale backward values out of the ratio
    # denominators, where they would overflow the tilted rates
    return rho_slice > 1e-12 * rho_slice.max()


def tilted_generator(w: np.ndarray, rho_slice: np.ndarray) -> np.ndarray:
    """Rates reweighted by backward-value ratios; rows sum to zero.

    Rows of states the backward value rules out are zeroed: no smoothed mass
    may sit there, which the forward pass checks separately.
    """
    alive = _alive_mask(rho_slice)
    out = np.zeros_like(w)
    if alive.any():
        ratio = np.zeros((rho_slice.size, rho_slice.size))
        ratio[np.ix_(alive, alive)] = rho_slice[alive][None, :] / rho_slice[alive][:, None]
        out = w * ratio
        np.fill_diagonal(out, 0.0)
        out[np.arange(w.shape[0]), np.arange(w.shape[0])] = -out.sum(axis=1)
    return out


@dataclass
class SmoothedMarginals:
    """Smoothed joint-state marginals with their expected path statistics."""

    grid: np.ndarray
    probs: np.ndarray
    dwell: np.ndarray
    transitions: np.ndarray
    log_evidence: float

    def joint_stats(self) -> JointStats:
        return JointStats(dwell=self.dwell, trans=self.transitions)


def smoothed_marginals(ctmc: AmalgamatedCtmc, initial, observations: ObservationSeries,
                       steps: int | None = None) -> SmoothedMarginals:
    """Condition the process on all observations at once.

    Runs the backward pass, then forward-integrates the marginals under the
    tilted generator, starting from the prior reweighted by the backward
    value at time zero.  Expected dwell is the trapezoid of the marginals;
    expected transition counts pair each off-diagonal rate with the source
    state's expected dwell.
    """
    size = ctmc.generator.shape[0]
    p0 = _initial_distribution(initial, size, ctmc.state_cards)
    back = backward_pass(ctmc, observations, steps)
    grid, rho = back.grid, back.rho
    num = grid.size
    w = ctmc.generator

    start = p0 * rho[0]
    total = start.sum()
    if total <= 0.0:
        raise NumericalError("observations are incompatible with the initial distribution")
    log_evidence = float(np.log(np.dot(p0, rho[0]))) + back.log_norm
    probs = np.empty((num, size))
    q = start / total
    probs[0] = q
    for k in range(num - 1):
        h = grid[k + 1] - grid[k]
        # the left endpoint of the interval sits just above any reset there
        left = back.pre_reset[k] if k in back.pre_reset else rho[2 * k]
        w_l = tilted_generator(w, left)
        w_m = tilted_generator(w, rho[2 * k + 1])
        w_r = tilted_generator(w, rho[2 * k + 2])
        k1 = q @ w_l
        k2 = (q + 0.5 * h * k1) @ w_m
        k3 = (q + 0.5 * h * k2) @ w_m
        k4 = (q + h * k3) @ w_r
        q = q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        # every tilted-generator row sums to zero, so the step conserves mass
        if abs(q.sum() - 1.0) > 1e-8:
            raise NumericalError(f"smoothed marginal lost normalization at t={grid[k + 1]:g}")
        np.maximum(q, 0.0, out=q)
        dead = ~_alive_mask(rho[2 * k + 2])
        dead_mass = float(q[dead].sum())
        if dead_mass > _UNREACHABLE_MASS:
            raise NumericalError(
                f"smoothed mass {dead_mass:.2e} on states the observations rule out "
                f"at t={grid[k + 1]:g}; grid too coarse or observations inconsistent")
        q[dead] = 0.0
        total = q.sum()
        if total <= 0.0:
            raise NumericalError(f"observations leave no reachable state at t={grid[k + 1]:g}")
        q = q / total
        probs[k + 1] = q

    dwell = np.trapezoid(probs, grid, axis=0)
    transitions = w * dwell[:, None]
    np.fill_diagonal(transitions, 0.0)
    return SmoothedMarginals(grid, probs, dwell, transitions, log_evidence)


# ---------------------------------------------------------------------------
# conjugate updates from expected statistics
# ---------------------------------------------------------------------------

def expected_node_statistics(model: Ctbn, initial, observations: ObservationSeries,
                             intervention: Intervention | None = None,
                             parent_sets=None,
                             steps: int | None = None) -> list[NodeStats]:
    """Smoothed expected dwell and transition counts per node.

    The smoothing model is a concrete rate assignment (a posterior sample or
    mean); the returned statistics are its conditional expectations given the
    observations, projected onto each node's parent configurations.
    """
    if parent_sets is None:
        parent_sets = graph_parent_sets(model.graph)
    ctmc = amalgamate(model, intervention)
    if intervention is not None:
        arr = np.asarray(initial)
        if arr.ndim == 1 and arr.size == len(model.state_cards) \
                and ctmc.generator.shape[0] != len(model.state_cards):
            initial = intervention.force_state(tuple(int(x) for x in arr))
    smoothed = smoothed_marginals(ctmc, initial, observations, steps)
    joint = smoothed.joint_stats()
    cards = tuple(model.state_cards)
    return [project_node_statistics(joint, cards, n, tuple(parent_sets[n]))
            for n in range(len(cards))]


def update_posterior_with_expected(posterior: RatePosterior,
                                   stats: list[NodeStats],
                                   intervention: Intervention | None = None) -> RatePosterior:
    """Conjugate update with expected counts in place of observed counts."""
    per_node = []
    for n in range(len(posterior.state_cards)):
        key = 0 if intervention is None else intervention.condition_key(n)
        per_node.append({key: stats[n]})
    wrapped = SufficientStats(posterior.state_cards, posterior.parent_sets, per_node)
    return posterior.updated(wrapped)


def incomplete_data_posterior_update(posterior: RatePosterior, model: Ctbn,
                                     initial, observations: ObservationSeries,
                                     intervention: Intervention | None = None,
                                     steps: int | None = None) -> RatePosterior:
    """Absorb one partially observed experiment into the rate posterior."""
    stats = expected_node_statistics(model, initial, observations, intervention,
                                     parent_sets=posterior.parent_sets, steps=steps)
    return update_posterior_with_expected(posterior, stats, intervention)


def incomplete_data_structure_update(belief: StructureBelief, model: Ctbn,
                                     initial, observations: ObservationSeries,
                                     intervention: Intervention | None = None,
                                     steps: int | None = None) -> StructureBelief:
    """Add smoothed expected statistics to every candidate parent set.

    Nodes whose condition differs from the observational one are skipped,
    mirroring the exactly observed update.
    """
    ctmc = amalgamate(model, intervention)
    if intervention is not None:
        arr = np.asarray(initial)
        if arr.ndim == 1 and arr.size == len(model.state_cards) \
                and ctmc.generator.shape[0] != len(model.state_cards):
            initial = intervention.force_state(tuple(int(x) for x in arr))
    smoothed = smoothed_marginals(ctmc, initial, observations, steps)
    joint = smoothed.joint_stats()
    cards = belief.state_cards
    tables = [[ns.copy() for ns in row] for row in belief.tables]
    for n in range(len(cards)):
        if intervention is not None and intervention.condition_key(n) != 0:
            continue
        for k, parents in enumerate(belief.candidates[n]):
            tables[n][k].add(project_node_statistics(joint, cards, n, parents))
    return StructureBelief(cards, belief.candidates, belief.prior_alpha,
                           belief.prior_beta, tuple(tuple(row) for row in tables))
