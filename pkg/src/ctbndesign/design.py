"""Intervention-selection criteria for rate and structure learning.

Every criterion scores a candidate intervention by how strongly one more
trajectory of a fixed horizon is expected to discriminate within the current
posterior.  The expected discrimination is semi-analytical: posterior samples
fix a process, the master equation gives that process's expected transition
counts and dwell times, and gamma/categorical expectation identities close the
remaining integrals.  Three criteria share this machinery:

* BHC: expected KL divergence between posterior samples, inner expectation
  taken in closed form (the value of the variational bound at its start).
* VBHC: an upper bound on the information gain, tightened by descending the
  bound's variational parameters before comparing candidates.
* EIG: nested Monte Carlo over sampled trajectories (the expensive ground
  truth the bounds are checked against).

Clamped subsystems make the joint chain reducible, so all moment evaluations
restrict the generator to the states consistent with the clamps before
exponentiating; intervened nodes are excluded from every criterion sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, product
from math import prod
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, polygamma, psi

from ctbndesign.bayes import (
    RatePosterior,
    StructureBelief,
    StructurePosterior,
    gamma_kl,
    structure_marginal_log_likelihood,
)
from ctbndesign.engine import (
    NodeStats,
    NumericalError,
    batched_dwell_moments,
)
from ctbndesign.model import (
    Ctbn,
    Intervention,
    RateOverride,
    amalgamate,
    flip_index_table,
    graph_from_parent_sets,
    joint_state_index,
    joint_state_table,
    parent_config_table,
)
from ctbndesign.paths import extract_statistics, node_statistics, sample_path

__all__ = [
    "CriterionValue",
    "VariationalRateParams",
    "VariationalStructureParams",
    "ParameterDesignContext",
    "StructureDesignContext",
    "candidate_clamp_interventions",
    "kl_ctbn_rates",
    "vbhc_parameters",
    "vbhc_parameter_gradients",
    "minimize_vbhc_parameters",
    "bhc_parameters",
    "kl_marginal_structures_approx",
    "vbhc_structure",
    "vbhc_structure_gradients",
    "minimize_vbhc_structure",
    "bhc_structure",
    "eig_parameters",
    "eig_structure",
    "select_intervention",
    "STRATEGIES",
]

STRATEGIES = ("passive", "random", "bhc", "vbhc", "neg-vbhc", "eig")


@dataclass
class CriterionValue:
    """A criterion evaluation: the value plus enough context to audit it."""

    value: float
    initial_value: float | None = None
    per_sample: np.ndarray | None = None
    se: float | None = None
    trace: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise NumericalError("criterion evaluated to a non-finite value")


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------

def candidate_clamp_interventions(state_cards, max_clamped: int = 2) -> list[Intervention]:
    """No-op first, then single-node clamps, then larger combinations.

    Deterministic order: clamp-set size ascending, node indices ascending,
    states in row-major order.
    """
    cards = tuple(int(c) for c in state_cards)
    n = len(cards)
    out = [Intervention.none(n)]
    for size in range(1, max_clamped + 1):
        for nodes in combinations(range(n), size):
            for states in product(*(range(cards[m]) for m in nodes)):
                out.append(Intervention.clamp(n, dict(zip(nodes, states))))
    return out


# ---------------------------------------------------------------------------
# batched expected moments under clamp-reduced generators
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _clamp_subspace(cards: tuple[int, ...], clamp_items: tuple) -> np.ndarray:
    table = joint_state_table(cards)
    mask = np.ones(table.shape[0], dtype=bool)
    for node, state in clamp_items:
        mask &= table[:, node] == state
    sub = np.flatnonzero(mask)
    sub.setflags(write=False)
    return sub


@lru_cache(maxsize=None)
def _projection_operator(cards: tuple[int, ...], node: int, parents: tuple[int, ...]):
    own = joint_state_table(cards)[:, node]
    cfg = parent_config_table(cards, parents)
    configs = prod(cards[m] for m in parents) if parents else 1
    size = own.shape[0]
    onehot = np.zeros((size, cards[node] * configs))
    onehot[np.arange(size), own * configs + cfg] = 1.0
    onehot.setflags(write=False)
    return onehot, flip_index_table(cards, node)


def _clamp_items(intervention: Intervention | None) -> tuple:
    if intervention is None:
        return ()
    return tuple(sorted(intervention.clamped.items()))


def _subspace_moments(ws_full: np.ndarray, cards: tuple[int, ...],
                      intervention: Intervention | None, s0, horizon: float):
    """Expected joint dwell (B, S) and transition (B, S, S) moments.

    ``ws_full`` holds one full-space generator per posterior sample.  Clamps
    cut the chain down to the consistent-state subspace: within it the free
    nodes' rates are unchanged and the only transitions that leave it are the
    clamped nodes' own flips, so restricting and rebuilding the diagonal is
    exact.
    """
    size = ws_full.shape[1]
    sub = _clamp_subspace(cards, _clamp_items(intervention))
    forced = intervention.force_state(tuple(s0)) if intervention is not None else tuple(s0)
    pos = int(np.searchsorted(sub, joint_state_index(cards, forced)))
    batch = ws_full.shape[0]
    w = ws_full[:, sub[:, None], sub[None, :]].copy()
    idx = np.arange(sub.size)
    w[:, idx, idx] = 0.0
    w[:, idx, idx] = -w.sum(axis=2)
    p0 = np.zeros((batch, sub.size))
    p0[:, pos] = 1.0
    dwell_sub = batched_dwell_moments(w, p0, horizon)
    dwell = np.zeros((batch, size))
    dwell[:, sub] = dwell_sub
    off = w.copy()
    off[:, idx, idx] = 0.0
    trans = np.zeros((batch, size, size))
    trans[:, sub[:, None], sub[None, :]] = off * dwell_sub[:, :, None]
    return dwell, trans


def _project_batch(dwell: np.ndarray, trans: np.ndarray, cards: tuple[int, ...],
                   node: int, parents: tuple[int, ...]):
    """Fold joint moments onto one node's cells: (B,c,c,U) counts, (B,c,U) dwell."""
    onehot, flips = _projection_operator(cards, node, tuple(parents))
    card = cards[node]
    configs = onehot.shape[1] // card
    batch, size = dwell.shape
    d_cells = (dwell @ onehot).reshape(batch, card, configs)
    t_cells = np.zeros((batch, card, card, configs))
    rows = np.arange(size)
    for target in range(card):
        gathered = trans[:, rows, flips[:, target]]
        t_cells[:, :, target, :] = (gathered @ onehot).reshape(batch, card, configs)
    ar = np.arange(card)
    t_cells[:, ar, ar, :] = 0.0
    return t_cells, d_cells


def _has_override(intervention: Intervention | None) -> bool:
    return intervention is not None and any(
        isinstance(c, RateOverride) for c in intervention.conditions)


def _generators_for(models: Sequence[Ctbn], ws_full: np.ndarray,
                    intervention: Intervention | None) -> np.ndarray:
    """Full-space generators to restrict: observational ones when the
    intervention is clamp-only (restriction alone reproduces it exactly),
    re-amalgamated ones when rate overrides change free dynamics."""
    if _has_override(intervention):
        return np.stack([amalgamate(m, intervention).generator for m in models])
    return ws_full


# ---------------------------------------------------------------------------
# shared per-round sampling contexts (common random numbers across candidates)
# ---------------------------------------------------------------------------

@dataclass
class ParameterDesignContext:
    """Posterior rate samples fixed once per selection round."""

    posterior: RatePosterior
    samples: list[tuple[np.ndarray, ...]]
    models: list[Ctbn]
    ws_full: np.ndarray

    @classmethod
    def draw(cls, posterior: RatePosterior, num_samples: int,
             rng: np.random.Generator) -> "ParameterDesignContext":
        if num_samples < 1:
            raise ValueError("need at least one posterior sample")
        graph = graph_from_parent_sets(posterior.parent_sets)
        samples = [posterior.sample_rates(rng) for _ in range(num_samples)]
        models = [Ctbn(posterior.state_cards, graph, s) for s in samples]
        ws = np.stack([amalgamate(m).generator for m in models])
        return cls(posterior, samples, models, ws)

    def moment_averages(self, intervention: Intervention | None, s0, horizon: float):
        """Per free node: sample-averaged E[M], E[T], and E[M log rate]."""
        cards = self.posterior.state_cards
        free = (intervention.free_nodes if intervention is not None
                else tuple(range(len(cards))))
        ws = _generators_for(self.models, self.ws_full, intervention)
        dwell, trans = _subspace_moments(ws, cards, intervention, s0, horizon)
        out = {}
        for n in free:
            t_cells, d_cells = _project_batch(dwell, trans, cards, n,
                                              self.posterior.parent_sets[n])
            lam = np.stack([s[n] for s in self.samples])
            log_lam = np.zeros_like(lam)
            np.log(lam, out=log_lam, where=lam > 0)
            out[n] = (t_cells.mean(axis=0), d_cells.mean(axis=0),
                      (t_cells * log_lam).mean(axis=0))
        return out


@dataclass
class StructureDesignContext:
    """Graph and rate samples from the joint structure-rate posterior."""

    belief: StructureBelief
    posterior: StructurePosterior
    parent_idx: list[tuple[int, ...]]
    models: list[Ctbn]
    ws_full: np.ndarray

    @classmethod
    def draw(cls, belief: StructureBelief, num_samples: int, rng: np.random.Generator,
             posterior: StructurePosterior | None = None) -> "StructureDesignContext":
        if num_samples < 1:
            raise ValueError("need at least one posterior sample")
        if posterior is None:
            posterior = belief.structure_posterior()
        cards = belief.state_cards
        parent_idx, models = [], []
        for _ in range(num_samples):
            idx = tuple(int(rng.choice(len(belief.candidates[n]), p=posterior.probs(n)))
                        for n in range(len(cards)))
            psets = tuple(belief.candidates[n][idx[n]] for n in range(len(cards)))
            rates = []
            for n in range(len(cards)):
                a, b = belief.node_hyperparameters(n, psets[n])
                lam = rng.gamma(shape=a, scale=1.0 / b)
                ar = np.arange(cards[n])
                lam[ar, ar, :] = 0.0
                rates.append(lam)
            parent_idx.append(idx)
            models.append(Ctbn(cards, graph_from_parent_sets(psets), tuple(rates)))
        ws = np.stack([amalgamate(m).generator for m in models])
        return cls(belief, posterior, parent_idx, models, ws)

    def score_tables(self, intervention: Intervention | None, s0, horizon: float):
        """Per free node: g[s, k] marginal-score surrogates per candidate set.

        g aggregates log Gamma(a + E[M]) - (a + E[M]) log(b + E[T]) over the
        node's cells under candidate parent set k, for each sample s.
        """
        belief = self.belief
        cards = belief.state_cards
        free = (intervention.free_nodes if intervention is not None
                else tuple(range(len(cards))))
        ws = _generators_for(self.models, self.ws_full, intervention)
        dwell, trans = _subspace_moments(ws, cards, intervention, s0, horizon)
        batch = dwell.shape[0]
        tables = {}
        for n in free:
            card = cards[n]
            offdiag = ~np.eye(card, dtype=bool)
            g = np.zeros((batch, len(belief.candidates[n])))
            for k, parents in enumerate(belief.candidates[n]):
                t_cells, d_cells = _project_batch(dwell, trans, cards, n, parents)
                a0, b0 = belief.node_hyperparameters(n, parents)
                a_hat = a0 + t_cells
                b_hat = b0 + d_cells[:, :, None, :]
                if np.any(b_hat <= 0.0):
                    raise NumericalError("non-positive expected rate parameter")
                cellwise = gammaln(a_hat) - a_hat * np.log(b_hat)
                g[:, k] = cellwise[:, offdiag, :].sum(axis=(1, 2))
            tables[n] = g
        return tables


# ---------------------------------------------------------------------------
# process KL between rate assignments
# ---------------------------------------------------------------------------

def kl_ctbn_rates(rates, rates_prime, expected: Sequence[NodeStats],
                  nodes: Sequence[int] | None = None) -> float:
    """KL rate of the process under ``rates`` from the one under ``rates_prime``.

    ``expected`` are the expected statistics of the ``rates`` process over the
    shared horizon; per cell the value is E[M] log(rate/rate') +
    (rate' - rate) E[T], nonnegative because E[M] = rate * E[T].
    """
    if nodes is None:
        nodes = range(len(rates))
    total = 0.0
    for n in nodes:
        lam, lam_p = rates[n], rates_prime[n]
        stats = expected[n]
        card = lam.shape[0]
        mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(lam.shape, dtype=bool)
        m_cells = stats.trans
        t_cells = np.broadcast_to(stats.dwell[:, None, :], lam.shape)
        if np.any(mask & (m_cells > 0) & (lam_p <= 0)):
            return float("inf")
        ratio = np.zeros_like(lam)
        ok = mask & (m_cells > 0)
        ratio[ok] = np.log(lam[ok] / lam_p[ok])
        total += float(np.sum((m_cells * ratio + (lam_p - lam) * t_cells)[mask]))
    return total


# ---------------------------------------------------------------------------
# parameter-learning criteria
# ---------------------------------------------------------------------------

@dataclass
class VariationalRateParams:
    """Per free node: gamma shape (card,card,U) and rate (card,U) surrogates."""

    nodes: tuple[int, ...]
    alphas: dict
    betas: dict

    @classmethod
    def from_posterior(cls, posterior: RatePosterior,
                       nodes: Sequence[int]) -> "VariationalRateParams":
        nodes = tuple(int(n) for n in nodes)
        alphas = {n: posterior.alphas(n).copy() for n in nodes}
        betas = {n: posterior.prior_beta + posterior.counts[n].dwell.copy()
                 for n in nodes}
        return cls(nodes, alphas, betas)

    def copy(self) -> "VariationalRateParams":
        return VariationalRateParams(self.nodes,
                                     {n: a.copy() for n, a in self.alphas.items()},
                                     {n: b.copy() for n, b in self.betas.items()})


def _param_objective_terms(kappa: VariationalRateParams, posterior: RatePosterior,
                           averages: dict, want_grad: bool):
    """Objective value (and gradients) of the parameter bound at ``kappa``.

    Per cell the data term is abar - mbar (psi(a) - log b + 1) + tbar a / b
    and the regularizer is the closed-form gamma KL to the posterior.
    """
    value = 0.0
    grads_a, grads_b = {}, {}
    for n in kappa.nodes:
        mbar, tbar, abar = averages[n]
        a = kappa.alphas[n]
        b = kappa.betas[n]
        card = a.shape[0]
        mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(a.shape, dtype=bool)
        a0 = posterior.alphas(n)
        b0 = posterior.prior_beta + posterior.counts[n].dwell
        bb = b[:, None, :]
        b0b = b0[:, None, :]
        tbb = tbar[:, None, :]
        data = abar - mbar * (psi(a) - np.log(bb) + 1.0) + tbb * a / bb
        kl = gamma_kl(a, bb, a0, b0b)
        value += float(np.sum((data + kl)[mask]))
        if want_grad:
            trig = polygamma(1, a)
            ga = (-mbar * trig + tbb / bb
                  + (a - a0) * trig + (b0b - bb) / bb)
            gb_cells = (mbar / bb - tbb * a / bb ** 2
                        + a0 / bb - a * b0b / bb ** 2)
            ga[~mask] = 0.0
            gb_cells[~mask] = 0.0
            grads_a[n] = ga
            grads_b[n] = gb_cells.sum(axis=1)
    if want_grad:
        return value, grads_a, grads_b
    return value


def _context_or_draw(posterior, intervention, num_samples, rng, context):
    if context is not None:
        return context
    if rng is None:
        raise ValueError("either a context or an rng is required")
    return ParameterDesignContext.draw(posterior, num_samples, rng)


def vbhc_parameters(posterior: RatePosterior, intervention: Intervention | None,
                    s0, horizon: float, *, num_samples: int = 10,
                    rng: np.random.Generator | None = None,
                    context: ParameterDesignContext | None = None,
                    kappa: VariationalRateParams | None = None) -> CriterionValue:
    """The variational bound at ``kappa`` (posterior counts by default)."""
    context = _context_or_draw(posterior, intervention, num_samples, rng, context)
    averages = context.moment_averages(intervention, s0, horizon)
    nodes = tuple(sorted(averages))
    if kappa is None:
        kappa = VariationalRateParams.from_posterior(posterior, nodes)
    value = _param_objective_terms(kappa, posterior, averages, want_grad=False)
    return CriterionValue(value=value, initial_value=value)


def vbhc_parameter_gradients(posterior: RatePosterior, intervention: Intervention | None,
                             s0, horizon: float, kappa: VariationalRateParams, *,
                             num_samples: int = 10,
                             rng: np.random.Generator | None = None,
                             context: ParameterDesignContext | None = None):
    """Analytic gradients of the bound w.r.t. the gamma surrogates."""
    context = _context_or_draw(posterior, intervention, num_samples, rng, context)
    averages = context.moment_averages(intervention, s0, horizon)
    _, grads_a, grads_b = _param_objective_terms(kappa, posterior, averages,
                                                 want_grad=True)
    return grads_a, grads_b


def _descend(x0: np.ndarray, fun_grad: Callable, project: Callable | None = None,
             max_iter: int = 500, tol: float = 1e-8, c_armijo: float = 1e-4):
    """Monotone projected gradient descent with backtracking (halving) search."""
    x = x0.copy() if project is None else project(x0.copy())
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise NumericalError("non-finite objective at the initial point")
    trace = [f]
    step = 1.0 / (1.0 + float(np.linalg.norm(g)))
    for _ in range(max_iter):
        moved = False
        s = step
        for _ in range(60):
            cand = x - s * g
            if project is not None:
                cand = project(cand)
            decrease = float(np.dot(g, x - cand))
            fc, gc = fun_grad(cand)
            if np.isfinite(fc) and fc <= f - c_armijo * decrease and decrease > 0:
                dx = cand - x
                dg = gc - g
                denom = float(np.dot(dx, dg))
                step = (float(np.dot(dx, dx)) / denom
                        if denom > 0 else s * 2.0)
                step = float(np.clip(step, 1e-12, 1e12))
                x, f_new, g = cand, fc, gc
                moved = True
                break
            s *= 0.5
        if not moved:
            break
        improvement = (f - f_new) / max(1.0, abs(f))
        f = f_new
        trace.append(f)
        if improvement < tol:
            break
    return x, f, trace


def _pack_params(kappa: VariationalRateParams):
    """Concatenate log-parameters; returns the vector and an unpacker."""
    parts, layout = [], []
    for n in kappa.nodes:
        a = kappa.alphas[n]
        card = a.shape[0]
        mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(a.shape, dtype=bool)
        parts.append(np.log(a[mask]))
        parts.append(np.log(kappa.betas[n]).ravel())
        layout.append((n, mask, a.shape, kappa.betas[n].shape))
    theta0 = np.concatenate(parts) if parts else np.zeros(0)

    def unpack(theta: np.ndarray) -> VariationalRateParams:
        out = kappa.copy()
        at = 0
        for n, mask, ashape, bshape in layout:
            na = int(mask.sum())
            a = np.ones(ashape)
            a[mask] = np.exp(theta[at:at + na])
            at += na
            nb = int(np.prod(bshape))
            out.alphas[n] = a
            out.betas[n] = np.exp(theta[at:at + nb]).reshape(bshape)
            at += nb
        return out

    def pack_grads(grads_a: dict, grads_b: dict, kap: VariationalRateParams) -> np.ndarray:
        segs = []
        for n, mask, _, _ in layout:
            segs.append((grads_a[n] * kap.alphas[n])[mask])
            segs.append((grads_b[n] * kap.betas[n]).ravel())
        return np.concatenate(segs) if segs else np.zeros(0)

    return theta0, unpack, pack_grads


def minimize_vbhc_parameters(posterior: RatePosterior, intervention: Intervention | None,
                             s0, horizon: float, *, num_samples: int = 10,
                             rng: np.random.Generator | None = None,
                             context: ParameterDesignContext | None = None,
                             max_iter: int = 500, tol: float = 1e-8):
    """Tighten the parameter bound over its gamma surrogates.

    Descends in log-parameter space (positivity for free) from the posterior
    counts; the returned value never exceeds the initial one.
    """
    context = _context_or_draw(posterior, intervention, num_samples, rng, context)
    averages = context.moment_averages(intervention, s0, horizon)
    nodes = tuple(sorted(averages))
    kappa0 = VariationalRateParams.from_posterior(posterior, nodes)
    if not nodes:
        value = CriterionValue(value=0.0, initial_value=0.0, trace=(0.0,))
        return value, kappa0
    theta0, unpack, pack_grads = _pack_params(kappa0)

    def fun_grad(theta):
        kap = unpack(theta)
        f, ga, gb = _param_objective_terms(kap, posterior, averages, want_grad=True)
        return f, pack_grads(ga, gb, kap)

    theta, f, trace = _descend(theta0, fun_grad, max_iter=max_iter, tol=tol)
    return (CriterionValue(value=f, initial_value=trace[0], trace=tuple(trace)),
            unpack(theta))


def bhc_parameters(posterior: RatePosterior, intervention: Intervention | None,
                   s0, horizon: float, *, num_samples: int = 10,
                   rng: np.random.Generator | None = None,
                   context: ParameterDesignContext | None = None,
                   method: str = "analytic") -> CriterionValue:
    """Expected posterior-pair KL rate under the candidate intervention.

    ``analytic`` takes the inner expectation in closed form (this is exactly
    the variational bound at its starting point, making the bound chain
    min-VBHC <= BHC hold without Monte Carlo error); ``pairs`` draws
    independent second samples and averages the plain process KL.
    """
    if method == "analytic":
        return vbhc_parameters(posterior, intervention, s0, horizon,
                               num_samples=num_samples, rng=rng, context=context)
    if method != "pairs":
        raise ValueError("method must be 'analytic' or 'pairs'")
    context = _context_or_draw(posterior, intervention, num_samples, rng, context)
    if rng is None:
        raise ValueError("the pairs method draws fresh partners and needs an rng")
    cards = posterior.state_cards
    free = (intervention.free_nodes if intervention is not None
            else tuple(range(len(cards))))
    ws = _generators_for(context.models, context.ws_full, intervention)
    dwell, trans = _subspace_moments(ws, cards, intervention, s0, horizon)
    expected = []
    for s in range(len(context.samples)):
        per_node = {}
        for n in free:
            t_cells, d_cells = _project_batch(dwell[s:s + 1], trans[s:s + 1], cards,
                                              n, posterior.parent_sets[n])
            per_node[n] = NodeStats(t_cells[0], d_cells[0])
        expected.append(per_node)
    values = []
    for s, rates in enumerate(context.samples):
        partner = posterior.sample_rates(rng)
        stats = [expected[s].get(n) if n in free else None
                 for n in range(len(cards))]
        filled = [st if st is not None else NodeStats.zero(cards[n], 1)
                  for n, st in enumerate(stats)]
        values.append(kl_ctbn_rates(rates, partner, filled, nodes=free))
    arr = np.array(values)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return CriterionValue(value=float(arr.mean()), per_sample=arr, se=se)


def eig_parameters(posterior: RatePosterior, intervention: Intervention | None,
                   s0, horizon: float, *, num_outer: int = 10, num_inner: int = 10,
                   rng: np.random.Generator) -> CriterionValue:
    """Nested Monte Carlo information gain for the rate parameters.

    Outer: rate draws.  Inner: trajectories simulated under the intervened
    draw; each contributes the log-density change of the draw under the
    conjugate update by that trajectory's statistics.
    """
    if num_outer < 1 or num_inner < 1:
        raise ValueError("sample counts must be at least 1")
    cards = posterior.state_cards
    graph = graph_from_parent_sets(posterior.parent_sets)
    free = (intervention.free_nodes if intervention is not None
            else tuple(range(len(cards))))
    outer_means = np.zeros(num_outer)
    for j in range(num_outer):
        rates = posterior.sample_rates(rng)
        model = Ctbn(cards, graph, rates)
        inner = np.zeros(num_inner)
        for l in range(num_inner):
            traj = sample_path(model, intervention, s0, horizon, rng)
            stats = extract_statistics(traj, graph, intervention)
            delta = 0.0
            for n in free:
                block = stats.per_node[n].get(0)
                if block is None:
                    continue
                a0 = posterior.alphas(n)
                b0 = np.broadcast_to(
                    (posterior.prior_beta + posterior.counts[n].dwell)[:, None, :],
                    a0.shape)
                m_cnt = block.trans
                t_cnt = np.broadcast_to(block.dwell[:, None, :], a0.shape)
                a1 = a0 + m_cnt
                b1 = b0 + t_cnt
                lam = rates[n]
                card = cards[n]
                mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(a0.shape, bool)
                logl = np.zeros_like(lam)
                np.log(lam, out=logl, where=lam > 0)
                cell = (a1 * np.log(b1) - gammaln(a1)
                        - a0 * np.log(b0) + gammaln(a0)
                        + m_cnt * logl - t_cnt * lam)
                delta += float(cell[mask].sum())
            inner[l] = delta
        outer_means[j] = inner.mean()
    se = (float(outer_means.std(ddof=1) / np.sqrt(num_outer))
          if num_outer > 1 else 0.0)
    return CriterionValue(value=float(outer_means.mean()),
                          per_sample=outer_means, se=se)


# ---------------------------------------------------------------------------
# structure-learning criteria
# ---------------------------------------------------------------------------

def kl_marginal_structures_approx(stats_own: NodeStats, stats_alt: NodeStats,
                                  hyper_own, hyper_alt) -> float:
    """First-order divergence between marginal scores of two parent sets.

    ``stats_*`` are expected statistics projected under each parent set and
    ``hyper_*`` the (alpha, beta) posterior tables for the node under each.
    The double sum over both config spaces separates into config-count-
    weighted single sums.
    """

    def g_and_size(stats: NodeStats, hyper):
        a0, b0 = hyper
        card, _, configs = stats.trans.shape
        mask = ~np.eye(card, dtype=bool)[:, :, None] & np.ones(stats.trans.shape, bool)
        a_hat = a0 + stats.trans
        b_hat = b0 + stats.dwell[:, None, :]
        if np.any(np.broadcast_to(b_hat, stats.trans.shape)[mask] <= 0):
            raise NumericalError("non-positive expected rate parameter")
        g = float((gammaln(a_hat) - a_hat * np.log(b_hat))[mask].sum())
        return g, configs

    g_own, size_own = g_and_size(stats_own, hyper_own)
    g_alt, size_alt = g_and_size(stats_alt, hyper_alt)
    return size_alt * g_own - size_own * g_alt


@dataclass
class VariationalStructureParams:
    """Per free node: categorical weights over the candidate parent sets."""

    nodes: tuple[int, ...]
    weights: dict

    @classmethod
    def from_posterior(cls, posterior: StructurePosterior,
                       nodes: Sequence[int]) -> "VariationalStructureParams":
        nodes = tuple(int(n) for n in nodes)
        return cls(nodes, {n: posterior.probs(n) for n in nodes})

    def copy(self) -> "VariationalStructureParams":
        return VariationalStructureParams(self.nodes,
                                          {n: w.copy() for n, w in self.weights.items()})


def _structure_rows(context: StructureDesignContext,
                    intervention: Intervention | None, s0, horizon: float) -> dict:
    """Sample-averaged divergence rows dbar[n][k] toward each candidate set."""
    tables = context.score_tables(intervention, s0, horizon)
    belief = context.belief
    rows = {}
    for n, g in tables.items():
        sizes = np.array([prod(belief.state_cards[m] for m in p) if p else 1
                          for p in belief.candidates[n]], dtype=float)
        own = np.array([context.parent_idx[s][n] for s in range(g.shape[0])])
        g_own = g[np.arange(g.shape[0]), own]
        inner = sizes[None, :] * g_own[:, None] - sizes[own][:, None] * g
        rows[n] = inner.mean(axis=0)
    return rows


def _structure_objective(kappa: VariationalStructureParams, posterior: StructurePosterior,
                         rows: dict, want_grad: bool):
    value = 0.0
    grads = {}
    for n in kappa.nodes:
        q = kappa.weights[n]
        p_log = posterior.log_probs[n]
        d = rows[n]
        pos = q > 0
        logq = np.full_like(q, -745.0)
        np.log(q, out=logq, where=pos)
        # q mass on zero-prior candidates makes the divergence +inf; keep it.
        kl = float(np.sum(q[pos] * (logq[pos] - p_log[pos])))
        value += float(q @ d) + kl
        if want_grad:
            grads[n] = d + logq - np.maximum(p_log, -745.0) + 1.0
    if want_grad:
        return value, grads
    return value


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _structure_context_or_draw(belief, num_samples, rng, context, posterior):
    if context is not None:
        return context
    if rng is None:
        raise ValueError("either a context or an rng is required")
    return StructureDesignContext.draw(belief, num_samples, rng, posterior=posterior)


def vbhc_structure(belief: StructureBelief, intervention: Intervention | None,
                   s0, horizon: float, *, num_samples: int = 10,
                   rng: np.random.Generator | None = None,
                   context: StructureDesignContext | None = None,
                   posterior: StructurePosterior | None = None,
                   kappa: VariationalStructureParams | None = None) -> CriterionValue:
    """The structure bound at ``kappa`` (the posterior weights by default)."""
    context = _structure_context_or_draw(belief, num_samples, rng, context, posterior)
    rows = _structure_rows(context, intervention, s0, horizon)
    nodes = tuple(sorted(rows))
    if kappa is None:
        kappa = VariationalStructureParams.from_posterior(context.posterior, nodes)
    value = _structure_objective(kappa, context.posterior, rows, want_grad=False)
    return CriterionValue(value=value, initial_value=value)


def vbhc_structure_gradients(belief: StructureBelief, intervention: Intervention | None,
                             s0, horizon: float, kappa: VariationalStructureParams, *,
                             num_samples: int = 10,
                             rng: np.random.Generator | None = None,
                             context: StructureDesignContext | None = None,
                             posterior: StructurePosterior | None = None) -> dict:
    context = _structure_context_or_draw(belief, num_samples, rng, context, posterior)
    rows = _structure_rows(context, intervention, s0, horizon)
    _, grads = _structure_objective(kappa, context.posterior, rows, want_grad=True)
    return grads


def minimize_vbhc_structure(belief: StructureBelief, intervention: Intervention | None,
                            s0, horizon: float, *, num_samples: int = 10,
                            rng: np.random.Generator | None = None,
                            context: StructureDesignContext | None = None,
                            posterior: StructurePosterior | None = None,
                            max_iter: int = 500, tol: float = 1e-8):
    """Tighten the structure bound over the per-node simplices."""
    context = _structure_context_or_draw(belief, num_samples, rng, context, posterior)
    rows = _structure_rows(context, intervention, s0, horizon)
    nodes = tuple(sorted(rows))
    kappa0 = VariationalStructureParams.from_posterior(context.posterior, nodes)
    if not nodes:
        return (CriterionValue(value=0.0, initial_value=0.0, trace=(0.0,)), kappa0)
    sizes = [kappa0.weights[n].size for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def unpack(theta):
        kap = kappa0.copy()
        for i, n in enumerate(nodes):
            kap.weights[n] = theta[bounds[i]:bounds[i + 1]]
        return kap

    def fun_grad(theta):
        kap = unpack(theta)
        f, grads = _structure_objective(kap, context.posterior, rows, want_grad=True)
        return f, np.concatenate([grads[n] for n in nodes])

    def project(theta):
        out = theta.copy()
        for i in range(len(nodes)):
            out[bounds[i]:bounds[i + 1]] = _project_simplex(theta[bounds[i]:bounds[i + 1]])
        return out

    theta0 = np.concatenate([kappa0.weights[n] for n in nodes])
    theta, f, trace = _descend(theta0, fun_grad, project=project,
                               max_iter=max_iter, tol=tol)
    return (CriterionValue(value=f, initial_value=trace[0], trace=tuple(trace)),
            unpack(theta))


def bhc_structure(belief: StructureBelief, intervention: Intervention | None,
                  s0, horizon: float, *, num_samples: int = 10,
                  rng: np.random.Generator | None = None,
                  context: StructureDesignContext | None = None,
                  posterior: StructurePosterior | None = None) -> CriterionValue:
    """The structure bound at its starting point (variational weights = posterior)."""
    return vbhc_structure(belief, intervention, s0, horizon, num_samples=num_samples,
                          rng=rng, context=context, posterior=posterior)


def eig_structure(belief: StructureBelief, intervention: Intervention | None,
                  s0, horizon: float, *, num_samples: int = 10,
                  rng: np.random.Generator,
                  posterior: StructurePosterior | None = None) -> CriterionValue:
    """Monte Carlo information gain for the parent sets.

    Each sample draws a graph and rates from the joint posterior, simulates
    one trajectory under the candidate intervention, and measures the KL
    divergence of the refreshed parent-set posterior from the current one.
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    if posterior is None:
        posterior = belief.structure_posterior()
    cards = belief.state_cards
    free = (intervention.free_nodes if intervention is not None
            else tuple(range(len(cards))))
    values = np.zeros(num_samples)
    for s in range(num_samples):
        idx = tuple(int(rng.choice(len(belief.candidates[n]), p=posterior.probs(n)))
                    for n in range(len(cards)))
        psets = tuple(belief.candidates[n][idx[n]] for n in range(len(cards)))
        rates = []
        for n in range(len(cards)):
            a, b = belief.node_hyperparameters(n, psets[n])
            lam = rng.gamma(shape=a, scale=1.0 / b)
            ar = np.arange(cards[n])
            lam[ar, ar, :] = 0.0
            rates.append(lam)
        model = Ctbn(cards, graph_from_parent_sets(psets), tuple(rates))
        traj = sample_path(model, intervention, s0, horizon, rng)
        total = 0.0
        for n in free:
            lp = posterior.log_probs[n]
            delta = np.zeros(lp.size)
            for k, parents in enumerate(belief.candidates[n]):
                extra = node_statistics(traj, n, parents, intervention)
                table = belief.tables[n][k]
                merged = NodeStats(table.trans + extra.trans, table.dwell + extra.dwell)
                delta[k] = (structure_marginal_log_likelihood(
                                merged, belief.prior_alpha, belief.prior_beta)
                            - structure_marginal_log_likelihood(
                                table, belief.prior_alpha, belief.prior_beta))
            new = lp + delta
            new -= logsumexp(new)
            q = np.exp(new)
            pos = q > 0
            total += float(np.sum(q[pos] * (new[pos] - lp[pos])))
        values[s] = total
    se = (float(values.std(ddof=1) / np.sqrt(num_samples))
          if num_samples > 1 else 0.0)
    return CriterionValue(value=float(values.mean()), per_sample=values, se=se)


# ---------------------------------------------------------------------------
# strategy dispatch
# ---------------------------------------------------------------------------

@dataclass
class SelectionResult:
    index: int
    intervention: Intervention
    scores: np.ndarray | None = None


def select_intervention(strategy: str, candidates: Sequence[Intervention], *,
                        rng: np.random.Generator, target: str = "parameters",
                        posterior: RatePosterior | None = None,
                        belief: StructureBelief | None = None,
                        s0=None, horizon: float = 1.0, num_samples: int = 10,
                        num_inner: int = 10) -> SelectionResult:
    """Pick a candidate according to the named strategy.

    Criterion strategies evaluate every candidate on one shared set of
    posterior samples; ties break toward the lowest candidate index.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "passive":
        for i, cand in enumerate(candidates):
            if cand.is_noop():
                return SelectionResult(i, cand)
        raise ValueError("passive strategy needs a no-op candidate")
    if strategy == "random":
        i = int(rng.integers(len(candidates)))
        return SelectionResult(i, candidates[i])

    if target == "parameters":
        if posterior is None:
            raise ValueError("parameter-target strategies need a rate posterior")
        if strategy == "eig":
            scores = np.array([
                eig_parameters(posterior, cand, s0, horizon, num_outer=num_samples,
                               num_inner=num_inner, rng=rng).value
                for cand in candidates])
        else:
            context = ParameterDesignContext.draw(posterior, num_samples, rng)
            if strategy == "bhc":
                scores = np.array([
                    bhc_parameters(posterior, cand, s0, horizon, context=context).value
                    for cand in candidates])
            else:
                scores = np.array([
                    minimize_vbhc_parameters(posterior, cand, s0, horizon,
                                             context=context)[0].value
                    for cand in candidates])
    elif target == "structure":
        if belief is None:
            raise ValueError("structure-target strategies need a belief")
        sp = belief.structure_posterior()
        if strategy == "eig":
            scores = np.array([
                eig_structure(belief, cand, s0, horizon, num_samples=num_samples,
                              rng=rng, posterior=sp).value
                for cand in candidates])
        else:
            context = StructureDesignContext.draw(belief, num_samples, rng, posterior=sp)
            if strategy == "bhc":
                scores = np.array([
                    bhc_structure(belief, cand, s0, horizon, context=context).value
                    for cand in candidates])
            else:
                scores = np.array([
                    minimize_vbhc_structure(belief, cand, s0, horizon,
                                            context=context)[0].value
                    for cand in candidates])
    else:
        raise ValueError(f"unknown target {target!r}")

    if strategy == "neg-vbhc":
        i = int(np.argmin(scores))
    else:
        i = int(np.argmax(scores))
    return SelectionResult(i, candidates[i], scores)
