"""Path simulation and sufficient statistics."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbndesign.engine import expected_statistics_for_model
from ctbndesign.model import Ctbn, GammaRateSpec, Intervention, random_model
from ctbndesign.paths import (
    Trajectory,
    extract_statistics,
    load_trajectories,
    node_statistics,
    pool,
    sample_path,
    save_trajectories,
    simulate_statistics,
)


def chain_model(a=1.5, b=0.5, c0=2.0, c1=3.0, d0=0.25, d1=4.0):
    # node 0 autonomous, node 1 modulated by node 0
    graph = np.zeros((2, 2), dtype=bool)
    graph[0, 1] = True
    r0 = np.zeros((2, 2, 1))
    r0[0, 1, 0] = a
    r0[1, 0, 0] = b
    r1 = np.zeros((2, 2, 2))
    r1[0, 1, 0] = c0
    r1[0, 1, 1] = c1
    r1[1, 0, 0] = d0
    r1[1, 0, 1] = d1
    return Ctbn((2, 2), graph, (r0, r1))


def two_free_nodes():
    graph = np.zeros((2, 2), dtype=bool)
    r = np.zeros((2, 2, 1))
    r[0, 1, 0] = 2.0
    r[1, 0, 0] = 1.0
    return Ctbn((2, 2), graph, (r, r.copy()))


# ---------------------------------------------------------------------------
# trajectory container
# ---------------------------------------------------------------------------

def test_trajectory_segments_walk_the_event_list():
    traj = Trajectory((2, 2), (0, 0), [(0.5, 0, 1), (1.2, 1, 1), (2.0, 0, 0)], 3.0)
    segs = list(traj.segments())
    assert segs == [
        (0.0, 0.5, (0, 0)),
        (0.5, 1.2, (1, 0)),
        (1.2, 2.0, (1, 1)),
        (2.0, 3.0, (0, 1)),
    ]
    assert traj.num_transitions == 3


def test_trajectory_validation_rejects_bad_events():
    with pytest.raises(ValueError):
        Trajectory((2, 2), (0, 0), [(3.5, 0, 1)], 3.0)  # beyond horizon
    with pytest.raises(ValueError):
        Trajectory((2, 2), (0, 0), [(1.0, 0, 1), (0.5, 1, 1)], 3.0)  # not increasing
    with pytest.raises(ValueError):
        Trajectory((2, 2), (0, 0), [(1.0, 0, 0)], 3.0)  # no state change
    with pytest.raises(ValueError):
        Trajectory((2, 2), (0, 2), [], 3.0)  # initial out of range


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def test_sample_path_is_reproducible_and_well_formed():
    model = chain_model()
    rng = np.random.default_rng(7)
    traj = sample_path(model, None, (0, 0), 5.0, rng)
    again = sample_path(model, None, (0, 0), 5.0, np.random.default_rng(7))
    assert traj.events == again.events
    assert traj.num_transitions > 0
    last = 0.0
    state = [0, 0]
    for t, node, new in traj.events:
        assert last < t < 5.0
        assert new != state[node]
        state[node] = new
        last = t


def test_sample_path_respects_clamps():
    model = chain_model()
    iv = Intervention.clamp(2, {0: 1})
    traj = sample_path(model, iv, (0, 0), 20.0, np.random.default_rng(3))
    assert traj.initial == (1, 0)  # forced despite the requested 0
    assert all(node != 0 for _, node, _ in traj.events)
    assert traj.num_transitions > 0  # node 1 still moves


def test_sample_path_with_everything_clamped_has_no_events():
    model = chain_model()
    iv = Intervention.clamp(2, {0: 1, 1: 0})
    traj = sample_path(model, iv, (0, 0), 10.0, np.random.default_rng(0))
    assert traj.events == []
    assert traj.initial == (1, 0)


def test_sample_path_event_rate_matches_exit_rate():
    # single free binary node, rates 2 and 1: long-run jump rate 2*1/3 + 1*2/3
    model = two_free_nodes()
    iv = Intervention.clamp(2, {1: 0})
    horizon = 2000.0
    traj = sample_path(model, iv, (0, 0), horizon, np.random.default_rng(11))
    rate = traj.num_transitions / horizon
    assert abs(rate - 4.0 / 3.0) < 0.1


# ---------------------------------------------------------------------------
# statistics extraction
# ---------------------------------------------------------------------------

def test_extract_statistics_on_a_hand_walked_trajectory():
    model = chain_model()
    traj = Trajectory((2, 2), (0, 0), [(0.5, 0, 1), (1.2, 1, 1), (2.0, 0, 0)], 3.0)
    stats = extract_statistics(traj, model.graph)
    s0 = stats.observational(0)
    s1 = stats.observational(1)
    # node 0: dwell 0.5 at state 0, then 1.5 at state 1, then 1.0 at state 0
    npt.assert_allclose(s0.dwell[:, 0], [1.5, 1.5])
    npt.assert_allclose(s0.trans[0, 1, 0], 1.0)
    npt.assert_allclose(s0.trans[1, 0, 0], 1.0)
    # node 1 cells are (state, parent state); parent read at left limits
    npt.assert_allclose(s1.dwell[0, 0], 0.5)   # (x=0, u=0) before parent flips
    npt.assert_allclose(s1.dwell[0, 1], 0.7)   # (x=0, u=1) until 1.2
    npt.assert_allclose(s1.dwell[1, 1], 0.8)   # (x=1, u=1) until 2.0
    npt.assert_allclose(s1.dwell[1, 0], 1.0)   # (x=1, u=0) tail
    assert s1.trans[0, 1, 1] == 1.0  # the jump at 1.2 sees parent state 1
    assert s1.trans.sum() == 1.0


def test_dwell_times_sum_to_horizon_for_every_node():
    model = random_model((2, 3, 2), np.random.default_rng(5), GammaRateSpec(fast_nodes=(0,)))
    traj = sample_path(model, None, (0, 0, 0), 4.0, np.random.default_rng(6))
    stats = extract_statistics(traj, model.graph)
    for n in range(3):
        npt.assert_allclose(stats.observational(n).dwell.sum(), 4.0, atol=1e-12)


def test_extraction_keys_split_free_and_clamped_nodes():
    model = chain_model()
    iv = Intervention.clamp(2, {0: 1})
    traj = sample_path(model, iv, (1, 0), 5.0, np.random.default_rng(9))
    stats = extract_statistics(traj, model.graph, iv)
    assert list(stats.per_node[0].keys()) == [("clamp", 1)]
    assert list(stats.per_node[1].keys()) == [0]
    # the clamped node still dwells, but never transitions
    clamped = stats.per_node[0][("clamp", 1)]
    npt.assert_allclose(clamped.dwell.sum(), 5.0)
    assert clamped.trans.sum() == 0.0
    # and its key-0 view is empty
    assert stats.observational(0).dwell.sum() == 0.0


def test_node_statistics_matches_full_extraction():
    model = random_model((2, 2, 2), np.random.default_rng(15), GammaRateSpec(fast_nodes=(0, 1)))
    traj = sample_path(model, None, (0, 0, 0), 3.0, np.random.default_rng(16))
    stats = extract_statistics(traj, model.graph)
    for n in range(3):
        parents = tuple(np.flatnonzero(model.graph[:, n]))
        single = node_statistics(traj, n, parents)
        npt.assert_array_equal(single.trans, stats.observational(n).trans)
        npt.assert_array_equal(single.dwell, stats.observational(n).dwell)


def test_node_statistics_under_alternative_parent_sets_aggregates():
    model = chain_model()
    traj = sample_path(model, None, (0, 0), 6.0, np.random.default_rng(21))
    with_parent = node_statistics(traj, 1, (0,))
    without = node_statistics(traj, 1, ())
    npt.assert_allclose(without.dwell[:, 0], with_parent.dwell.sum(axis=1))
    npt.assert_allclose(without.trans[:, :, 0], with_parent.trans.sum(axis=2))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_pool_sums_matching_keys_and_keeps_conditions_apart():
    model = chain_model()
    obs = extract_statistics(sample_path(model, None, (0, 0), 4.0, np.random.default_rng(1)),
                             model.graph)
    iv = Intervention.clamp(2, {0: 1})
    clamped = extract_statistics(sample_path(model, iv, (0, 0), 4.0, np.random.default_rng(2)),
                                 model.graph, iv)
    merged = pool([obs, clamped, obs])
    # node 0: two observational copies plus one clamp block
    npt.assert_allclose(merged.per_node[0][0].dwell, 2.0 * obs.per_node[0][0].dwell)
    npt.assert_allclose(merged.per_node[0][("clamp", 1)].dwell,
                        clamped.per_node[0][("clamp", 1)].dwell)
    # node 1 was free throughout: all three runs pooled under key 0
    expected = obs.per_node[1][0].dwell * 2 + clamped.per_node[1][0].dwell
    npt.assert_allclose(merged.per_node[1][0].dwell, expected)


def test_pool_is_order_invariant_and_does_not_mutate_inputs():
    model = chain_model()
    runs = [extract_statistics(sample_path(model, None, (0, 0), 2.0, np.random.default_rng(s)),
                               model.graph)
            for s in range(4)]
    before = runs[0].per_node[0][0].dwell.copy()
    a = pool(runs)
    b = pool(runs[::-1])
    npt.assert_allclose(a.per_node[1][0].trans, b.per_node[1][0].trans)
    npt.assert_array_equal(runs[0].per_node[0][0].dwell, before)


def test_pool_rejects_mismatched_shapes():
    model = chain_model()
    other = two_free_nodes()
    a = extract_statistics(sample_path(model, None, (0, 0), 2.0, np.random.default_rng(0)),
                           model.graph)
    b = extract_statistics(sample_path(other, None, (0, 0), 2.0, np.random.default_rng(0)),
                           other.graph)
    with pytest.raises(ValueError):
        pool([a, b])


# ---------------------------------------------------------------------------
# fast accumulator
# ---------------------------------------------------------------------------

def test_simulate_statistics_reproduces_the_per_path_extraction():
    model = random_model((2, 2, 2), np.random.default_rng(30), GammaRateSpec(fast_nodes=(0,)))
    iv = Intervention.clamp(3, {2: 1})
    n_paths = 50
    mean, _ = simulate_statistics(model, iv, (0, 0, 0), 3.0,
                                  np.random.default_rng(77), n_paths)
    # identical draws, path by path
    rng = np.random.default_rng(77)
    totals = None
    for _ in range(n_paths):
        traj = sample_path(model, iv, (0, 0, 0), 3.0, rng)
        stats = extract_statistics(traj, model.graph, iv)
        blocks = [sum(ns.dwell.sum() for ns in stats.per_node[n].values()) for n in range(3)]
        per_node = []
        for n in range(3):
            acc = None
            for ns in stats.per_node[n].values():
                if acc is None:
                    acc = ns.copy()
                else:
                    acc.add(ns)
            per_node.append(acc)
        if totals is None:
            totals = per_node
        else:
            for n in range(3):
                totals[n].add(per_node[n])
        assert blocks == pytest.approx([3.0, 3.0, 3.0])
    for n in range(3):
        npt.assert_allclose(mean[n].dwell, totals[n].dwell / n_paths, atol=1e-12)
        npt.assert_allclose(mean[n].trans, totals[n].trans / n_paths, atol=1e-12)


def test_simulated_means_match_analytic_moments_within_error():
    model = chain_model()
    horizon = 2.0
    mean, se = simulate_statistics(model, None, (0, 0), horizon,
                                   np.random.default_rng(123), 4000)
    _, exact = expected_statistics_for_model(model, None, (0, 0), horizon)
    for n in range(2):
        err = np.abs(mean[n].dwell - exact[n].dwell)
        assert np.all(err <= 4.0 * se[n].dwell + 1e-9)
        err_t = np.abs(mean[n].trans - exact[n].trans)
        assert np.all(err_t <= 4.0 * se[n].trans + 1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dwell_conservation_holds_for_random_paths(seed):
    model = chain_model()
    traj = sample_path(model, None, (0, 0), 1.5, np.random.default_rng(seed))
    stats = extract_statistics(traj, model.graph)
    for n in range(2):
        npt.assert_allclose(stats.observational(n).dwell.sum(), 1.5, atol=1e-12)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_trajectory_round_trip_through_json(tmp_path):
    model = chain_model()
    iv = Intervention.clamp(2, {1: 1})
    pairs = [
        (sample_path(model, None, (0, 0), 3.0, np.random.default_rng(1)), None),
        (sample_path(model, iv, (0, 0), 3.0, np.random.default_rng(2)), iv),
    ]
    out = tmp_path / "trajs.json"
    save_trajectories(out, pairs)
    loaded = load_trajectories(out)
    assert len(loaded) == 2
    assert loaded[0][0].events == pairs[0][0].events
    assert loaded[0][1].is_noop()
    assert loaded[1][0].events == pairs[1][0].events
    assert loaded[1][1] == iv
    assert loaded[1][0].initial == pairs[1][0].initial
