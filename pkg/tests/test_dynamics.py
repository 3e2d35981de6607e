import dataclasses

import numpy as np
import pytest
from scipy.linalg import expm
from hypothesis import given, settings
from hypothesis import strategies as st

from resilient_ne.analysis import log_decay_monotone
from resilient_ne.attack import AttackSchedule, in_union, staggered_schedule, union_attack_intervals
from resilient_ne.dynamics import (
    ATTACK,
    SAFE,
    DivergenceError,
    DynamicsError,
    ScenarioConfig,
    StackedEstimate,
    consensus_error,
    decompose,
    global_union,
    initial_estimate,
    integrate,
    rhs,
    selection_matrices,
    trace_header,
    write_trace_csv,
)
from resilient_ne.games import hvac_game, nonquadratic_game, polynomial_game, solve_ne
from resilient_ne.graph import build_digraph, laplacian_bundle

from conftest import FIVE_NODE_EDGES

CHANNELS = [(r, s) for s, r in FIVE_NODE_EDGES]  # (receiver, sender)
TWO_CYCLE = build_digraph(2, [(0, 1), (1, 0)])
TOY = polynomial_game((1, 1), [[(0.5, (2, 0))], [(0.5, (0, 2))]])
TOY_X = StackedEstimate([1.0, 0.0, 0.0, 1.0], (1, 1))


def hvac_scenario(schedule=None, kappa=10.0, t_end=5.0, step=1e-2, x0=None, **kw):
    g = build_digraph(5, FIVE_NODE_EDGES)
    if x0 is None:
        x0 = initial_estimate([-2, -4, -6, -8, -10], [[15, 10, 5, 0]] * 5)
    schedule = schedule or AttackSchedule.empty(t_end)
    return ScenarioConfig(hvac_game(), g, schedule, kappa, x0, t_end, step=step, **kw)


# selection matrices


def test_selection_scalar():
    sel = selection_matrices((1, 1))
    np.testing.assert_array_equal(sel.blocks[0], [[1, 0]])
    np.testing.assert_array_equal(sel.blocks[1], [[0, 1]])


def test_selection_block():
    sel = selection_matrices((2, 1))
    np.testing.assert_array_equal(sel.blocks[0], [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(sel.blocks[1], [[0, 0, 1]])


@given(st.lists(st.integers(1, 3), min_size=1, max_size=5))
def test_selection_invariants(dims):
    sel = selection_matrices(dims)
    for k, Ri in zip(dims, sel.blocks):
        np.testing.assert_array_equal(Ri @ Ri.T, np.eye(k))
    assert np.linalg.norm(sel.R, 2) == pytest.approx(1.0)
    xs = np.arange(sum(dims), dtype=float) + 1
    np.testing.assert_array_equal(sel.R @ np.tile(xs, len(dims)), xs)


def test_selection_rejects_empty_player():
    with pytest.raises(DynamicsError):
        selection_matrices((1, 0))


# consensus term


def test_consensus_error_two_cycle_safe():
    bundle = laplacian_bundle(TWO_CYCLE)
    e = consensus_error(SAFE, TOY_X, bundle, 1.0)
    np.testing.assert_allclose(e, [-0.5, 0.5, 0.5, -0.5])


def test_consensus_error_vanishes_at_consensus():
    bundle = laplacian_bundle(build_digraph(5, FIVE_NODE_EDGES))
    x = StackedEstimate.consensus([1.0, 2.0, 3.0, 4.0, 5.0], 5)
    np.testing.assert_allclose(consensus_error(SAFE, x, bundle, 7.0), 0.0, atol=1e-12)
    np.testing.assert_allclose(consensus_error(ATTACK, x, bundle, 7.0, bundle.raw), 0.0, atol=1e-12)


def test_consensus_error_total_paralysis():
    bundle = laplacian_bundle(TWO_CYCLE)
    e = consensus_error(ATTACK, TOY_X, bundle, 1.0, np.zeros((2, 2)))
    np.testing.assert_array_equal(e, 0.0)


def test_consensus_error_errors():
    bundle = laplacian_bundle(build_digraph(5, FIVE_NODE_EDGES))
    with pytest.raises(DynamicsError):
        consensus_error(SAFE, TOY_X, bundle, 1.0)
    with pytest.raises(DynamicsError):
        consensus_error(ATTACK, TOY_X, laplacian_bundle(TWO_CYCLE), 1.0)
    with pytest.raises(DynamicsError):
        consensus_error("paused", TOY_X, laplacian_bundle(TWO_CYCLE), 1.0)


# right-hand side


def test_rhs_toy():
    sc = ScenarioConfig(TOY, TWO_CYCLE, AttackSchedule.empty(1.0), 1.0, TOY_X, 1.0)
    # gradient term (-1, 0 | 0, -1) plus consensus (-1/2, 1/2 | 1/2, -1/2)
    np.testing.assert_allclose(rhs(0.0, TOY_X, sc), [-1.5, 0.5, 0.5, -1.5])


def test_rhs_uses_own_estimate():
    # player 2 sees x1 = 5 in its own row, but only its own coordinate enters its gradient
    x = StackedEstimate([1.0, 0.0, 5.0, 1.0], (1, 1))
    sc = ScenarioConfig(TOY, TWO_CYCLE, AttackSchedule.empty(1.0), 1e-9, x, 1.0)
    np.testing.assert_allclose(rhs(0.0, x, sc), [-1.0, 0.0, 0.0, -1.0], atol=1e-8)


def test_rhs_attack_mode_all_channels_lost():
    s = AttackSchedule({(0, 1): ((0.0, 1.0),), (1, 0): ((0.0, 1.0),)}, 1.0)
    sc = ScenarioConfig(TOY, TWO_CYCLE, s, 1.0, TOY_X, 1.0)
    np.testing.assert_allclose(rhs(0.5, TOY_X, sc), [-1.0, 0.0, 0.0, -1.0])


@pytest.mark.parametrize("attacked", [False, True])
def test_rhs_zero_at_equilibrium(hvac_ne, attacked):
    x = StackedEstimate.consensus(hvac_ne.x_star, 5)
    s = staggered_schedule(CHANNELS, 10.0) if attacked else None
    sc = hvac_scenario(s, t_end=10.0, x0=x)
    np.testing.assert_allclose(rhs(3.0, x, sc), 0.0, atol=1e-9)


# decomposition


class _Scalars:
    """Two players holding one scalar estimate each, as an (N, 1) matrix."""

    def __init__(self, vals):
        self.x = np.asarray(vals, dtype=float)
        self.N = len(vals)

    def matrix(self):
        return self.x.reshape(self.N, 1)


def test_decompose_example():
    par, perp, xbar = decompose(_Scalars([1.0, 3.0]))
    np.testing.assert_allclose(xbar, [2.0])
    np.testing.assert_allclose(par, [2.0, 2.0])
    np.testing.assert_allclose(perp, [-1.0, 1.0])


def test_decompose_consensus_state():
    _, perp, _ = decompose(StackedEstimate.consensus([1.0, -2.0, 4.0], 3))
    np.testing.assert_allclose(perp, 0.0, atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9))
def test_decompose_orthogonal(vals):
    x = StackedEstimate(vals, (1, 1, 1))
    par, perp, _ = decompose(x)
    assert abs(par @ perp) <= 1e-9 * max(float(x.x @ x.x), 1e-300)
    np.testing.assert_allclose(par + perp, x.x, atol=1e-12)


# integration


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=15, deadline=None)
def test_equilibrium_invariance(seed):
    rng = np.random.default_rng(seed)
    ivs = {}
    for ch in CHANNELS:
        if rng.random() < 0.6:
            a = rng.uniform(0, 4)
            ivs[ch] = ((a, a + rng.uniform(0.01, 1.0)),)
    x_star = solve_ne(hvac_game()).x_star
    sc = hvac_scenario(AttackSchedule(ivs, 5.0), x0=StackedEstimate.consensus(x_star, 5))
    tr = integrate(sc)
    dev = np.abs(tr.states - np.tile(x_star, 5)).max()
    assert dev < 1e-9


def test_trace_shapes_and_grid(hvac_ne):
    tr = integrate(hvac_scenario(t_end=2.0, decimation=10), hvac_ne)
    assert tr.states.shape == (21, 25)
    np.testing.assert_allclose(np.diff(tr.times), 0.1)
    assert len(tr.mode) == len(tr.error_to_ne) == len(tr.consensus_gap) == 21


def test_mode_fidelity():
    s = AttackSchedule({(1, 0): ((0.3004, 0.7), (1.5, 2.0)), (4, 3): ((0.65, 0.9),)}, 3.0)
    sc = hvac_scenario(s, t_end=3.0, step=1e-3)
    tr = integrate(sc)
    snapped = global_union(sc)
    assert snapped == [(0.3, 0.9), (1.5, 2.0)]
    assert tr.snap_distance == pytest.approx(4e-4)
    expected = [in_union(snapped, t) for t in tr.times]
    assert list(tr.mode) == expected
    # away from the snapped endpoints the raw union agrees too
    raw = union_attack_intervals(s)
    for t, m in zip(tr.times, tr.mode):
        if min(abs(t - p) for iv in raw for p in iv) > 1e-3:
            assert m == in_union(raw, t)


def _final(sc):
    return integrate(sc).states[-1]


@pytest.mark.parametrize("game", ["hvac", "nonquadratic"])
def test_step_halving_order(game):
    if game == "hvac":
        mk = lambda h: hvac_scenario(t_end=2.0, step=h)
    else:
        g = nonquadratic_game()
        x0 = initial_estimate([0.5, -0.5, 0.2, 0.1, 0.3])
        mk = lambda h: ScenarioConfig(g, build_digraph(5, FIVE_NODE_EDGES), AttackSchedule.empty(1.0),
                                      10.0, x0, 1.0, step=h)
    a, b, c = (_final(mk(h)) for h in (0.04, 0.02, 0.01))
    order = np.log2(np.linalg.norm(a - b) / np.linalg.norm(b - c))
    assert order >= 3.5


def test_affine_fast_path_matches_generic_path(hvac_ne):
    s = AttackSchedule({(1, 0): ((0.5, 1.2),), (0, 2): ((1.0, 1.7),)}, 3.0)
    fast = integrate(hvac_scenario(s, t_end=3.0, step=1e-2), hvac_ne)
    generic_game = dataclasses.replace(hvac_game(), constant_jacobian=None)
    sc = dataclasses.replace(hvac_scenario(s, t_end=3.0, step=1e-2), game=generic_game)
    slow = integrate(sc, hvac_ne)
    np.testing.assert_allclose(fast.states, slow.states, rtol=0, atol=1e-11)
    np.testing.assert_array_equal(fast.mode, slow.mode)


def test_divergence_error_carries_partial_trace():
    unstable = polynomial_game((1, 1), [[(-0.5, (2, 0))], [(-0.5, (0, 2))]])
    x0 = StackedEstimate([1.0, 1.0, 1.0, 1.0], (1, 1))
    sc = ScenarioConfig(unstable, TWO_CYCLE, AttackSchedule.empty(100.0), 1.0, x0, 100.0,
                        step=1e-2, divergence_guard=1e3)
    with pytest.raises(DivergenceError) as info:
        integrate(sc)
    tr = info.value.trace
    assert tr.diverged
    # per coordinate the own/other estimate pair obeys z' = A z, A = [[1/2, 1/2], [1/2, -1/2]]
    A = np.array([[0.5, 0.5], [0.5, -0.5]])
    grid = np.arange(0, 20, 1e-3)
    peak = np.array([np.abs(expm(A * t) @ [1.0, 1.0]).max() for t in grid])
    t_cross = grid[np.argmax(peak > 1e3)]
    assert tr.times[-1] <= t_cross < tr.times[-1] + 0.02
    assert len(tr.times) < 10001


def test_baseline_equals_resilient_without_attacks(hvac_ne):
    a = integrate(hvac_scenario(algorithm="resilient"), hvac_ne)
    b = integrate(hvac_scenario(algorithm="baseline"), hvac_ne)
    np.testing.assert_array_equal(a.states, b.states)


def test_baseline_differs_under_attack(hvac_ne):
    s = AttackSchedule({(1, 0): ((0.0, 2.0),)}, 5.0)
    a = integrate(hvac_scenario(s, algorithm="resilient"), hvac_ne)
    b = integrate(hvac_scenario(s, algorithm="baseline"), hvac_ne)
    assert np.abs(a.states - b.states).max() > 1e-3


def test_attack_free_hvac_converges(hvac_ne):
    tr = integrate(hvac_scenario(t_end=50.0, step=1e-3, decimation=10), hvac_ne)
    rel = tr.error_to_ne[-1] / np.linalg.norm(np.tile(hvac_ne.x_star, 5))
    assert rel < 1e-3
    x_star = hvac_ne.x_star
    np.testing.assert_allclose(tr.final_state.actions(), x_star, atol=1e-3 * np.linalg.norm(x_star))


def test_attack_free_monotone_decay_above_gain_bound(hvac_ne):
    tr = integrate(hvac_scenario(kappa=60.0, t_end=30.0, step=1e-3, decimation=10), hvac_ne)
    assert log_decay_monotone(tr.times, tr.error_to_ne, tail=0.8)


# output and validation


def test_trace_header():
    assert trace_header((1, 1)) == ["time", "mode", "x1_1[0]", "x1_2[0]", "x2_1[0]", "x2_2[0]",
                                    "error_to_ne", "consensus_gap"]
    assert trace_header((2, 1))[2:5] == ["x1_1[0]", "x1_1[1]", "x1_2[0]"]


def test_csv_is_deterministic(tmp_path, hvac_ne):
    s = AttackSchedule({(1, 0): ((0.5, 1.0),)}, 2.0)
    for name in ("a.csv", "b.csv"):
        write_trace_csv(integrate(hvac_scenario(s, t_end=2.0), hvac_ne), tmp_path / name)
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    rows = text.splitlines()
    assert rows[0].startswith("time,mode,x1_1[0]")
    assert len(rows) == 202
    assert ",attack," in rows[80] and ",safe," in rows[20]


def test_initial_estimate_defaults_to_true_actions():
    x = initial_estimate([1, 2, 3])
    np.testing.assert_array_equal(x.matrix(), [[1, 2, 3]] * 3)
    with pytest.raises(DynamicsError):
        initial_estimate([1, 2], [[1, 2]] * 2)


@pytest.mark.parametrize(
    "kw",
    [dict(kappa=0.0), dict(step=-1e-3), dict(t_end=0.0), dict(algorithm="greedy"), dict(decimation=0)],
)
def test_scenario_validation(kw):
    with pytest.raises(DynamicsError):
        hvac_scenario(AttackSchedule.empty(5.0), **kw)


def test_scenario_rejects_short_horizon_and_foreign_channels():
    with pytest.raises(DynamicsError):
        hvac_scenario(AttackSchedule.empty(1.0), t_end=2.0)
    with pytest.raises(DynamicsError):
        hvac_scenario(AttackSchedule({(3, 4): ((0.0, 1.0),)}, 5.0))
    with pytest.raises(DynamicsError):
        ScenarioConfig(TOY, build_digraph(5, FIVE_NODE_EDGES), AttackSchedule.empty(1.0), 1.0, TOY_X, 1.0)
