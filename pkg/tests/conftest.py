import numpy as np
import pytest

from resilient_ne.dynamics import initial_estimate
from resilient_ne.games import hvac_game, solve_ne
from resilient_ne.graph import build_digraph

# 0-based (sender, receiver) pairs of the five-node test graph
FIVE_NODE_EDGES = [(0, 1), (1, 2), (1, 3), (2, 0), (3, 4), (4, 0)]
HVAC_NE_PUBLISHED = np.array([2.0147, 6.7766, 11.5385, 16.3004, 21.0623])


@pytest.fixture
def five_node_graph():
    return build_digraph(5, FIVE_NODE_EDGES)


@pytest.fixture
def hvac():
    return hvac_game()


@pytest.fixture
def hvac_ne(hvac):
    return solve_ne(hvac)


@pytest.fixture
def hvac_x0():
    return initial_estimate([-2, -4, -6, -8, -10], [[15, 10, 5, 0]] * 5)


def richardson_partial(game, i, x):
    """Central differences with one Richardson step.

    The step grows with the cost magnitude so that rounding in large costs
    (about eps * |J|) stays below the fourth-order truncation error.
    """
    x = np.asarray(x, dtype=float)
    floor = (np.finfo(float).eps * max(1.0, abs(game.cost(i, x)))) ** 0.2
    sl = game.own_slice(i)
    out = []
    for k in range(sl.start, sl.stop):
        def d(h):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            return (game.cost(i, xp) - game.cost(i, xm)) / (2 * h)

        h = max(1e-3 * max(1.0, abs(x[k])), floor)
        out.append((4 * d(h / 2) - d(h)) / 3)
    return np.array(out)


def coverage_events(schedule):
    """Breakpoints of the attack indicator from a +1/-1 event sweep."""
    events = []
    for ivs in schedule.intervals.values():
        for a, b in ivs:
            events += [(a, 1), (b, -1)]
    events.sort(key=lambda e: (e[0], -e[1]))
    depth, segments, start = 0, [], None
    for t, step in events:
        if depth == 0 and step == 1:
            start = t
        depth += step
        if depth == 0:
            segments.append((start, t))
    # touching segments count as one interval
    merged = []
    for a, b in segments:
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return merged


def brute_counts(schedule, T1, T2):
    segs = coverage_events(schedule)
    count = sum(1 for a, b in segs if a < T2 and b > T1)
    measure = sum(max(0.0, min(b, T2) - max(a, T1)) for a, b in segs)
    return count, measure


def brute_verify(schedule, budget, delta=1e-7):
    pts = set()
    for ivs in schedule.intervals.values():
        for a, b in ivs:
            pts.update((a, b))
    pts.update((0.0, schedule.horizon))
    cand = sorted({min(max(p + s, 0.0), schedule.horizon) for p in pts for s in (-delta, 0.0, delta)})
    f_ok = d_ok = True
    for i, T1 in enumerate(cand):
        for T2 in cand[i + 1:]:
            n, m = brute_counts(schedule, T1, T2)
            if n > budget.N0 + (T2 - T1) / budget.T_f + 1e-12:
                f_ok = False
            if m > budget.T0 + (T2 - T1) / budget.T_a + 1e-12:
                d_ok = False
    return f_ok, d_ok
