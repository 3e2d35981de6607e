"""Switched NE-seeking dynamics and their fixed-step integration.

The stacked estimate ``x = col(x^1, ..., x^N)`` is handled internally as an
``(N, n)`` matrix whose row ``i`` is player i's estimate of the whole action
profile. Row-major flattening recovers the stacked vector.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attack import (
    AttackFlagState,
    AttackSchedule,
    active_channels,
    snap_schedule,
    step_flags,
    union_attack_intervals,
)
from .games import GameDefinition, NESolution, estimate_gradients
from .graph import Digraph, LaplacianBundle, effective_laplacian, laplacian_bundle

SAFE, ATTACK = "safe", "attack"
ALGORITHMS = ("resilient", "baseline")


class DynamicsError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: "SimulationTrace"):
        super().__init__(message)
        self.trace = trace


# stacked estimates ---------------------------------------------------------


@dataclass(frozen=True)
class StackedEstimate:
    x: np.ndarray
    action_dims: tuple[int, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        dims = tuple(int(k) for k in self.action_dims)
        N, n = len(dims), sum(dims)
        if x.size != N * n:
            raise DynamicsError(f"stacked estimate has {x.size} entries, expected N*n = {N * n}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "action_dims", dims)

    @property
    def N(self) -> int:
        return len(self.action_dims)

    @property
    def n(self) -> int:
        return sum(self.action_dims)

    def matrix(self) -> np.ndarray:
        return self.x.reshape(self.N, self.n)

    def view(self, i: int) -> np.ndarray:
        """Player i's estimate of the full profile."""
        return self.matrix()[i]

    def block(self, i: int, j: int) -> np.ndarray:
        """Player i's estimate of player j's action."""
        off = np.concatenate([[0], np.cumsum(self.action_dims)])
        return self.matrix()[i, off[j]:off[j + 1]]

    def actions(self) -> np.ndarray:
        return np.concatenate([self.block(i, i) for i in range(self.N)])

    @classmethod
    def consensus(cls, x, N: int, action_dims=None):
        x = np.asarray(x, dtype=float).reshape(-1)
        dims = action_dims if action_dims is not None else (1,) * x.size
        return cls(np.tile(x, N), dims)


def initial_estimate(own_actions: Sequence[Sequence[float]], others=None, action_dims=None):
    """Build ``x(0)`` from each player's own action and its view of the others.

    ``others[i]`` lists player i's estimates of every other player's action in
    player order (skipping i). When ``others`` is omitted, every player starts
    from the true initial actions of the others.
    """
    own = [np.atleast_1d(np.asarray(a, dtype=float)) for a in own_actions]
    dims = tuple(v.size for v in own) if action_dims is None else tuple(action_dims)
    N = len(own)
    X = np.tile(np.concatenate(own), (N, 1))
    if others is not None:
        if len(others) != N:
            raise DynamicsError(f"need estimates for {N} players, got {len(others)}")
        off = np.concatenate([[0], np.cumsum(dims)])
        for i, row in enumerate(others):
            vals = np.asarray(row, dtype=float).reshape(-1)
            expected = sum(dims) - dims[i]
            if vals.size != expected:
                raise DynamicsError(f"player {i}: {vals.size} estimate values, expected {expected}")
            X[i, np.r_[0:off[i], off[i + 1]:off[-1]]] = vals
    return StackedEstimate(X.reshape(-1), dims)


@dataclass(frozen=True)
class SelectionMatrix:
    blocks: tuple[np.ndarray, ...]
    R: np.ndarray


def selection_matrices(action_dims: Sequence[int]) -> SelectionMatrix:
    dims = [int(k) for k in action_dims]
    if any(k < 1 for k in dims):
        raise DynamicsError(f"action dimensions must be >= 1, got {dims}")
    n = sum(dims)
    off = np.concatenate([[0], np.cumsum(dims)])
    blocks = []
    for i, k in enumerate(dims):
        Ri = np.zeros((k, n))
        Ri[:, off[i]:off[i + 1]] = np.eye(k)
        blocks.append(Ri)
    N = len(dims)
    R = np.zeros((n, N * n))
    for i, Ri in enumerate(blocks):
        R[off[i]:off[i + 1], i * n:(i + 1) * n] = Ri
    return SelectionMatrix(tuple(blocks), R)


def own_mask(action_dims: Sequence[int]) -> np.ndarray:
    """Boolean ``(N, n)`` mask of each player's own coordinates in its row."""
    return selection_matrices(action_dims).R.sum(axis=0).reshape(len(action_dims), -1) > 0


def decompose(x: StackedEstimate):
    X = x.matrix()
    xbar = X.mean(axis=0)
    parallel = np.tile(xbar, x.N)
    return parallel, x.x - parallel, xbar


def consensus_gap(X: np.ndarray) -> float:
    return float(np.linalg.norm(X - X.mean(axis=0), axis=1).max())


# right-hand side -----------------------------------------------------------


def consensus_error(mode: str, x: StackedEstimate, bundle: LaplacianBundle, kappa: float,
                    attack_laplacian: Optional[np.ndarray] = None) -> np.ndarray:
    """Consensus term ``-kappa (L kron I) x`` in safe mode, ``-(L_psi kron I) x`` under attack."""
    X = x.matrix()
    if X.shape[0] != bundle.raw.shape[0]:
        raise DynamicsError(f"estimate has {X.shape[0]} players, graph has {bundle.raw.shape[0]} nodes")
    if mode == SAFE:
        return (-kappa * bundle.balanced @ X).reshape(-1)
    if mode == ATTACK:
        if attack_laplacian is None:
            raise DynamicsError("attack mode needs the surviving-channel Laplacian")
        return (-attack_laplacian @ X).reshape(-1)
    raise DynamicsError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    game: GameDefinition
    graph: Digraph
    schedule: AttackSchedule
    kappa: float
    x0: StackedEstimate
    t_end: float
    step: float = 1e-3
    algorithm: str = "resilient"
    decimation: int = 1
    divergence_guard: float = 1e9
    bundle: LaplacianBundle = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.kappa > 0:
            raise DynamicsError(f"kappa must be positive, got {self.kappa}")
        if not self.step > 0:
            raise DynamicsError(f"step must be positive, got {self.step}")
        if not self.t_end > 0:
            raise DynamicsError(f"t_end must be positive, got {self.t_end}")
        if self.schedule.horizon < self.t_end:
            raise DynamicsError(
                f"schedule horizon {self.schedule.horizon} is shorter than t_end {self.t_end}"
            )
        if self.algorithm not in ALGORITHMS:
            raise DynamicsError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if int(self.decimation) < 1:
            raise DynamicsError("decimation must be a positive integer")
        if self.graph.node_count != self.game.player_count:
            raise DynamicsError(
                f"graph has {self.graph.node_count} nodes but the game has {self.game.player_count} players"
            )
        if tuple(self.x0.action_dims) != tuple(self.game.action_dims):
            raise DynamicsError("initial estimate dimensions do not match the game")
        unknown = set(self.schedule.channels) - set(self.graph.channels)
        if unknown:
            raise DynamicsError(f"schedule attacks channels not in the graph: {sorted(unknown)}")
        if self.bundle is None:
            object.__setattr__(self, "bundle", laplacian_bundle(self.graph))


class _System:
    """Precomputed pieces of the right-hand side for one scenario."""

    def __init__(self, sc: ScenarioConfig):
        self.sc = sc
        self.N, self.n = sc.game.player_count, sc.game.n
        self.mask = own_mask(sc.game.action_dims)
        self.own_flat = np.flatnonzero(self.mask)
        self.safe = -sc.kappa * np.asarray(sc.bundle.balanced)
        self._cache: dict = {}
        # affine games admit an exact one-step RK4 map
        self.affine = None
        if sc.game.constant_jacobian is not None:
            J = np.asarray(sc.game.constant_jacobian)
            zero = np.zeros((self.N, self.n))
            f0 = estimate_gradients(sc.game, zero)
            G = np.zeros((self.n, self.N * self.n))
            off = sc.game.offsets
            for i in range(self.N):
                G[off[i]:off[i + 1], i * self.n:(i + 1) * self.n] = J[off[i]:off[i + 1]]
            R = selection_matrices(sc.game.action_dims).R
            self.affine = (-R.T @ G, -R.T @ f0)
        self._rk_cache: dict = {}

    def coupling(self, mode: str, surviving: frozenset) -> np.ndarray:
        if mode == SAFE:
            return self.safe
        key = (self.sc.algorithm, surviving)
        if key not in self._cache:
            g = self.sc.graph
            if self.sc.algorithm == "resilient":
                M = -effective_laplacian(g, surviving)
            else:
                # attack-unaware: fixed weights and degrees, lost packets read as zero
                A = np.zeros_like(g.adjacency)
                for ch in surviving:
                    A[ch] = g.adjacency[ch]
                D = np.diag(g.adjacency.sum(axis=1))
                M = -self.sc.kappa * np.diag(self.sc.bundle.omega) @ (D - A)
            self._cache[key] = M
        return self._cache[key]

    def f(self, X: np.ndarray, M: np.ndarray) -> np.ndarray:
        out = M @ X
        out.ravel()[self.own_flat] -= estimate_gradients(self.sc.game, X)
        return out

    def rk4_step(self, X: np.ndarray, M: np.ndarray, key, h: float) -> np.ndarray:
        if self.affine is not None:
            if key not in self._rk_cache:
                A = self.affine[0] + np.kron(M, np.eye(self.n))
                hA = h * A
                I = np.eye(A.shape[0])
                hA2 = hA @ hA
                hA3 = hA2 @ hA
                Phi = I + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
                psi = h * (I + hA / 2 + hA2 / 6 + hA3 / 24) @ self.affine[1]
                self._rk_cache[key] = (Phi, psi)
            Phi, psi = self._rk_cache[key]
            return (Phi @ X.reshape(-1) + psi).reshape(X.shape)
        k1 = self.f(X, M)
        k2 = self.f(X + 0.5 * h * k1, M)
        k3 = self.f(X + 0.5 * h * k2, M)
        k4 = self.f(X + h * k3, M)
        return X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def rhs(t: float, x: StackedEstimate, scenario: ScenarioConfig,
        flags: Optional[AttackFlagState] = None) -> np.ndarray:
    """Closed-loop vector field at ``t``.

    The mode follows the union of attack intervals. Under attack the coupling
    uses the channels whose flag is clear; without an explicit flag state every
    channel attacked at ``t`` is treated as lost.
    """
    attacked = active_channels(scenario.schedule, t)
    if flags is None:
        flags, _ = step_flags(AttackFlagState.initial(scenario.graph.channels), attacked)
    mode = ATTACK if attacked else SAFE
    system = _System(scenario)
    M = system.coupling(mode, flags.surviving())
    return system.f(x.matrix().copy(), M).reshape(-1)


# integration ---------------------------------------------------------------


@dataclass
class SimulationTrace:
    times: np.ndarray
    states: np.ndarray  # (samples, N * n)
    mode: np.ndarray  # bool, True in attack mode
    error_to_ne: Optional[np.ndarray]
    consensus_gap: np.ndarray
    action_dims: tuple[int, ...]
    snap_distance: float = 0.0
    diverged: bool = False
    x_star: Optional[np.ndarray] = None

    @property
    def final_state(self) -> StackedEstimate:
        return StackedEstimate(self.states[-1], self.action_dims)

    @property
    def mode_labels(self) -> list[str]:
        return [ATTACK if m else SAFE for m in self.mode]


def _segments(schedule: AttackSchedule, step: float, n_steps: int):
    """Step indices where the attacked channel set may change, and each set."""
    breaks = sorted({int(round(p / step)) for p in schedule.endpoints()} | {0})
    breaks = [b for b in breaks if b <= n_steps]
    sets = [active_channels(schedule, b * step) if b * step < schedule.horizon else frozenset()
            for b in breaks]
    return breaks, sets


def integrate(scenario: ScenarioConfig, oracle: Optional[NESolution] = None) -> SimulationTrace:
    """Classical RK4 with mode switches aligned to the step grid."""
    h = scenario.step
    n_steps = int(round(scenario.t_end / h))
    if n_steps < 1:
        raise DynamicsError("t_end is shorter than one step")
    schedule, snap = snap_schedule(scenario.schedule, h)
    breaks, sets = _segments(schedule, h, n_steps)
    system = _System(scenario)
    dec = int(scenario.decimation)
    N, n = system.N, system.n
    x_star = None if oracle is None else np.asarray(oracle.x_star, dtype=float)

    n_samples = n_steps // dec + 1
    times = np.arange(n_samples) * dec * h
    states = np.empty((n_samples, N * n))
    modes = np.zeros(n_samples, dtype=bool)

    X = scenario.x0.matrix().copy()
    flags = AttackFlagState.initial(scenario.graph.channels)
    seg = -1
    settle = 0
    sample = 0

    def finish(count, diverged=False):
        st = states[:count]
        Xs = st.reshape(count, N, n)
        gap = np.linalg.norm(Xs - Xs.mean(axis=1, keepdims=True), axis=2).max(axis=1)
        err = None
        if x_star is not None:
            err = np.linalg.norm(Xs - x_star[None, None, :], axis=(1, 2))
        return SimulationTrace(times[:count], st, modes[:count], err, gap,
                               tuple(scenario.game.action_dims), snap, diverged, x_star)

    for k in range(n_steps + 1):
        if seg + 1 < len(breaks) and k == breaks[seg + 1]:
            seg += 1
            settle = 2
        attacked = sets[seg]
        if settle:
            # flags settle two steps after the attacked set changes
            new_flags, _ = step_flags(flags, attacked)
            settle = settle - 1 if new_flags == flags else 2
            flags = new_flags
        if k % dec == 0:
            states[sample] = X.reshape(-1)
            modes[sample] = bool(attacked)
            sample += 1
        if k == n_steps:
            break
        mode = ATTACK if attacked else SAFE
        surviving = flags.surviving() if attacked else frozenset()
        M = system.coupling(mode, surviving)
        X = system.rk4_step(X, M, (mode, surviving), h)
        if not np.all(np.isfinite(X)) or np.abs(X).max() > scenario.divergence_guard:
            raise DivergenceError(
                f"state norm exceeded {scenario.divergence_guard:g} at t = {(k + 1) * h:.6g}",
                finish(sample, diverged=True),
            )
    return finish(sample)


# output --------------------------------------------------------------------


def trace_header(action_dims: Sequence[int]) -> list[str]:
    dims = list(action_dims)
    cols = ["time", "mode"]
    for i in range(len(dims)):
        for j, nj in enumerate(dims):
            cols += [f"x{i + 1}_{j + 1}[{k}]" for k in range(nj)]
    return cols + ["error_to_ne", "consensus_gap"]


def write_trace_csv(trace: SimulationTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_header(trace.action_dims))
        err = trace.error_to_ne if trace.error_to_ne is not None else [math.nan] * len(trace.times)
        for t, m, row, e, g in zip(trace.times, trace.mode_labels, trace.states, err, trace.consensus_gap):
            w.writerow([repr(float(t)), m, *(repr(float(v)) for v in row), repr(float(e)), repr(float(g))])


def attack_mode_fraction(trace: SimulationTrace) -> float:
    return float(np.mean(trace.mode)) if len(trace.mode) else 0.0


def global_union(scenario: ScenarioConfig):
    return union_attack_intervals(snap_schedule(scenario.schedule, scenario.step)[0])
