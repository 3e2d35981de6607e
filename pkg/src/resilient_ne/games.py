"""N-player games, pseudo-gradients and an independent Newton NE oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CostFn = Callable[[int, np.ndarray], float]
GradFn = Callable[[int, np.ndarray], np.ndarray]


class GameError(ValueError):
    pass


class RegularityError(GameError):
    """The sampled pseudo-gradient is not strongly monotone on the box."""


class NEConvergenceError(RuntimeError):
    def __init__(self, message: str, x: np.ndarray, residual: float):
        super().__init__(message)
        self.x = x
        self.residual = residual


@dataclass(frozen=True)
class GameRegularity:
    epsilon: float
    iota: float
    provenance: str  # "analytic" | "sampled"
    box: Optional[tuple[tuple[float, float], ...]] = None


@dataclass(frozen=True)
class NESolution:
    x_star: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class GameDefinition:
    """A smooth N-player game.

    ``cost(i, x)`` and ``partial_gradient(i, x)`` take the full action profile
    ``x``. When ``partial_gradient`` is omitted, central finite differences of
    the cost are used. ``batch_gradient(X)`` is an optional fast path that
    evaluates every player's own gradient at its own row of ``X`` (shape
    ``(N, n)``) and returns the concatenation.
    """

    name: str
    action_dims: tuple[int, ...]
    cost: CostFn
    partial_gradient: Optional[GradFn] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constant_jacobian: Optional[np.ndarray] = field(default=None, repr=False)
    batch_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    reference_ne: Optional[np.ndarray] = field(default=None, repr=False)
    params: dict = field(default_factory=dict, compare=False)

    @property
    def player_count(self) -> int:
        return len(self.action_dims)

    @property
    def n(self) -> int:
        return int(sum(self.action_dims))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.action_dims)]).astype(int)

    def own_slice(self, i: int) -> slice:
        off = self.offsets
        return slice(int(off[i]), int(off[i + 1]))

    def gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        if self.partial_gradient is not None:
            return np.asarray(self.partial_gradient(i, x), dtype=float).reshape(-1)
        return fd_partial_gradient(self, i, x)


def fd_step(v: float) -> float:
    return max(1e-6, 1e-8 * abs(v))


def fd_partial_gradient(game: GameDefinition, i: int, x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of ``J_i`` with respect to player i's own block."""
    x = np.asarray(x, dtype=float)
    sl = game.own_slice(i)
    out = np.empty(sl.stop - sl.start)
    for k, idx in enumerate(range(sl.start, sl.stop)):
        h = fd_step(x[idx])
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[k] = (game.cost(i, xp) - game.cost(i, xm)) / (2 * h)
    return out


def _check_dim(game: GameDefinition, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != game.n:
        raise GameError(f"action profile has dimension {x.size}, game expects {game.n}")
    return x


def pseudo_gradient(game: GameDefinition, x) -> np.ndarray:
    x = _check_dim(game, x)
    return np.concatenate([game.gradient(i, x) for i in range(game.player_count)])


def estimate_gradients(game: GameDefinition, X: np.ndarray) -> np.ndarray:
    """Each player's own gradient evaluated at that player's own estimate row."""
    if game.batch_gradient is not None:
        return game.batch_gradient(X)
    return np.concatenate([game.gradient(i, X[i]) for i in range(game.player_count)])


def fd_jacobian(game: GameDefinition, x: np.ndarray) -> np.ndarray:
    n = x.size
    jac = np.empty((n, n))
    for k in range(n):
        h = fd_step(x[k])
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (pseudo_gradient(game, xp) - pseudo_gradient(game, xm)) / (2 * h)
    return jac


def pseudo_jacobian(game: GameDefinition, x: np.ndarray) -> np.ndarray:
    if game.constant_jacobian is not None:
        return np.array(game.constant_jacobian, dtype=float)
    if game.jacobian is not None:
        return np.asarray(game.jacobian(x), dtype=float)
    return fd_jacobian(game, x)


def solve_ne(game: GameDefinition, x0=None, max_iter: int = 100, tol: float = 1e-9) -> NESolution:
    """Damped Newton iteration on ``F(x) = 0`` with backtracking on ``||F||``.

    Converged when ``||F(x)|| < tol * (1 + ||x||)``.
    """
    x = np.zeros(game.n) if x0 is None else _check_dim(game, x0).copy()
    fx = pseudo_gradient(game, x)
    res = float(np.linalg.norm(fx))
    for it in range(max_iter + 1):
        if not np.isfinite(res):
            break
        if res < tol * (1.0 + np.linalg.norm(x)):
            return NESolution(x, res, it)
        if it == max_iter:
            break
        jac = pseudo_jacobian(game, x)
        try:
            step = np.linalg.solve(jac, -fx)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(jac, fx, rcond=None)[0]
        t = 1.0
        while True:
            x_new = x + t * step
            with np.errstate(over="ignore", invalid="ignore"):
                f_new = pseudo_gradient(game, x_new)
            res_new = float(np.linalg.norm(f_new))
            if np.isfinite(res_new) and res_new <= (1 - 1e-4 * t) * res:
                break
            t *= 0.5
            if t < 1e-10:
                # accept the tiny step; the outer loop reports stagnation
                break
        x, fx, res = x_new, f_new, res_new
    raise NEConvergenceError(
        f"Newton iteration did not converge for game {game.name!r} "
        f"(residual {res:.3e}); the game may violate strong monotonicity",
        x,
        res,
    )


def _sample_pairs(box, sample_count, rng):
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    xs = rng.uniform(lo, hi, size=(sample_count, lo.size))
    ys = rng.uniform(lo, hi, size=(sample_count, lo.size))
    return xs, ys


def _normalise_box(game_n: int, box) -> tuple[tuple[float, float], ...]:
    box = np.asarray(box, dtype=float)
    if box.shape == (2,):
        box = np.tile(box, (game_n, 1))
    if box.shape != (game_n, 2) or np.any(box[:, 1] <= box[:, 0]):
        raise GameError(f"box must be (lo, hi) or a list of {game_n} (lo, hi) pairs")
    return tuple((float(a), float(b)) for a, b in box)


def analytic_regularity(game: GameDefinition) -> Optional[GameRegularity]:
    """Exact constants for games with an affine pseudo-gradient."""
    if game.constant_jacobian is None:
        return None
    jac = np.asarray(game.constant_jacobian, dtype=float)
    eps = float(np.linalg.eigvalsh(0.5 * (jac + jac.T)).min())
    iota = float(np.linalg.norm(jac, 2))
    if eps <= 0:
        raise RegularityError(f"game {game.name!r}: affine pseudo-gradient is not strongly monotone")
    return GameRegularity(eps, iota, "analytic")


def estimate_regularity(
    game: GameDefinition,
    box=(-10.0, 10.0),
    sample_count: int = 2000,
    rng_seed: int = 0,
    prefer_analytic: bool = True,
) -> GameRegularity:
    """Strong-monotonicity and Lipschitz constants of the pseudo-gradient.

    Returns the analytic constants when the game provides them (and
    ``prefer_analytic``); otherwise samples random pairs in ``box``.
    """
    if prefer_analytic:
        exact = analytic_regularity(game)
        if exact is not None:
            return exact
    if sample_count < 100:
        raise GameError("sample_count must be at least 100")
    box = _normalise_box(game.n, box)
    rng = np.random.default_rng(rng_seed)
    xs, ys = _sample_pairs(box, sample_count, rng)
    eps, iota = math.inf, 0.0
    for x, y in zip(xs, ys):
        d = x - y
        dd = float(d @ d)
        if dd == 0.0:
            continue
        df = pseudo_gradient(game, x) - pseudo_gradient(game, y)
        eps = min(eps, float(d @ df) / dd)
        iota = max(iota, float(np.linalg.norm(df)) / math.sqrt(dd))
    if eps <= 0:
        raise RegularityError(
            f"game {game.name!r} is not strongly monotone on the box "
            f"(sampled modulus {eps:.4g})"
        )
    return GameRegularity(eps, iota, "sampled", box)


def stacked_lipschitz(
    game: GameDefinition, box=(-10.0, 10.0), sample_count: int = 2000, rng_seed: int = 0
) -> float:
    """Lipschitz constant of the estimate-wise map ``X -> col(grad_i J_i(X[i]))``.

    Every row only sees its own estimate, so the constant is the largest
    per-player constant of ``x -> grad_i J_i(x)``. Affine games give it
    exactly from the Jacobian block rows; otherwise it is sampled.
    """
    if game.constant_jacobian is not None:
        jac = np.asarray(game.constant_jacobian, dtype=float)
        return max(float(np.linalg.norm(jac[game.own_slice(i)], 2)) for i in range(game.player_count))
    box = _normalise_box(game.n, box)
    rng = np.random.default_rng(rng_seed)
    xs, ys = _sample_pairs(box, sample_count, rng)
    best = 0.0
    for x, y in zip(xs, ys):
        dist = float(np.linalg.norm(x - y))
        if dist == 0.0:
            continue
        for i in range(game.player_count):
            best = max(best, float(np.linalg.norm(game.gradient(i, x) - game.gradient(i, y))) / dist)
    return best


# builtin games ---------------------------------------------------------------


def _vec(name, value, size):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise GameError(f"parameter {name!r} must be a scalar or have {size} entries, got shape {arr.shape}")
    return arr


def _diag_index(N):
    idx = np.arange(N)
    return idx, idx


def cournot_game(a=0.0, b=None, c=0.0, d=0.0, f0=720.0, f1=1.0, N=None) -> GameDefinition:
    """Nash-Cournot game with linear inverse demand ``f0 - f1 * sum(x)``.

    Defaults reproduce the six-firm instance ``b_i = 10 + 4(i-1)``.
    """
    if N is None:
        N = 6 if b is None or np.ndim(b) == 0 else len(b)
    N = int(N)
    if b is None:
        b = 10.0 + 4.0 * np.arange(N)
    a, b, c, d = (_vec(k, v, N) for k, v in (("a", a), ("b", b), ("c", c), ("d", d)))
    f0, f1 = float(f0), float(f1)
    rows, cols = _diag_index(N)

    def cost(i, x):
        return a[i] + b[i] * (x[i] - c[i]) + d[i] * x[i] ** 2 - x[i] * (f0 - f1 * x.sum())

    def grad(i, x):
        return np.array([b[i] + 2 * d[i] * x[i] - f0 + f1 * x.sum() + f1 * x[i]])

    def batch(X):
        own = X[rows, cols]
        return b + 2 * d * own - f0 + f1 * X.sum(axis=1) + f1 * own

    jac = f1 * (np.eye(N) + np.ones((N, N))) + np.diag(2 * d)
    params = dict(a=a.tolist(), b=b.tolist(), c=c.tolist(), d=d.tolist(), f0=f0, f1=f1)
    return GameDefinition("cournot", (1,) * N, cost, grad, constant_jacobian=jac,
                          batch_gradient=batch, params=params)


def hvac_game(a=1.0, b=(10.0, 15.0, 20.0, 25.0, 30.0), c=0.1, d=10.0) -> GameDefinition:
    """Energy consumption game ``J_i = a_i (x_i - b_i)^2 + (c * sum(x) + d) x_i``."""
    b = np.asarray(b, dtype=float).reshape(-1)
    N = b.size
    a = _vec("a", a, N)
    c, d = float(c), float(d)
    if np.any(a <= 0) or c <= 0:
        raise GameError("hvac game needs a_i > 0 and c > 0")
    rows, cols = _diag_index(N)

    def cost(i, x):
        return a[i] * (x[i] - b[i]) ** 2 + (c * x.sum() + d) * x[i]

    def grad(i, x):
        return np.array([2 * a[i] * (x[i] - b[i]) + c * x.sum() + c * x[i] + d])

    def batch(X):
        own = X[rows, cols]
        return 2 * a * (own - b) + c * X.sum(axis=1) + c * own + d

    jac = np.diag(2 * a + c) + c * np.ones((N, N))
    params = dict(a=a.tolist(), b=b.tolist(), c=c, d=d)
    return GameDefinition("hvac", (1,) * N, cost, grad, constant_jacobian=jac,
                          batch_gradient=batch, params=params)


# published equilibrium of the five-player non-quadratic example; the printed
# fourth cost does not reproduce its fourth entry (see oracle comparison)
NONQUADRATIC_REFERENCE = np.array([-4.6589, 4.1589, 0.0, -2.0, 2.5])


def nonquadratic_game() -> GameDefinition:
    """Five-player non-quadratic game with exponential and polynomial couplings.

    Costs are transcribed literally, including ``log(exp(x4))`` in ``J_4``.
    """

    def cost(i, x):
        x1, x2, x3, x4, x5 = x
        if i == 0:
            return x1**2 / 2 + x1 * (x2 + x3 + x4 + x5)
        if i == 1:
            return math.exp(x2 / 2) / 2 + x2 * x4
        if i == 2:
            return x3**2 / 2 + x1**3
        if i == 3:
            return math.log(math.exp(x4)) + x4**2 + x3**3
        return x5**2 - 5 * x5 + x1**3 * x2 + x3 * x4**4

    def grad(i, x):
        x1, x2, x3, x4, x5 = x
        if i == 0:
            return np.array([x1 + x2 + x3 + x4 + x5])
        if i == 1:
            return np.array([math.exp(x2 / 2) / 4 + x4])
        if i == 2:
            return np.array([x3])
        if i == 3:
            return np.array([1 + 2 * x4])
        return np.array([2 * x5 - 5])

    def jacobian(x):
        jac = np.zeros((5, 5))
        jac[0, :] = 1.0
        jac[1, 1] = math.exp(x[1] / 2) / 8
        jac[1, 3] = 1.0
        jac[2, 2] = 1.0
        jac[3, 3] = 2.0
        jac[4, 4] = 2.0
        return jac

    def batch(X):
        return np.array([
            X[0].sum(),
            np.exp(X[1, 1] / 2) / 4 + X[1, 3],
            X[2, 2],
            1 + 2 * X[3, 3],
            2 * X[4, 4] - 5,
        ])

    return GameDefinition("nonquadratic", (1,) * 5, cost, grad, jacobian=jacobian,
                          batch_gradient=batch, reference_ne=NONQUADRATIC_REFERENCE.copy())


def polynomial_game(action_dims: Sequence[int], terms: Sequence[Sequence]) -> GameDefinition:
    """Game whose costs are polynomials.

    ``terms[i]`` is player i's list of ``(coefficient, exponents)`` monomials,
    with ``exponents`` of length ``n`` (one per action coordinate).
    """
    dims = tuple(int(k) for k in action_dims)
    n = sum(dims)
    if len(terms) != len(dims):
        raise GameError(f"need one term list per player ({len(dims)}), got {len(terms)}")
    parsed = []
    for i, player_terms in enumerate(terms):
        coefs, powers = [], []
        for term in player_terms:
            coef, expo = term
            expo = np.asarray(expo, dtype=int)
            if expo.shape != (n,) or np.any(expo < 0):
                raise GameError(f"player {i}: exponents must be {n} non-negative integers")
            coefs.append(float(coef))
            powers.append(expo)
        parsed.append((np.array(coefs), np.array(powers).reshape(-1, n)))

    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)

    def cost(i, x):
        coefs, powers = parsed[i]
        return float(coefs @ np.prod(np.asarray(x)[None, :] ** powers, axis=1))

    def grad(i, x):
        x = np.asarray(x, dtype=float)
        coefs, powers = parsed[i]
        out = np.zeros(dims[i])
        for k, idx in enumerate(range(offsets[i], offsets[i + 1])):
            p = powers[:, idx]
            mask = p > 0
            if not mask.any():
                continue
            lowered = powers[mask].copy()
            lowered[:, idx] -= 1
            out[k] = float((coefs[mask] * p[mask]) @ np.prod(x[None, :] ** lowered, axis=1))
        return out

    return GameDefinition("polynomial", dims, cost, grad, params={"terms": [list(t) for t in terms]})


def builtin_game(name: str, params: Optional[dict] = None) -> GameDefinition:
    params = dict(params or {})
    try:
        if name == "cournot":
            return cournot_game(**params)
        if name == "hvac":
            return hvac_game(**params)
        if name == "nonquadratic":
            if params:
                raise GameError(f"nonquadratic game takes no parameters, got {sorted(params)}")
            return nonquadratic_game()
    except TypeError as exc:
        raise GameError(f"bad parameters for game {name!r}: {exc}") from None
    raise GameError(f"unknown builtin game {name!r} (expected cournot, hvac or nonquadratic)")
