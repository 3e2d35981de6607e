"""Certified constants of the switched Lyapunov argument and empirical rate fits."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attack import AttackBudget, AttackSchedule, surviving_sets, verify_budget
from .games import GameDefinition, estimate_regularity, stacked_lipschitz
from .graph import Digraph, effective_laplacian


class CertificateError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    N: int
    epsilon: float
    iota: float
    lambda2: float
    c: float = 0.0
    alpha: float = 1.0
    beta: float = 2.0
    eta_star: Optional[float] = None  # defaults to lambda_a / 2

    def __post_init__(self):
        for name in ("epsilon", "iota", "lambda2", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise CertificateError(f"{name} must be positive, got {getattr(self, name)}")
        if self.N < 1:
            raise CertificateError("N must be >= 1")
        if self.c < 0:
            raise CertificateError("c must be non-negative")
        if self.alpha == self.beta:
            raise CertificateError("beta must differ from alpha (mu would be 1)")
        if self.eta_star is not None and not self.eta_star > 0:
            raise CertificateError("eta_star must be positive")

    @property
    def mu(self) -> float:
        return max(self.alpha / self.beta, self.beta / self.alpha)


@dataclass(frozen=True)
class RateConstants:
    lambda_a: float
    lambda_b: float
    Q_a: np.ndarray = field(repr=False)
    Q_b: np.ndarray = field(repr=False)


@dataclass
class RateReport:
    kappa: float
    kappa_min: float
    alpha: float
    beta: float
    eta_star: Optional[float]
    c: float
    epsilon: float
    iota: float
    lambda2: float
    lambda_a: Optional[float]
    lambda_b: Optional[float]
    mu: float
    T_f_star: Optional[float]
    T_a_star: Optional[float]
    eta: Optional[float]
    varsigma: Optional[float]
    budget: Optional[dict]
    conditions_met: dict
    certificate: bool
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in out.items()}


def kappa_bound(epsilon: float, iota: float, lambda2: float) -> float:
    if min(epsilon, iota, lambda2) <= 0:
        raise CertificateError("epsilon, iota and lambda2 must all be positive")
    return (iota ** 2 / epsilon + iota) / lambda2


def q_matrices(cfg: AnalysisConfig, kappa: float):
    s = math.sqrt(cfg.N)
    eps, iota, c = cfg.epsilon, cfg.iota, cfg.c
    Q_a = 2 * cfg.alpha * np.array([[eps / cfg.N, -iota / s], [-iota / s, kappa * cfg.lambda2 - iota]])
    Q_b = 2 * cfg.beta * np.array([[c - eps / cfg.N, c + iota / s], [c + iota / s, c + iota]])
    return Q_a, Q_b


def rate_constants(cfg: AnalysisConfig, kappa: float) -> RateConstants:
    """Safe-mode decay rate and attack-mode growth rate.

    Raises :class:`CertificateError` when ``Q_a`` is not positive definite,
    which happens exactly when ``kappa`` does not exceed :func:`kappa_bound`.
    """
    Q_a, Q_b = q_matrices(cfg, kappa)
    lam_min = float(np.linalg.eigvalsh(Q_a).min())
    if lam_min <= 0:
        bound = kappa_bound(cfg.epsilon, cfg.iota, cfg.lambda2)
        raise CertificateError(
            f"Q_a is not positive definite (min eigenvalue {lam_min:.3e}); "
            f"the gain kappa = {kappa:g} must exceed {bound:.6g}"
        )
    lambda_a = lam_min / cfg.alpha
    lambda_b = float(np.linalg.svd(Q_b, compute_uv=False).max()) / cfg.beta
    return RateConstants(lambda_a, lambda_b, Q_a, Q_b)


def resolve_eta_star(cfg: AnalysisConfig, lambda_a: float) -> float:
    eta_star = lambda_a / 2 if cfg.eta_star is None else cfg.eta_star
    if not 0 < eta_star < lambda_a:
        raise CertificateError(f"eta_star = {eta_star:g} must lie in (0, lambda_a = {lambda_a:g})")
    return eta_star


def budget_thresholds(cfg: AnalysisConfig, lambda_a: float, lambda_b: float) -> tuple[float, float]:
    eta_star = resolve_eta_star(cfg, lambda_a)
    if cfg.mu <= 1:
        raise CertificateError("mu must exceed 1")
    return 2 * math.log(cfg.mu) / eta_star, (lambda_a + lambda_b) / (lambda_a - eta_star)


def composite_rate(lambda_a, lambda_b, T_a, eta_star) -> float:
    return lambda_a - (lambda_a + lambda_b) / T_a - eta_star


def overshoot(lambda_a, lambda_b, mu, budget: AttackBudget, alpha, beta) -> float:
    exponent = (lambda_a + lambda_b) * budget.T0 + 2 * math.log(mu) * budget.N0
    return math.exp(exponent) * max(alpha, beta) / min(alpha, beta)


def certify(cfg: AnalysisConfig, kappa: float, budget: Optional[AttackBudget] = None,
            schedule: Optional[AttackSchedule] = None) -> RateReport:
    """Assemble every constant of the convergence certificate.

    Without attacks (no schedule or an empty one) the duration ratio is taken
    as infinite and no budget is needed. Failed conditions are recorded in the
    report rather than raised.
    """
    kmin = kappa_bound(cfg.epsilon, cfg.iota, cfg.lambda2)
    attack_free = schedule is None or not schedule.intervals
    conditions = {"kappa": bool(kappa > kmin)}
    notes = []
    base = dict(kappa=float(kappa), kappa_min=kmin, alpha=cfg.alpha, beta=cfg.beta, c=cfg.c,
                epsilon=cfg.epsilon, iota=cfg.iota, lambda2=cfg.lambda2, mu=cfg.mu,
                budget=None if budget is None else asdict(budget))
    try:
        rc = rate_constants(cfg, kappa)
        eta_star = resolve_eta_star(cfg, rc.lambda_a)
        T_f_star, T_a_star = budget_thresholds(cfg, rc.lambda_a, rc.lambda_b)
    except CertificateError as exc:
        notes.append(str(exc))
        conditions.update(frequency=False, duration=False, budget_verified=False, eta_positive=False)
        return RateReport(**base, eta_star=cfg.eta_star, lambda_a=None, lambda_b=None, T_f_star=None,
                          T_a_star=None, eta=None, varsigma=None, conditions_met=conditions,
                          certificate=False, notes=notes)

    if attack_free:
        eta = rc.lambda_a - eta_star
        varsigma = max(cfg.alpha, cfg.beta) / min(cfg.alpha, cfg.beta)
        conditions.update(frequency=True, duration=True, budget_verified=True)
        notes.append("attack-free schedule: duration ratio treated as infinite")
    elif budget is None:
        eta, varsigma = None, None
        conditions.update(frequency=False, duration=False, budget_verified=False)
        notes.append("schedule has attacks but no budget was given")
    else:
        eta = composite_rate(rc.lambda_a, rc.lambda_b, budget.T_a, eta_star)
        varsigma = overshoot(rc.lambda_a, rc.lambda_b, cfg.mu, budget, cfg.alpha, cfg.beta)
        check = verify_budget(schedule, budget)
        conditions.update(frequency=bool(budget.T_f > T_f_star), duration=bool(budget.T_a > T_a_star),
                          budget_verified=bool(check["frequency_ok"] and check["duration_ok"]))
        if not conditions["budget_verified"]:
            notes.append(f"schedule violates its budget: {check['worst_windows']}")
    conditions["eta_positive"] = bool(eta is not None and eta > 0)
    return RateReport(**base, eta_star=eta_star, lambda_a=rc.lambda_a, lambda_b=rc.lambda_b,
                      T_f_star=T_f_star, T_a_star=T_a_star, eta=eta, varsigma=varsigma,
                      conditions_met=conditions, certificate=all(conditions.values()), notes=notes)


def attack_mode_norm(graph: Digraph, schedule: AttackSchedule) -> float:
    """Largest spectral norm of any surviving-channel Laplacian the schedule can produce."""
    sets = surviving_sets(schedule, graph.channels)
    if not sets:
        return 0.0
    return max(float(np.linalg.norm(effective_laplacian(graph, s), 2)) for s in sets)


def unified_iota(game: GameDefinition, box=(-10.0, 10.0), sample_count: int = 2000, rng_seed: int = 0):
    """Regularity of the game with iota raised to cover the stacked estimate map."""
    reg = estimate_regularity(game, box=box, sample_count=sample_count, rng_seed=rng_seed)
    stacked = stacked_lipschitz(game, box, sample_count, rng_seed)
    return reg, max(reg.iota, stacked), stacked


# empirical rates -----------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    eta_hat: float
    r_squared: float
    t_start: float
    t_stop: float
    samples: int


def fit_rate(times, errors, scale: float = 1.0, floor: float = 1e-13, tail: float = 0.5) -> RateFit:
    """Exponential rate of ``||x - x~||^2`` from a log-linear fit.

    The fit uses the last ``tail`` fraction of the samples recorded before the
    error first drops below ``floor * max(1, scale)``.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(errors, dtype=float)
    if t.size < 100 or t.size != e.size:
        raise ValueError("rate fit needs at least 100 matching time/error samples")
    below = np.nonzero(e < floor * max(1.0, scale))[0]
    stop = int(below[0]) if below.size else e.size
    start = int(stop * (1 - tail))
    if stop - start < 3:
        raise ValueError("too few samples above the numerical floor for a rate fit")
    tt, yy = t[start:stop], np.log(e[start:stop])
    slope, intercept = np.polyfit(tt, yy, 1)
    resid = yy - (slope * tt + intercept)
    ss_tot = float(((yy - yy.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return RateFit(float(-2 * slope), r2, float(tt[0]), float(tt[-1]), int(stop - start))


def fit_trace_rate(trace) -> RateFit:
    if trace.error_to_ne is None:
        raise ValueError("trace has no error series; run with an NE oracle attached")
    scale = 1.0 if trace.x_star is None else float(np.linalg.norm(trace.x_star)) * math.sqrt(
        len(trace.action_dims))
    return fit_rate(trace.times, trace.error_to_ne, scale)


def relative_error_series(trace, x_star) -> tuple[np.ndarray, bool]:
    """``||x(t) - 1 kron x*|| / ||1 kron x*||``; absolute error when ``x*`` is zero.

    The flag is True when the series is relative.
    """
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    N = len(trace.action_dims)
    ref = np.tile(x_star, N)
    err = np.linalg.norm(trace.states - ref[None, :], axis=1)
    norm = float(np.linalg.norm(ref))
    if norm == 0:
        return err, False
    return err / norm, True


def log_decay_monotone(times, errors, tail: float = 0.8, floor: float = 1e-13) -> bool:
    """True when ``log ||x - x~||`` never increases over the trailing part of the run."""
    e = np.asarray(errors, dtype=float)
    start = int(e.size * (1 - tail))
    seg = e[start:]
    seg = seg[seg > floor * max(1.0, float(e.max()))]
    return bool(np.all(np.diff(np.log(seg)) <= 1e-12))
