"""Declarative TOML scenarios.

A scenario file may list ``include = ["fragment.toml", ...]``; fragments are
merged first (later ones win) and the including file overrides them. Player
and node indices in files are 1-based; the library is 0-based.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import AnalysisConfig, CertificateError, attack_mode_norm, budget_thresholds, rate_constants, unified_iota
from .attack import (
    AttackBudget,
    AttackSchedule,
    ScheduleError,
    budget_from_thresholds,
    generate_schedule,
    staggered_schedule,
)
from .dynamics import DynamicsError, ScenarioConfig, StackedEstimate, initial_estimate
from .games import GameDefinition, GameError, RegularityError, builtin_game, polynomial_game, solve_ne
from .graph import Digraph, GraphError, build_digraph, cycle_digraph, is_strongly_connected, laplacian_bundle

BUNDLED = Path(__file__).parent / "scenarios"

DEFAULTS = {
    "gains": {"alpha": 1.0, "beta": 2.0},
    "schedule": {"mode": "none"},
    "sim": {"t_end": 50.0, "step": 1e-3, "decimation": 1, "algorithm": "resilient",
            "divergence_guard": 1e9, "convergence_tol": 1e-2},
    "regularity": {"box": [-10.0, 10.0], "samples": 2000, "seed": 0},
    "outputs": {"dir": "out"},
}


class ScenarioError(ValueError):
    pass


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_path(path) -> Path:
    p = Path(path)
    if not p.exists() and (BUNDLED / p).exists():
        return BUNDLED / p
    return p


def load_toml(path, _seen=None) -> dict:
    path = resolve_path(path).resolve()
    _seen = set() if _seen is None else _seen
    if path in _seen:
        raise ScenarioError(f"{path}: include cycle")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    merged: dict = {}
    for inc in raw.pop("include", []):
        # relative to the including file, else a bundled fragment
        target = path.parent / inc
        if not target.exists() and (BUNDLED / inc).exists():
            target = BUNDLED / inc
        merged = deep_merge(merged, load_toml(target, _seen | {path}))
    return deep_merge(merged, raw)


def _get(d: dict, section: str, key: str, kind=float, required=True, default=None):
    sec = d.get(section, {})
    if key not in sec:
        if required:
            raise ScenarioError(f"missing field [{section}].{key}")
        return default
    val = sec[key]
    try:
        if kind is float:
            if isinstance(val, bool):
                raise TypeError
            out = float(val)
            if not math.isfinite(out):
                raise ValueError
            return out
        if kind is int:
            if isinstance(val, bool) or int(val) != val:
                raise TypeError
            return int(val)
        if kind is str and not isinstance(val, str):
            raise TypeError
        return val
    except (TypeError, ValueError):
        raise ScenarioError(f"[{section}].{key} = {val!r} is not a valid {kind.__name__}") from None


@dataclass
class Scenario:
    name: str
    resolved: dict
    game: GameDefinition
    graph: Digraph
    x0: StackedEstimate
    kappa: float
    schedule: AttackSchedule
    budget: Optional[AttackBudget]
    analysis: Optional[AnalysisConfig]
    analysis_note: Optional[str]
    t_end: float
    step: float
    decimation: int
    algorithm: str
    divergence_guard: float
    convergence_tol: float
    out_dir: Path
    seed: Optional[int] = None
    extras: dict = field(default_factory=dict)

    def config(self) -> ScenarioConfig:
        return ScenarioConfig(self.game, self.graph, self.schedule, self.kappa, self.x0, self.t_end,
                              self.step, self.algorithm, self.decimation, self.divergence_guard)


# sections ------------------------------------------------------------------


def build_game(d: dict) -> GameDefinition:
    sec = d.get("game")
    if not sec:
        raise ScenarioError("missing section [game]")
    name = _get(d, "game", "name", str)
    params = sec.get("params", {})
    try:
        if name == "polynomial":
            return polynomial_game(params["action_dims"], params["terms"])
        if name in ("hvac", "cournot") and "players" in sec:
            params = players_params(name, _get(d, "game", "players", int), params)
        return builtin_game(name, params)
    except KeyError as exc:
        raise ScenarioError(f"[game.params] missing {exc}") from None
    except GameError as exc:
        raise ScenarioError(f"[game] {exc}") from None


def players_params(name: str, N: int, params: dict) -> dict:
    """Parameters for an N-player version of a builtin game (b_i grows linearly)."""
    params = dict(params)
    i = np.arange(1, N + 1)
    if name == "hvac":
        params["b"] = (5.0 * i + 5.0).tolist()
    else:
        params["b"] = (10.0 + 4.0 * (i - 1)).tolist()
        params.pop("N", None)
    return params


def build_graph(d: dict, N: int) -> Digraph:
    sec = d.get("graph")
    if not sec:
        raise ScenarioError("missing section [graph]")
    kind = sec.get("kind", "edges")
    nodes = sec.get("nodes", N)
    if nodes != N:
        raise ScenarioError(f"[graph].nodes = {nodes} but the game has {N} players")
    try:
        if kind == "cycle":
            return cycle_digraph(N)
        if kind == "ring":
            return build_digraph(N, [(i, (i + 1) % N) for i in range(N)] + [((i + 1) % N, i) for i in range(N)])
        if kind == "complete":
            return build_digraph(N, [(i, j) for i in range(N) for j in range(N) if i != j])
        if kind != "edges":
            raise ScenarioError(f"[graph].kind = {kind!r} (expected edges, cycle, ring or complete)")
        if "edges" not in sec:
            raise ScenarioError("missing field [graph].edges")
        edges = []
        for e in sec["edges"]:
            if len(e) not in (2, 3):
                raise ScenarioError(f"[graph].edges entry {e!r} must be [from, to] or [from, to, weight]")
            edges.append((e[0] - 1, e[1] - 1, *e[2:]))
        g = build_digraph(N, edges)
        if not is_strongly_connected(g):
            raise ScenarioError("[graph] is not strongly connected")
        return g
    except GraphError as exc:
        raise ScenarioError(f"[graph] {exc} (node ids are 0-based in this message)") from None


def build_init(d: dict, game: GameDefinition) -> StackedEstimate:
    sec = d.get("init", {})
    N = game.player_count
    try:
        if sec.get("at_ne", False):
            x_star = solve_ne(game).x_star
            return StackedEstimate.consensus(x_star, N, game.action_dims)
        if "own" not in sec:
            raise ScenarioError("missing field [init].own (or set [init].at_ne = true)")
        own = sec["own"]
        if len(own) != N:
            raise ScenarioError(f"[init].own has {len(own)} entries for {N} players")
        others = sec.get("others")
        if others is None and "others_all" in sec:
            others = [sec["others_all"]] * N
        return initial_estimate(own, others, game.action_dims)
    except DynamicsError as exc:
        raise ScenarioError(f"[init] {exc}") from None


def _budget_table(sec: dict) -> AttackBudget:
    try:
        return AttackBudget(**{k: float(sec[k]) for k in ("N0", "T_f", "T0", "T_a")})
    except KeyError as exc:
        raise ScenarioError(f"[schedule.budget] missing {exc}") from None
    except ScheduleError as exc:
        raise ScenarioError(f"[schedule.budget] {exc}") from None


def analysis_config(game, graph, regularity: dict, gains: dict, c: float):
    """Regularity-based analysis settings, or ``(None, reason)`` when unavailable."""
    try:
        reg, iota, _ = unified_iota(game, tuple(regularity["box"]), int(regularity["samples"]),
                                    int(regularity["seed"]))
    except RegularityError as exc:
        return None, f"no certificate: {exc}"
    return AnalysisConfig(graph.node_count, reg.epsilon, iota, laplacian_bundle(graph).lambda2, c,
                          gains["alpha"], gains["beta"], gains.get("eta_star")), None


def build_schedule(d: dict, graph: Digraph, t_end: float, seed_override, kappa, game):
    sec = d["schedule"]
    mode = sec.get("mode", "none")
    horizon = float(sec.get("horizon", t_end))
    budget = None
    seed = None
    try:
        if mode == "none":
            schedule = AttackSchedule.empty(horizon)
        elif mode == "explicit":
            pairs = {}
            for item in sec.get("channel", []):
                ch = (int(item["receiver"]) - 1, int(item["sender"]) - 1)
                if ch not in graph.channels:
                    raise ScenarioError(f"[[schedule.channel]] {item['sender']}->{item['receiver']} is not a graph edge")
                pairs[ch] = item["intervals"]
            schedule = AttackSchedule.from_pairs(pairs, horizon)
        elif mode == "staggered":
            schedule = staggered_schedule(graph.channels, horizon, float(sec.get("duty", 0.9)),
                                          float(sec.get("period", 10.0)))
        elif mode == "generated":
            seed = int(seed_override if seed_override is not None else sec.get("seed", 0))
            bursts = sec.get("bursts", "all")
            spec = sec.get("budget", "auto")
            if spec == "auto":
                schedule, budget = _auto_schedule(d, graph, horizon, seed, bursts, kappa, game)
            elif isinstance(spec, dict):
                budget = _budget_table(spec)
                schedule = generate_schedule(budget, horizon, graph.channels, seed, bursts)
            else:
                raise ScenarioError(f"[schedule].budget must be 'auto' or a table, got {spec!r}")
        else:
            raise ScenarioError(
                f"[schedule].mode = {mode!r} (expected none, explicit, staggered or generated)"
            )
        if budget is None and isinstance(sec.get("budget"), dict):
            budget = _budget_table(sec["budget"])
        elif budget is None and sec.get("budget") == "auto":
            budget = _auto_budget(d, graph, kappa, game, attack_mode_norm(graph, schedule))
    except ScheduleError as exc:
        raise ScenarioError(f"[schedule] {exc}") from None
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"[schedule] malformed entry: {exc}") from None
    return schedule, budget, seed


def _auto_budget(d, graph, kappa, game, c) -> AttackBudget:
    """Budget sitting the configured margins above the certified thresholds."""
    sec = d["schedule"]
    cfg, note = analysis_config(game, graph, d["regularity"], d["gains"], c)
    if cfg is None:
        raise ScenarioError(f"[schedule].budget = 'auto' needs a certifiable game; {note}")
    try:
        rc = rate_constants(cfg, kappa)
        T_f_star, T_a_star = budget_thresholds(cfg, rc.lambda_a, rc.lambda_b)
    except CertificateError as exc:
        raise ScenarioError(f"[schedule].budget = 'auto': {exc}") from None
    return budget_from_thresholds(T_f_star, T_a_star, float(sec.get("margin_f", 1.5)),
                                  float(sec.get("margin_a", 2.0)))


def _auto_schedule(d, graph, horizon, seed, bursts, kappa, game):
    """Budget placed above the certified thresholds, then a schedule meeting it.

    The attack-mode norm depends on the schedule, so thresholds are recomputed
    from the generated schedule until the budget clears them.
    """
    c = 0.0
    for _ in range(5):
        budget = _auto_budget(d, graph, kappa, game, c)
        schedule = generate_schedule(budget, horizon, graph.channels, seed, bursts)
        c_new = attack_mode_norm(graph, schedule)
        if c_new <= c + 1e-12:
            return schedule, budget
        c = c_new
    raise ScenarioError("[schedule].budget = 'auto' did not settle on a consistent attack-mode norm")


def load_scenario(path, seed=None, step=None, decimation=None, overrides: Optional[dict] = None) -> Scenario:
    raw = load_toml(path)
    if overrides:
        raw = deep_merge(raw, overrides)
    return scenario_from_dict(raw, Path(path).stem, seed=seed, step=step, decimation=decimation)


def scenario_from_dict(raw: dict, name: str = "scenario", seed=None, step=None, decimation=None) -> Scenario:
    d = deep_merge(DEFAULTS, raw)
    if step is not None:
        d["sim"]["step"] = step
    if decimation is not None:
        d["sim"]["decimation"] = decimation
    game = build_game(d)
    graph = build_graph(d, game.player_count)
    x0 = build_init(d, game)
    kappa = _get(d, "gains", "kappa")
    if kappa <= 0:
        raise ScenarioError(f"[gains].kappa must be positive, got {kappa}")
    for key in ("alpha", "beta"):
        d["gains"][key] = _get(d, "gains", key)
    if "eta_star" in d["gains"]:
        d["gains"]["eta_star"] = _get(d, "gains", "eta_star")
    t_end = _get(d, "sim", "t_end")
    h = _get(d, "sim", "step")
    dec = _get(d, "sim", "decimation", int)
    if t_end <= 0 or h <= 0 or dec < 1:
        raise ScenarioError("[sim] needs t_end > 0, step > 0 and decimation >= 1")
    algorithm = _get(d, "sim", "algorithm", str)
    schedule, budget, used_seed = build_schedule(d, graph, t_end, seed, kappa, game)
    c = attack_mode_norm(graph, schedule)
    cfg, note = analysis_config(game, graph, d["regularity"], d["gains"], c)
    if used_seed is not None:
        d["schedule"]["seed"] = used_seed
    if budget is not None:
        d["schedule"]["resolved_budget"] = {"N0": budget.N0, "T_f": budget.T_f, "T0": budget.T0,
                                            "T_a": budget.T_a}
    sc = Scenario(
        name=d.get("name", name), resolved=d, game=game, graph=graph, x0=x0, kappa=kappa,
        schedule=schedule, budget=budget, analysis=cfg, analysis_note=note, t_end=t_end, step=h,
        decimation=dec, algorithm=algorithm, divergence_guard=_get(d, "sim", "divergence_guard"),
        convergence_tol=_get(d, "sim", "convergence_tol"), out_dir=Path(d["outputs"]["dir"]),
        seed=used_seed,
    )
    try:
        sc.config()
    except (DynamicsError, GraphError) as exc:
        raise ScenarioError(str(exc)) from None
    return sc
