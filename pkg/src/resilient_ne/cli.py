"""Command-line front end: run, sweep, oracle and verify-schedule."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import (
    certify,
    fit_trace_rate,
    kappa_bound,
    log_decay_monotone,
    relative_error_series,
    unified_iota,
)
from .attack import channel_stats, union_attack_intervals, verify_budget
from .dynamics import DivergenceError, integrate, write_trace_csv
from .games import NEConvergenceError, RegularityError, estimate_gradients, solve_ne
from .graph import laplacian_bundle
from .scenario import Scenario, ScenarioError, deep_merge, load_scenario, load_toml, scenario_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
REFERENCE_TOL = 5e-4
AXES = ("kappa", "players", "topology", "budget")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=False) + "\n")


def reference_comparison(game, x_star) -> Optional[dict]:
    """Component-wise comparison of the oracle NE with a published reference."""
    if game.reference_ne is None:
        return None
    diff = np.asarray(x_star) - game.reference_ne
    bad = [int(k) + 1 for k in np.nonzero(np.abs(diff) > REFERENCE_TOL)[0]]
    return {
        "reference": game.reference_ne,
        "difference": diff,
        "mismatched_players": bad,
        "flagged": bool(bad),
    }


def rate_report(sc: Scenario) -> dict:
    if sc.analysis is None:
        return {"certificate": False, "notes": [sc.analysis_note]}
    report = certify(sc.analysis, sc.kappa, sc.budget, sc.schedule).to_dict()
    if sc.algorithm != "resilient":
        report["certificate"] = False
        report["notes"].append(f"constants describe the resilient algorithm; none certified for {sc.algorithm!r}")
    return report


def run_scenario(sc: Scenario, out_dir: Path, plot: bool = False) -> tuple[dict, int]:
    """Integrate one scenario and write trace.csv, summary.json and rate_report.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        ne = solve_ne(sc.game)
    except NEConvergenceError as exc:
        summary = {"error": str(exc), "last_iterate": exc.x, "residual": exc.residual,
                   "config": sc.resolved}
        _write_json(out_dir / "summary.json", summary)
        return summary, EXIT_SOLVER

    code = EXIT_OK
    try:
        trace = integrate(sc.config(), ne)
    except DivergenceError as exc:
        trace, code = exc.trace, EXIT_SOLVER

    write_trace_csv(trace, out_dir / "trace.csv")
    rel, is_rel = relative_error_series(trace, ne.x_star)
    X_final = trace.states[-1].reshape(len(sc.game.action_dims), -1)
    try:
        fit = fit_trace_rate(trace)
        fit_d = {"eta_hat": fit.eta_hat, "r_squared": fit.r_squared, "t_start": fit.t_start,
                 "t_stop": fit.t_stop, "samples": fit.samples}
    except ValueError as exc:
        fit_d = {"eta_hat": None, "error": str(exc)}
    report = rate_report(sc)
    report["config"] = sc.resolved
    if sc.schedule.intervals and sc.budget is not None:
        budget_check = verify_budget(sc.schedule, sc.budget)
    else:
        budget_check = None
    union = union_attack_intervals(sc.schedule)
    summary = {
        "name": sc.name,
        "algorithm": sc.algorithm,
        "seed": sc.seed,
        "diverged": trace.diverged,
        "converged": bool(not trace.diverged and rel[-1] < sc.convergence_tol),
        "convergence_tol": sc.convergence_tol,
        "final_time": float(trace.times[-1]),
        "x_star": ne.x_star,
        "ne_residual": ne.residual,
        "ne_reference": reference_comparison(sc.game, ne.x_star),
        "final_state": X_final,
        "final_error_to_ne": float(trace.error_to_ne[-1]),
        "final_relative_error": float(rel[-1]),
        "error_is_relative": is_rel,
        "final_consensus_gap": float(trace.consensus_gap[-1]),
        "final_gradient_norm": float(np.linalg.norm(estimate_gradients(sc.game, X_final))),
        "tail_log_decay_monotone": log_decay_monotone(trace.times, trace.error_to_ne),
        "rate_fit": fit_d,
        "certificate": report.get("certificate", False),
        "snap_distance": trace.snap_distance,
        "attack_mode_fraction": float(np.mean(trace.mode)),
        "attack_intervals": len(union),
        "attacked_time": float(sum(b - a for a, b in union)),
        "channel_stats": channel_stats(sc.schedule),
        "budget_check": budget_check,
        "config": sc.resolved,
    }
    _write_json(out_dir / "summary.json", summary)
    _write_json(out_dir / "rate_report.json", report)
    if plot:
        from .plotting import plot_trace

        plot_trace(trace, out_dir / "trace.png", title=sc.name)
    return summary, code


# subcommands ---------------------------------------------------------------


def _load(args, overrides=None) -> Scenario:
    return load_scenario(args.scenario, seed=args.seed, step=args.step, decimation=args.decimate,
                         overrides=overrides)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def cmd_run(args) -> int:
    sc = _load(args)
    out = Path(args.out) if args.out else sc.out_dir
    summary, code = run_scenario(sc, out, plot=args.plot)
    if "error" in summary:
        print(f"error: {summary['error']}", file=sys.stderr)
        return code
    _say(args, f"{sc.name}: final relative error {summary['final_relative_error']:.3e}, "
               f"consensus gap {summary['final_consensus_gap']:.3e}, "
               f"{'converged' if summary['converged'] else 'not converged'}, "
               f"certificate {'yes' if summary['certificate'] else 'no'}")
    if summary["ne_reference"] and summary["ne_reference"]["flagged"]:
        _say(args, "note: oracle NE differs from the published reference for players "
                   f"{summary['ne_reference']['mismatched_players']}")
    if summary["diverged"]:
        print("error: simulation diverged; partial trace written", file=sys.stderr)
    _say(args, f"outputs written to {out}")
    return code


def sweep_overrides(axis: str, value: str) -> tuple[dict, tuple[str, ...]]:
    """Overrides for one sweep member and the sections they replace outright."""
    if axis == "kappa":
        return {"gains": {"kappa": float(value)}}, ()
    if axis == "players":
        N = int(value)
        return ({"game": {"players": N}, "graph": {"kind": "cycle", "nodes": N},
                 "init": {"own": [-2.0 * (i + 1) for i in range(N)]}}, ("graph", "init"))
    if axis == "topology":
        if value.endswith(".toml"):
            return {"graph": load_toml(value)["graph"]}, ("graph",)
        return {"graph": {"kind": value}}, ("graph",)
    if axis == "budget":
        if value == "none":
            return {"schedule": {"mode": "none"}}, ("schedule",)
        if value.endswith(".toml"):
            return {"schedule": load_toml(value)["schedule"]}, ("schedule",)
        if value.startswith("staggered"):
            duty = float(value.split(":")[1]) if ":" in value else 0.9
            return {"schedule": {"mode": "staggered", "duty": duty}}, ("schedule",)
        raise ScenarioError(f"budget value {value!r}: expected none, staggered[:duty] or a .toml fragment")
    raise ScenarioError(f"unknown sweep axis {axis!r}")


def member_scenario(scenario, axis: str, value: str, seed=None, step=None, decimate=None) -> Scenario:
    try:
        overrides, replaced = sweep_overrides(axis, value)
    except ValueError as exc:
        raise ScenarioError(f"bad {axis} value {value!r}: {exc}") from None
    raw = load_toml(scenario)
    for key in replaced:
        raw.pop(key, None)
    return scenario_from_dict(deep_merge(raw, overrides), Path(str(scenario)).stem, seed=seed,
                              step=step, decimation=decimate)


def _sweep_member(job) -> dict:
    scenario, axis, value, seed, step, decimate, out, plot = job
    sc = member_scenario(scenario, axis, value, seed, step, decimate)
    summary, code = run_scenario(sc, Path(out), plot=plot)
    fit = summary.get("rate_fit", {})
    return {
        "axis": axis,
        "value": value,
        "eta_hat": fit.get("eta_hat"),
        "r_squared": fit.get("r_squared"),
        "final_relative_error": summary.get("final_relative_error"),
        "final_consensus_gap": summary.get("final_consensus_gap"),
        "converged": summary.get("converged"),
        "diverged": summary.get("diverged"),
        "certificate": summary.get("certificate"),
        "exit_code": code,
    }


def run_sweep(scenario, axis, values, out: Path, seed=None, step=None, decimate=None, jobs=1,
              plot=False) -> list[dict]:
    """One run per value; writes ``sweep.csv`` (and ``sweep.png`` with ``plot``)."""
    if axis not in AXES:
        raise ScenarioError(f"sweep axis must be one of {AXES}, got {axis!r}")
    jobs_list = [(str(scenario), axis, str(v), seed, step, decimate,
                  str(out / f"{axis}_{Path(str(v)).stem}"), plot) for v in values]
    # validate every member before running any of them
    for job in jobs_list:
        try:
            member_scenario(*job[:6])
        except ScenarioError as exc:
            raise ScenarioError(f"sweep member {axis} = {job[2]}: {exc}") from None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_member, jobs_list))
    else:
        rows = [_sweep_member(j) for j in jobs_list]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    if plot:
        from .plotting import plot_sweep

        plot_sweep(rows, axis, out / "sweep.png")
    return rows


def cmd_sweep(args) -> int:
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ScenarioError("--values must list at least one value")
    out = Path(args.out) if args.out else Path("out") / f"sweep_{args.axis}"
    rows = run_sweep(args.scenario, args.axis, values, out, args.seed, args.step, args.decimate,
                     args.jobs, args.plot)
    for r in rows:
        eta = "n/a" if r["eta_hat"] is None else f"{r['eta_hat']:.4f}"
        _say(args, f"{args.axis} = {r['value']}: eta_hat {eta}, final relative error "
                   f"{r['final_relative_error']:.3e}")
    _say(args, f"sweep table written to {out / 'sweep.csv'}")
    return EXIT_SOLVER if any(r["exit_code"] == EXIT_SOLVER for r in rows) else EXIT_OK


def cmd_oracle(args) -> int:
    sc = _load(args)
    try:
        ne = solve_ne(sc.game)
    except NEConvergenceError as exc:
        print(f"error: {exc}; last iterate {np.array2string(exc.x)}, residual {exc.residual:.3e}",
              file=sys.stderr)
        return EXIT_SOLVER
    print(f"x* = {np.array2string(ne.x_star, precision=6)}")
    print(f"residual = {ne.residual:.3e} after {ne.iterations} iterations")
    box = tuple(sc.resolved["regularity"]["box"])
    samples, seed = int(sc.resolved["regularity"]["samples"]), int(sc.resolved["regularity"]["seed"])
    lam2 = laplacian_bundle(sc.graph).lambda2
    try:
        reg, iota, stacked = unified_iota(sc.game, box, samples, seed)
        print(f"epsilon = {reg.epsilon:.6g}, iota = {reg.iota:.6g} ({reg.provenance}), "
              f"stacked iota = {stacked:.6g}")
        print(f"lambda2 = {lam2:.6g}, kappa bound = {kappa_bound(reg.epsilon, iota, lam2):.6g}")
    except RegularityError as exc:
        print(f"regularity: {exc}; no gain bound available")
    cmp = reference_comparison(sc.game, ne.x_star)
    if cmp is not None:
        print(f"published reference = {np.array2string(cmp['reference'], precision=4)}")
        if cmp["flagged"]:
            print(f"DISCREPANCY: oracle differs from the reference for players {cmp['mismatched_players']} "
                  f"(differences {np.array2string(cmp['difference'], precision=4)})")
    return EXIT_OK


def cmd_verify_schedule(args) -> int:
    sc = _load(args)
    if sc.budget is None:
        raise ScenarioError("[schedule] has no budget to verify against")
    report = verify_budget(sc.schedule, sc.budget)
    report["budget"] = {"N0": sc.budget.N0, "T_f": sc.budget.T_f, "T0": sc.budget.T0, "T_a": sc.budget.T_a}
    report["channel_stats"] = channel_stats(sc.schedule)
    print(json.dumps(_jsonable(report), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: [outputs].dir of the scenario)")
    common.add_argument("--seed", type=int, help="seed for generated attack schedules")
    common.add_argument("--step", type=float, help="integration step in seconds")
    common.add_argument("--decimate", type=int, help="keep every k-th integration step in the trace")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")
    common.add_argument("--plot", action="store_true", help="also render PNG figures next to the outputs")

    parser = argparse.ArgumentParser(
        prog="resilient-ne",
        description="Distributed NE seeking over directed networks under DoS attacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="simulate one scenario")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", parents=[common], help="vary one axis of a scenario")
    p.add_argument("scenario")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel member runs")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("oracle", parents=[common], help="solve for the NE and print regularity data")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("verify-schedule", parents=[common], help="check a schedule against its budget")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_verify_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
