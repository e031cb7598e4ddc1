"""Command-line drivers: single solves, scenario generation, batch studies and the oracle check.

Exit codes: 0 success, 2 solver failure, 3 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .coordination_net import run_distributed_solve
from .pdip_solver import SolverConfig, solve
from .problem import Problem
from .reca_param import RecaMode, suboptimality
from .reference_oracle import direction_error, random_interior_iterate
from .scenario_io import dumps, generate_random_scenario, scenario_from_dict
from .transcription import ScenarioError, Scenario, split_w

log = logging.getLogger(__name__)

EXIT_OK, EXIT_SOLVER, EXIT_INPUT = 0, 2, 3
HESSIAN = {"gn": "gauss_newton", "exact": "exact_with_inertia"}
TAU_SWEEP = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
TRACE_COLUMNS = ("iter", "r_inf", "tau", "alpha", "alpha_max", "merit")
TRAJ_COLUMNS = ("k", "t", "p", "v", "E", "Fb")
HIST_EDGES = (-np.inf, 0.0, 1e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, np.inf)

# defaults per driver: the reference layout for single solves, the smaller batch layout for studies
SINGLE_LAYOUT = {"n_lanes": 4, "vehicles_per_lane": 3, "distance_range": (80.0, 120.0), "K": 100}
BATCH_LAYOUT = {"n_lanes": 2, "vehicles_per_lane": 4, "distance_range": (50.0, 150.0), "K": 60}


class InputError(ValueError):
    pass


# ---- artifacts ----

def write_trace(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for r in report.records:
            out.writerow([r.iteration, repr(r.r_inf), repr(r.tau), repr(r.alpha), repr(r.alpha_max), repr(r.merit)])


def write_trajectories(out_dir: Path, result) -> list[Path]:
    """One CSV per vehicle; the inputs of the terminal node are left empty."""
    prob = result.problem
    scn = prob.scenario
    paths = []
    for i, w in enumerate(result.iterate_w()):
        xs, us = split_w(w, scn.K)
        path = out_dir / f"trajectory_v{i}.csv"
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(TRAJ_COLUMNS)
            for k in range(scn.K + 1):
                e, fb = (repr(float(us[k, 0])), repr(float(us[k, 1]))) if k < scn.K else ("", "")
                out.writerow([k, repr(k * scn.dt), repr(float(xs[k, 0])), repr(float(xs[k, 1])), e, fb])
        paths.append(path)
    return paths


def write_json(path: Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---- option handling ----

def solver_config(opts: dict) -> SolverConfig:
    kw = {}
    if opts.get("tol") is not None:
        kw["eps"] = float(opts["tol"])
    if opts.get("max_iter") is not None:
        kw["max_iter"] = int(opts["max_iter"])
    if opts.get("tau_min") is not None:
        kw["tau_min"] = float(opts["tau_min"])
    if opts.get("tau0") is not None:
        kw["tau0"] = float(opts["tau0"])
    hm = opts.get("hessian", "gn")
    kw["hessian_mode"] = HESSIAN.get(hm, hm)
    try:
        return SolverConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def scenario_doc(opts: dict, layout: dict, seed: int | None = None) -> dict:
    """Scenario document from a file or, without one, from the seeded generator."""
    if opts.get("scenario") and seed is None:
        try:
            return json.loads(Path(opts["scenario"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read scenario {opts['scenario']}: {exc}") from exc
    lay = dict(layout)
    for key in ("n_lanes", "vehicles_per_lane", "K"):
        if opts.get(key) is not None:
            lay[key] = int(opts[key])
    if opts.get("distance_range") is not None:
        lay["distance_range"] = tuple(float(x) for x in opts["distance_range"])
    seed = int(opts.get("seed") or 0) if seed is None else seed
    try:
        return generate_random_scenario(seed, lay["n_lanes"], lay["vehicles_per_lane"], lay["distance_range"],
                                        K=lay["K"])
    except (ValueError, ScenarioError) as exc:
        raise InputError(str(exc)) from exc


def load_doc(doc: dict) -> Scenario:
    try:
        return scenario_from_dict(doc)
    except ScenarioError as exc:
        raise InputError(str(exc)) from exc


def run_solver(scn: Scenario, mode: str, config: SolverConfig, distributed: bool, workers: int = 1):
    try:
        prob = Problem(scn, RecaMode(mode))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if distributed:
        return run_distributed_solve(prob, config, workers=workers)
    return solve(prob, config)


def _summary(result, config: SolverConfig, doc: dict, opts: dict) -> dict:
    rep = result.report
    return {
        "status": rep.status,
        "converged": rep.converged,
        "iterations": rep.iterations,
        "objective": rep.objective,
        "r_inf": rep.r_inf,
        "tau": rep.tau,
        "reca": opts.get("reca", "exact"),
        "distributed": bool(opts.get("distributed")),
        "config": asdict(config),
        "seed": doc.get("seed"),
        "scenario": doc,
    }


# ---- drivers ----

def _single(opts: dict, out: Path) -> dict:
    doc = scenario_doc(opts, SINGLE_LAYOUT)
    scn = load_doc(doc)
    config = solver_config(opts)
    res = run_solver(scn, opts.get("reca", "exact"), config, bool(opts.get("distributed")), opts.get("workers", 1))
    write_trace(out / "trace.csv", res.report)
    write_trajectories(out, res)
    if res.ledger is not None:
        (out / "ledger.csv").write_text(res.ledger.to_csv())
    summary = _summary(res, config, doc, opts)
    write_json(out / "summary.json", summary)
    return summary


def _tau_sweep(opts: dict, out: Path) -> dict:
    doc = scenario_doc(opts, SINGLE_LAYOUT)
    scn = load_doc(doc)
    base = solver_config(opts)
    rows = []
    for tmin in TAU_SWEEP:
        cfg = base.with_(tau_min=tmin, tau0=max(base.tau0, tmin))
        res = run_solver(scn, opts.get("reca", "exact"), cfg, False)
        rows.append({"tau_min": tmin, "status": res.report.status, "iterations": res.report.iterations,
                     "objective": res.report.objective})
    ref = next((r["objective"] for r in reversed(rows) if r["status"] == "converged"), None)
    for r in rows:
        r["gap"] = (r["objective"] - ref) / abs(ref) if ref and r["status"] == "converged" else None
    with open(out / "tau_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["tau_min", "status", "iterations", "objective", "gap"])
        w.writeheader()
        w.writerows(rows)
    summary = {"rows": rows, "config": asdict(base), "seed": doc.get("seed"), "scenario": doc}
    write_json(out / "summary.json", summary)
    return summary


def _reca_case(args):
    seed, opts = args
    doc = scenario_doc(opts, BATCH_LAYOUT, seed=seed)
    scn = load_doc(doc)
    cfg = solver_config(opts)
    try:
        r = suboptimality(scn, cfg, opts.get("reca", "primal"))
    except Exception as exc:  # one broken case must not stop the batch
        log.warning("seed %d failed: %s", seed, exc)
        return {"seed": seed, "status_exact": type(exc).__name__, "status_param": type(exc).__name__,
                "gap": None, "j_exact": None, "j_param": None, "reca_violation": None}
    return {"seed": seed, "status_exact": r.status_exact, "status_param": r.status_param, "gap": r.gap,
            "j_exact": r.j_exact, "j_param": r.j_param, "reca_violation": r.reca_violation}


def comm_counts(scn: Scenario, mode: str, config: SolverConfig) -> dict:
    """First-iteration vehicle-to-lane search-direction floats from a one-iteration distributed run."""
    res = run_distributed_solve(Problem(scn, RecaMode(mode)), config.with_(max_iter=1))
    led = res.ledger
    return {"v2l_search": led.first_iteration_floats("search_direction", "vehicle", "lane"),
            "ledger": led}


def _reca_batch(opts: dict, out: Path) -> dict:
    n = int(opts.get("seeds") or 50)
    s0 = int(opts.get("seed") or 0)
    jobs = int(opts.get("jobs") or 1)
    tasks = [(s, opts) for s in range(s0, s0 + n)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_reca_case, tasks))
    else:
        rows = [_reca_case(t) for t in tasks]
    with open(out / "suboptimality.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    gaps = np.array([r["gap"] for r in rows if r["gap"] is not None])
    counts, _ = np.histogram(gaps, bins=np.array(HIST_EDGES)) if gaps.size else (np.zeros(len(HIST_EDGES) - 1), None)
    with open(out / "suboptimality_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count"])
        for lo, hi, c in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts):
            w.writerow([lo, hi, int(c)])
    viols = [r["reca_violation"] for r in rows if r["reca_violation"] is not None]
    doc0 = scenario_doc(opts, BATCH_LAYOUT, seed=s0)
    cfg = solver_config(opts)
    ex = comm_counts(load_doc(doc0), "exact", cfg)["v2l_search"]
    pa = comm_counts(load_doc(doc0), opts.get("reca", "primal"), cfg)["v2l_search"]
    summary = {
        "n": n,
        "failures": n - int(gaps.size),
        "median_gap": float(np.median(gaps)) if gaps.size else None,
        "share_below_1e-3": float(np.mean(gaps <= 1e-3)) if gaps.size else None,
        "share_below_5e-3": float(np.mean(gaps <= 5e-3)) if gaps.size else None,
        "max_reca_violation": max(viols) if viols else None,
        "v2l_floats_exact": ex,
        "v2l_floats_param": pa,
        "v2l_reduction": 1.0 - pa / ex if ex else None,
        "config": asdict(cfg),
        "seeds": [s0, s0 + n],
        "layout": {k: opts.get(k) or v for k, v in BATCH_LAYOUT.items()},
    }
    write_json(out / "summary.json", summary)
    return summary


def _comm_report(opts: dict, out: Path) -> dict:
    doc = scenario_doc(opts, SINGLE_LAYOUT)
    scn = load_doc(doc)
    cfg = solver_config(opts)
    rows = []
    for mode in ("exact", "primal", "dual"):
        led = comm_counts(scn, mode, cfg)["ledger"]
        (out / f"ledger_{mode}.csv").write_text(led.to_csv())
        for (phase, st, dt), floats in sorted(_link_totals(led).items()):
            rows.append({"mode": mode, "phase": phase, "src_tier": st, "dst_tier": dt, "floats": floats,
                         "max_airtime_us": max(r.airtime_us for r in led.select(phase, st, dt, iteration=0))})
    with open(out / "comm_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    tot = {m: sum(r["floats"] for r in rows if r["mode"] == m and r["phase"] == "search_direction"
                  and (r["src_tier"], r["dst_tier"]) == ("vehicle", "lane")) for m in ("exact", "primal", "dual")}
    summary = {"v2l_search_floats": tot,
               "reduction_primal": 1.0 - tot["primal"] / tot["exact"] if tot["exact"] else None,
               "config": asdict(cfg), "seed": doc.get("seed"), "scenario": doc}
    write_json(out / "summary.json", summary)
    return summary


def _link_totals(led) -> dict:
    """Floats per (phase, source tier, destination tier) over the first iteration."""
    tot: dict = {}
    for r in led.rows:
        if r.iteration != 0:
            continue
        key = (r.phase, r.src.tier.value, r.dst.tier.value)
        tot[key] = tot.get(key, 0) + r.floats
    return tot


DRIVERS = {"single": _single, "tau_sweep": _tau_sweep, "reca_batch": _reca_batch, "comm_report": _comm_report}


def run_experiment(kind: str, options: dict) -> dict:
    """Run one driver, write its artifacts under options['out'] and return the summary."""
    if kind not in DRIVERS:
        raise InputError(f"unknown experiment {kind!r}")
    out = Path(options.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return DRIVERS[kind](options, out)


# ---- command line ----

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, reca_default: str = "exact") -> None:
    p.add_argument("--scenario", help="scenario JSON file (default: generated from --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau-min", type=float, default=None)
    p.add_argument("--tau0", type=float, default=None)
    p.add_argument("--reca", choices=("exact", "primal", "dual"), default=reca_default)
    p.add_argument("--hessian", choices=tuple(HESSIAN), default="gn")
    p.add_argument("--out", default=".")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--distributed", choices=("on", "off"), default="off")
    p.add_argument("--workers", type=int, default=1, help="threads for the distributed runtime")
    p.add_argument("--lanes", dest="n_lanes", type=int, choices=(1, 2, 4), default=None)
    p.add_argument("--per-lane", dest="vehicles_per_lane", type=int, default=None)
    p.add_argument("--distance-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("-K", type=int, dest="K", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="intersection-pdip", description="Distributed interior-point intersection coordination")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    _common(sub.add_parser("solve", help="solve one scenario and write trace/trajectory/ledger/summary"))
    g = sub.add_parser("gen", help="write a seeded random scenario file")
    _common(g)
    b = sub.add_parser("batch-reca", help="exact vs parameterized rear-end constraints over many seeds")
    _common(b, reca_default="primal")
    b.add_argument("--seeds", type=int, default=50)
    b.add_argument("--jobs", type=int, default=1)
    _common(sub.add_parser("sweep-tau", help="iterations and objective gap per barrier floor"))
    _common(sub.add_parser("comm-report", help="per-link float counts of exact and parameterized modes"))
    c = sub.add_parser("check-kkt", help="compare hierarchical and dense search directions")
    _common(c)
    c.add_argument("--samples", type=int, default=10)
    return ap


def _opts(ns: argparse.Namespace) -> dict:
    d = vars(ns).copy()
    d["distributed"] = d.get("distributed") == "on"
    return d


def _check_kkt(opts: dict) -> int:
    tol = opts.get("tol") or 1e-8
    doc = scenario_doc(opts, {"n_lanes": 2, "vehicles_per_lane": 2, "distance_range": (30.0, 60.0), "K": 20})
    scn = load_doc(doc)
    prob = Problem(scn, RecaMode(opts.get("reca", "exact")))
    rng = np.random.Generator(np.random.PCG64(opts.get("seed") or 0))
    hm = HESSIAN.get(opts.get("hessian", "gn"))
    worst = max(direction_error(prob, random_interior_iterate(prob, rng), hm) for _ in range(opts["samples"]))
    print(f"max relative direction error {worst:.3e} (tol {tol:g})")
    return EXIT_OK if worst <= tol else EXIT_SOLVER


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    opts = _opts(ns)
    logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.verb == "gen":
            doc = scenario_doc(opts, SINGLE_LAYOUT)
            load_doc(doc)
            text = dumps(doc)
            if opts["out"] in (".", "-"):
                sys.stdout.write(text)
            else:
                Path(opts["out"]).write_text(text)
            return EXIT_OK
        if ns.verb == "check-kkt":
            return _check_kkt(opts)
        kind = {"solve": "single", "sweep-tau": "tau_sweep", "batch-reca": "reca_batch",
                "comm-report": "comm_report"}[ns.verb]
        summary = run_experiment(kind, opts)
    except InputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    printable = {k: v for k, v in summary.items() if k not in ("scenario", "config", "rows")}
    print(json.dumps(printable, indent=2, sort_keys=True, default=str))
    if kind == "single":
        return EXIT_OK if summary["converged"] else EXIT_SOLVER
    if kind == "tau_sweep":
        return EXIT_OK if all(r["status"] == "converged" for r in summary["rows"]) else EXIT_SOLVER
    if kind == "reca_batch":
        return EXIT_OK if summary["failures"] < summary["n"] else EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
