"""Command-line experiment runner.

Subcommands: ``allocate``, ``simulate``, ``fit``, ``compare`` and ``bound``.
Every CSV starts with ``#`` metadata lines (tool version, command, scenario
hash, seed, resolved scenario and, unless ``--no-timestamp``, the creation
time). Exit codes: 0 success, 2 configuration/input error, 3 solver error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import channel as ch
from . import problem as pb
from .baselines import srm_allocate_detailed, sum_rate, uniform_allocate
from .channel import ConfigError, DomainError
from .config import ALLOCATORS, ENV_PREFIX, Scenario, env_overrides, load_scenario
from .fedsim import run_online
from .fom_solver import DivergenceError, solve_fom
from .lossmodel import ContractionError, ParseError, convergence_bound, fit_power_law, read_points_csv
from .mm_solver import InnerSolveError, solve_mm
from .problem import AllocationProblem

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- output helpers ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def metadata_lines(command: str, scenario: Scenario | None, seed, timestamp: bool) -> list[str]:
    lines = [f"# feelpower {__version__}", f"# command: {command}"]
    if scenario is not None:
        lines.append(f"# scenario_hash: {scenario.scenario_hash}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    if scenario is not None:
        lines.append("# scenario: " + json.dumps(scenario.resolved, sort_keys=True, separators=(",", ":")))
    if timestamp:
        lines.append("# created: " + _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    return lines


def render_csv(meta: list[str], header: list[str], rows) -> str:
    buf = io.StringIO()
    for line in meta:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_text(path: str, text: str) -> str:
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None
    return path


def _map(fn, items, jobs):
    """Ordered map, optionally over a process pool; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- allocation runs ----------------------------------------------------------------

def run_allocator(name: str, prob: AllocationProblem, scenario: Scenario, seed: int) -> dict:
    """Run one allocator and return its power vector plus a uniform trace record."""
    t0 = time.perf_counter()
    extra: dict = {}
    if name == "uniform":
        p = uniform_allocate(prob)
        trace_header = ["t", "phi"]
        trace_rows = [[0, pb.phi_global(prob, p)]]
        iterations, status = 0, "closed_form"
    elif name == "srm":
        res = srm_allocate_detailed(prob, restarts=scenario.srm_restarts, seed=seed)
        p = res.p
        trace_header = ["t", "phi"]
        trace_rows = [[0, pb.phi_global(prob, p)]]
        iterations, status = res.restarts, "best_of_restarts"
    elif name == "mm":
        res = solve_mm(prob, scenario.mm)
        p = res.p_opt
        trace_header = ["t", "phi", "step_norm", "samples_collected"]
        trace_rows = [[h["t"], h["phi"], h["step_norm"], h["samples_collected"]] for h in res.history]
        iterations, status = res.iterations, res.status
    elif name == "fom":
        res = solve_fom(prob, scenario.fom)
        p = res.p_opt
        trace_header = ["t", "mse", "phi", "beta", "theta", "sum_p"]
        trace_rows = [[h["t"], h["mse"], h["phi"], h["beta"], h["theta"], h["sum_p"]] for h in res.history]
        iterations, status = res.iterations, res.status
    else:  # pragma: no cover - argparse restricts the choices
        raise CliError(f"unknown allocator {name!r}", EXIT_CONFIG)
    extra["wall_time"] = time.perf_counter() - t0
    return {
        "name": name,
        "p": p,
        "trace_header": trace_header,
        "trace_rows": trace_rows,
        "iterations": iterations,
        "status": status,
        **extra,
    }


def _problem(scenario: Scenario, seed: int):
    channels = ch.sample_channels(scenario.network, seed)
    return channels, AllocationProblem.from_config(scenario.network, channels)


def _allocate_job(args):
    scenario, seed = args
    channels, prob = _problem(scenario, seed)
    return channels, prob, run_allocator(scenario.allocator, prob, scenario, seed)


def cmd_allocate(scenario: Scenario, opts) -> list[str]:
    written = []
    results = _map(_allocate_job, [(scenario, s) for s in scenario.seeds], opts.jobs)
    for seed, (channels, prob, res) in zip(scenario.seeds, results):
        meta = metadata_lines("allocate", scenario, seed, opts.timestamp)
        stem = os.path.join(scenario.out, f"allocate_{res['name']}_seed{seed}")
        p = res["p"]
        G, sigma2 = channels.gains, scenario.network.noise_power
        r = ch.rates(G, p, sigma2)
        n = ch.device_samples(G, p, sigma2, scenario.network)
        rows = [[k, int(prob.node_of[k]), p[k], r[k], n[k]] for k in range(prob.num_devices)]
        written.append(write_text(stem + "_power.csv", render_csv(meta, ["k", "node", "p_mw", "rate", "samples"], rows)))
        written.append(write_text(stem + "_trace.csv", render_csv(meta, res["trace_header"], res["trace_rows"])))
        buf = io.StringIO()
        ch.write_channels_csv(channels, buf)
        written.append(write_text(stem + "_channels.csv", "\n".join(meta) + "\n" + buf.getvalue()))
        phi = pb.phi_global(prob, p)
        print(f"seed {seed}: {res['name']} phi={phi:.6g} status={res['status']} iterations={res['iterations']}")
        if opts.plot:
            from . import plotting

            col = res["trace_header"].index("phi")
            trace = [row[col] for row in res["trace_rows"]]
            written.append(plotting.objective_trace({res["name"]: trace}, stem + "_trace.png"))
    return written


def _simulate_job(args):
    scenario, seed = args
    return run_online(scenario.network, scenario.allocator, scenario.task, scenario.rounds, seed, scenario.sim)


def cmd_simulate(scenario: Scenario, opts) -> list[str]:
    written = []
    traces = _map(_simulate_job, [(scenario, s) for s in scenario.seeds], opts.jobs)
    I = scenario.network.num_nodes
    summary = []
    for seed, tr in zip(scenario.seeds, traces):
        meta = metadata_lines("simulate", scenario, seed, opts.timestamp)
        path = os.path.join(scenario.out, f"simulate_{scenario.allocator}_seed{seed}.csv")
        written.append(write_text(path, render_csv(meta, tr.header(I), tr.rows())))
        last = tr.records[-1] if tr.records else None
        summary.append(
            [seed, len(tr.records), tr.final_loss if last else "", sum(last.counts) if last else sum(tr.initial_counts)]
        )
    meta = metadata_lines("simulate", scenario, " ".join(map(str, scenario.seeds)), opts.timestamp)
    path = os.path.join(scenario.out, f"simulate_{scenario.allocator}_summary.csv")
    written.append(write_text(path, render_csv(meta, ["seed", "rounds", "final_loss", "total_samples"], summary)))
    for row in summary:
        print(f"seed {row[0]}: rounds={row[1]} final_loss={row[2]} total_samples={row[3]}")
    if opts.plot and any(tr.records for tr in traces):
        from . import plotting

        curves = {f"seed {s}": ([r.t for r in tr.records], [r.global_loss for r in tr.records]) for s, tr in zip(scenario.seeds, traces)}
        written.append(plotting.loss_by_round(curves, os.path.join(scenario.out, f"simulate_{scenario.allocator}.png")))
    return written


def cmd_fit(path: str, opts) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            points = read_points_csv(fh)
    except FileNotFoundError:
        raise CliError(f"loss file not found: {path}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except ParseError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    try:
        curve = fit_power_law(points)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    row = [curve.a, curve.b, curve.residual, int(curve.fallback)]
    text = render_csv(metadata_lines("fit", None, None, opts.timestamp), ["a", "b", "residual", "fallback"], [row])
    sys.stdout.write(text)
    written = []
    if opts.out:
        written.append(write_text(os.path.join(opts.out, "fit.csv"), text))
        if opts.plot:
            from . import plotting

            written.append(plotting.loss_curve(points, curve.a, curve.b, os.path.join(opts.out, "fit.png")))
    return written


COMPARE_ORDER = ("uniform", "srm", "mm", "fom")


def _compare_job(args):
    scenario, seed = args
    _, prob = _problem(scenario, seed)
    out = []
    for name in COMPARE_ORDER:
        try:
            res = run_allocator(name, prob, scenario, seed)
        except (InnerSolveError, DivergenceError) as exc:
            res = {"name": name, "p": None, "iterations": "", "status": f"error: {exc}", "wall_time": math.nan}
        out.append(res)
    return prob, out


def cmd_compare(scenario: Scenario, opts) -> list[str]:
    written = []
    I = scenario.network.num_nodes
    header = ["allocator", "phi", "capped_phi"] + [f"samples_{i}" for i in range(I)]
    header += ["sum_rate", "sum_p", "wall_time", "iterations", "status", "qot_max"]
    results = _map(_compare_job, [(scenario, s) for s in scenario.seeds], opts.jobs)
    for seed, (prob, runs) in zip(scenario.seeds, results):
        rows = []
        for res in runs:
            p = res["p"]
            if p is None:
                rows.append([res["name"]] + [""] * (len(header) - 6) + ["", res["iterations"], res["status"], ""])
                continue
            samples = pb.node_surplus(prob, p) + prob.caps
            wall = "" if not opts.timestamp else res["wall_time"]
            rows.append(
                [res["name"], pb.phi_global(prob, p), pb.capped_deficit(prob, p)]
                + list(samples)
                + [sum_rate(prob, p), float(np.sum(p)), wall, res["iterations"], res["status"], ""]
            )
        meta = metadata_lines("compare", scenario, seed, opts.timestamp)
        meta.append("# qot_max: benchmark not reimplemented; column intentionally empty")
        path = os.path.join(scenario.out, f"compare_seed{seed}.csv")
        written.append(write_text(path, render_csv(meta, header, rows)))
        for r in rows:
            print(f"seed {seed}: {r[0]:8s} phi={r[1]!s:>24} capped={r[2]!s:>24}")
        if opts.plot:
            from . import plotting

            ok = [r for r in rows if r[2] != ""]
            written.append(
                plotting.compare_bars([r[0] for r in ok], [r[2] for r in ok], os.path.join(scenario.out, f"compare_seed{seed}.png"))
            )
    return written


def cmd_bound(scenario: Scenario, opts) -> list[str]:
    params = scenario.bound_params()
    alpha = opts.alpha if opts.alpha is not None else scenario.bound.get("alpha", 0.25)
    t_max = opts.t_max if opts.t_max is not None else scenario.bound.get("t_max", 100)
    if t_max < 0:
        raise CliError("t_max must be >= 0", EXIT_CONFIG)
    try:
        rows = [[t, convergence_bound(params, alpha, t)] for t in range(t_max + 1)]
    except ContractionError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    meta = metadata_lines("bound", scenario, None, opts.timestamp)
    meta.append(f"# alpha: {alpha!r}")
    path = os.path.join(scenario.out, "bound.csv")
    written = [write_text(path, render_csv(meta, ["t", "bound"], rows))]
    print(f"bound at t=0: {rows[0][1]:.6g}, t={t_max}: {rows[-1][1]:.6g}")
    if opts.plot:
        from . import plotting

        written.append(plotting.bound_curve([r[0] for r in rows], [r[1] for r in rows], os.path.join(scenario.out, "bound.png")))
    return written


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML scenario file (default: built-in scenario)")
    common.add_argument("--seed", type=int, help="run this single seed instead of the scenario's seed list")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the scenario)")
    common.add_argument("--allocator", choices=ALLOCATORS, help="allocator for allocate/simulate")
    common.add_argument("--no-momentum", action="store_true", help="disable momentum in the fom solver")
    common.add_argument("--no-timestamp", action="store_true", help="omit wall-clock data so reruns are byte-identical")
    common.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV files")
    common.add_argument("--jobs", type=int, help="worker processes for multi-seed runs (default 1)")

    parser = argparse.ArgumentParser(
        prog="feelpower",
        description="Learning-oriented uplink power allocation for federated edge learning.",
        epilog=f"Environment overrides: {ENV_PREFIX}CONFIG, {ENV_PREFIX}SEED, {ENV_PREFIX}OUT, "
        f"{ENV_PREFIX}ALLOCATOR, {ENV_PREFIX}JOBS (command-line flags win).",
    )
    parser.add_argument("--version", action="version", version=f"feelpower {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("allocate", parents=[common], help="solve one power allocation per seed")
    sub.add_parser("simulate", parents=[common], help="closed-loop federated training per seed")
    p_fit = sub.add_parser("fit", parents=[common], help="fit loss = a * n^-b to an (n, loss) CSV")
    p_fit.add_argument("loss_csv", help="CSV with columns n,loss")
    sub.add_parser("compare", parents=[common], help="uniform, srm, mm and fom on identical channels")
    p_bound = sub.add_parser("bound", parents=[common], help="evaluate the convergence bound over t")
    p_bound.add_argument("--alpha", type=float, help="data-deficit factor ((D - n) / D)^2")
    p_bound.add_argument("--t-max", type=int, dest="t_max", help="last round to evaluate")
    return parser


def _resolve(opts, environ=None):
    env = env_overrides(environ)
    config = opts.config or env.get("config")
    seed = opts.seed if opts.seed is not None else env.get("seed")
    overrides = {
        "allocator": opts.allocator or env.get("allocator"),
        "out": opts.out or env.get("out"),
        "seeds": [seed] if seed is not None else None,
        "momentum": False if opts.no_momentum else None,
    }
    opts.jobs = opts.jobs if opts.jobs is not None else env.get("jobs", 1)
    if opts.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    opts.timestamp = not opts.no_timestamp
    if opts.command == "fit":
        opts.out = overrides["out"]
        return None
    return load_scenario(config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    opts = parser.parse_args(argv)
    try:
        scenario = _resolve(opts)
        if opts.command == "fit":
            cmd_fit(opts.loss_csv, opts)
        else:
            {"allocate": cmd_allocate, "simulate": cmd_simulate, "compare": cmd_compare, "bound": cmd_bound}[opts.command](
                scenario, opts
            )
    except CliError as exc:
        print(f"feelpower: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"feelpower: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InnerSolveError, DivergenceError) as exc:
        print(f"feelpower: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DomainError as exc:
        print(f"feelpower: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"feelpower: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
