"""Command-line entry point.

One binary, eight subcommands: simulate / meanfield / diffusion /
equilibrium / sweep / verify / fit-arrivals / gbfs-hist. Every run writes
its outputs plus a JSON manifest (resolved config, seed, version, wall
time) next to them, and identical (argv, config, seed) produce
byte-identical CSV files.

Exit codes: 0 success, 1 validation or input error, 2 runtime or
convergence failure. A failing verify suite exits 2; an insufficient
sample exits 0 with the status recorded in the report.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .model import ConvergenceError, SystemParams, ValidationError, validate_params
from .meanfield import (
    HeterogeneousMeasure,
    builtin_measure,
    integrate,
    integrate_hetero,
    ratio_projection,
)
from .diffusion import integrate_covariance
from .equilibrium import entropy, solve_equilibrium, solve_equilibrium_hetero
from .ingestion import fit_fourier, load_rate_series, parse_gbfs, snapshot_histograms
from .harness import (
    fclt_experiment,
    flln_experiment,
    forward_equation_residual,
    interchange_experiment,
    sweep,
)
from .simulator import simulate

__all__ = ["main"]

# 17 significant digits round-trips IEEE doubles exactly
FLOAT_FMT = "%.17g"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; 2 is reserved for runtime
    failures here, so usage problems are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _params_to_config(par: SystemParams) -> dict:
    """JSON-able config equivalent to the validated parameters."""
    if par.arrival.is_constant:
        arrival = {"constant": float(par.arrival.rate)}
    else:
        f = par.arrival.fourier
        arrival = {
            "fourier": {
                "intercept": float(f.intercept),
                "sin": [float(v) for v in f.sin_coeffs],
                "cos": [float(v) for v in f.cos_coeffs],
                "period": float(f.period),
            }
        }
    choice: dict = {"kind": par.choice.kind}
    key = {"exponential": "theta", "minimum": "c", "polynomial": "alpha"}.get(
        par.choice.kind
    )
    if key == "c":
        choice[key] = int(par.choice.param)
    elif key is not None:
        choice[key] = float(par.choice.param)
    if par.is_uniform:
        capacity: object = int(par.uniform_capacity)
    else:
        capacity = {
            "values": [int(v) for v in par.capacity_values],
            "fractions": [float(v) for v in par.capacity_fractions],
        }
    return {
        "n_stations": int(par.n_stations),
        "fleet": int(par.fleet),
        "mu": float(par.mu),
        "p": float(par.p),
        "arrival": arrival,
        "choice": choice,
        "capacity": capacity,
    }


def _load_params(path: str) -> SystemParams:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return validate_params(raw)


def _resolve_threads(args) -> int:
    t = getattr(args, "threads", None)
    if t is None:
        env = os.environ.get("BSS_THREADS")
        t = int(env) if env else (os.cpu_count() or 1)
    t = int(t)
    if t < 1:
        raise ValidationError(f"threads must be >= 1, got {t}")
    return t


def _manifest(
    out: str, subcommand: str, config, seed, outputs, started: float, details=None
) -> str:
    path = out + ".manifest.json"
    _write_json(
        path,
        {
            "subcommand": subcommand,
            "config": config,
            "seed": seed,
            "version": __version__,
            "outputs": list(outputs),
            "duration_seconds": round(time.perf_counter() - started, 3),
            "details": details or {},
        },
    )
    return path


def _sample_grid(horizon: float, dt: float) -> np.ndarray:
    if dt <= 0 or horizon < 0:
        raise ValidationError("horizon must be >= 0 and sample-dt > 0")
    return np.arange(int(math.floor(horizon / dt + 1e-9)) + 1) * dt


def _parse_y0(par: SystemParams, spec: str):
    """builtin:<name> or a CSV file holding one value per line."""
    if spec.startswith("builtin:"):
        return builtin_measure(par, spec.split(":", 1)[1])
    if not par.is_uniform:
        raise ValidationError(
            "y0 from file needs a uniform capacity; use builtin: measures"
        )
    vals = np.loadtxt(spec, delimiter=",", dtype=float, ndmin=1)
    return vals


# ---------------------------------------------------------------- handlers

def _cmd_simulate(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    traj = simulate(par, args.horizon, args.sample_dt, args.seed)
    rows = []
    if par.is_uniform:
        for ti, t in enumerate(traj.times):
            for n, v in enumerate(traj.y_series[ti]):
                rows.append((t, "y", n, v))
    else:
        for ti, t in enumerate(traj.times):
            for b, v in enumerate(traj.r_series[ti]):
                rows.append((t, "r", b, v))
    _write_csv(
        args.out,
        ("t", "observable", "index", "value"),
        ((t, obs, i, v) for t, obs, i, v in rows),
    )
    _manifest(
        args.out, "simulate", _params_to_config(par), args.seed, [args.out],
        started,
        details={
            "horizon": args.horizon,
            "sample_dt": args.sample_dt,
            "events": traj.event_count,
        },
    )
    return 0


def _cmd_meanfield(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    grid = _sample_grid(args.horizon, args.sample_dt)
    y0 = _parse_y0(par, args.y0)
    rows = []
    if par.is_uniform:
        path = integrate(y0, par, grid, h=args.step)
        for ti, t in enumerate(grid):
            for n, v in enumerate(path[ti]):
                rows.append((t, "y", n, v))
    else:
        tables = integrate_hetero(y0, par, grid, h=args.step)
        caps = tuple(par.capacity_values)
        for ti, t in enumerate(grid):
            ym = HeterogeneousMeasure(capacities=caps, table=tables[ti])
            for b, v in enumerate(ratio_projection(ym)):
                rows.append((t, "r", b, v))
    _write_csv(args.out, ("t", "observable", "index", "value"), rows)
    _manifest(
        args.out, "meanfield", _params_to_config(par), None, [args.out], started,
        details={"horizon": args.horizon, "sample_dt": args.sample_dt,
                 "y0": args.y0, "step": args.step},
    )
    return 0


def _cmd_diffusion(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    grid = _sample_grid(args.horizon, args.sample_dt)
    y0 = np.asarray(_parse_y0(par, args.y0), dtype=float)
    dim = par.uniform_capacity + 1
    states = integrate_covariance(y0, np.zeros((dim, dim)), par, grid, h=args.step)
    rows = []
    for state in states:
        for i in range(dim):
            for j in range(dim):
                rows.append((state.t, i, j, state.sigma[i, j]))
    _write_csv(args.out, ("t", "i", "j", "sigma_ij"), rows)
    _manifest(
        args.out, "diffusion", _params_to_config(par), None, [args.out], started,
        details={"horizon": args.horizon, "sample_dt": args.sample_dt,
                 "y0": args.y0, "step": args.step},
    )
    return 0


def _cmd_equilibrium(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    rows = []
    if par.is_uniform:
        eq = solve_equilibrium(par)
        k = par.uniform_capacity
        for n, v in enumerate(eq.y_bar):
            rows.append((k, n, v))
        details = {
            "residual": float(eq.residual),
            "iterations": int(eq.iterations),
            "a": float(eq.a),
            "s": float(eq.s),
            "entropy": float(entropy(eq.y_bar)),
        }
    else:
        ym, _ = solve_equilibrium_hetero(par)
        for c, k in enumerate(ym.capacities):
            for n in range(k + 1):
                rows.append((k, n, ym.table[c, n]))
        details = {"k_max": int(ym.k_max)}
    _write_csv(args.out, ("capacity", "n", "mass"), rows)
    _manifest(
        args.out, "equilibrium", _params_to_config(par), None, [args.out],
        started, details=details,
    )
    return 0


def _parse_grid_spec(spec: str, plane: str):
    """Two comma-separated axes 'p=a:b:c,<name>=a:b:c'; endpoints inclusive."""
    second = plane.split("-", 1)[1] if "-" in plane else ""
    parts = spec.split(",")
    if len(parts) != 2:
        raise ValidationError(
            f"grid must have exactly two axes 'p=...,{second or 'y'}=...', got {spec!r}"
        )
    axes = {}
    order = []
    for part in parts:
        name, _, rng = part.partition("=")
        name = name.strip()
        if not rng:
            raise ValidationError(f"bad grid axis {part!r}; use name=start:stop:step")
        pieces = rng.split(":")
        if len(pieces) == 1:
            vals = [float(pieces[0])]
        elif len(pieces) == 3:
            a, b, c = (float(v) for v in pieces)
            if c <= 0 or b < a:
                raise ValidationError(
                    f"bad grid range {rng!r}; need start <= stop and step > 0"
                )
            count = int(math.floor((b - a) / c + 1e-9)) + 1
            vals = [a + i * c for i in range(count)]
        else:
            raise ValidationError(
                f"bad grid axis {part!r}; use name=start:stop:step or name=value"
            )
        axes[name] = vals
        order.append(name)
    if order[0] != "p" or order[1] != second:
        raise ValidationError(
            f"grid axes for plane {plane} must be 'p' then {second!r}, got {order}"
        )
    return axes["p"], axes[second]


def _cmd_sweep(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    x_values, y_values = _parse_grid_spec(args.grid, args.plane)
    threads = _resolve_threads(args)
    workers = max(1, min(threads, len(x_values)))
    if workers == 1:
        rows = sweep(args.plane, x_values, y_values, par)
    else:
        # fan out whole grid columns; map preserves submission order so the
        # CSV is byte-identical for every thread count
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = pool.map(
                lambda xv: sweep(args.plane, [xv], y_values, par), x_values
            )
            rows = [row for chunk in chunks for row in chunk]
    header = ("x", "y", "ybar0", "ybar1", "ybarKm1", "ybarK", "entropy",
              "converged")
    _write_csv(args.out, header, ([row[h] for h in header] for row in rows))
    failed = sum(1 for row in rows if row["converged"] == 0)
    _manifest(
        args.out, "sweep", _params_to_config(par), None, [args.out], started,
        details={"plane": args.plane, "grid": args.grid, "threads": threads,
                 "nodes": len(rows), "failed_nodes": failed},
    )
    return 0


_SUITE_DEFAULTS = {
    "flln": {"n_list": "200,2000", "horizon": 20.0, "reps": 20},
    "fclt": {"n": 2000, "reps": 2000, "t_check": 5.0},
    "interchange": {"n": 500, "burn_in": 1000.0, "horizon": 5000.0,
                    "tol": 0.02},
    "forward": {"n": 100, "f_spec": "coord@0", "t": 1.0, "reps": 400,
                "delta": 0.25},
}


def _cmd_verify(args) -> int:
    started = time.perf_counter()
    par = _load_params(args.config)
    opt = dict(_SUITE_DEFAULTS[args.suite])
    for key in opt:
        given = getattr(args, key, None)
        if given is not None:
            opt[key] = given

    if args.suite == "flln":
        n_list = [int(v) for v in str(opt["n_list"]).split(",") if v.strip()]
        report = flln_experiment(
            par, n_list, opt["horizon"], int(opt["reps"]), args.seed
        )
    elif args.suite == "fclt":
        report = fclt_experiment(
            par, int(opt["n"]), int(opt["reps"]), opt["t_check"], args.seed
        )
    elif args.suite == "interchange":
        report = interchange_experiment(
            par, int(opt["n"]), opt["burn_in"], opt["horizon"], args.seed,
            tol=opt["tol"],
        )
    else:
        report = forward_equation_residual(
            par, int(opt["n"]), opt["f_spec"], opt["t"], int(opt["reps"]),
            args.seed, delta=opt["delta"],
        )

    _write_json(args.out, report.to_dict())
    _manifest(
        args.out, "verify", _params_to_config(par), args.seed, [args.out],
        started, details={"suite": args.suite, **{k: opt[k] for k in sorted(opt)}},
    )
    print(f"{args.suite}: {report.status}")
    return 2 if report.passed is False else 0


def _cmd_fit_arrivals(args) -> int:
    started = time.perf_counter()
    series = load_rate_series(args.csv)
    model, r2 = fit_fourier(series, args.order, period=args.period)
    _write_json(
        args.out,
        {
            "model": {
                "intercept": float(model.intercept),
                "sin": [float(v) for v in model.sin_coeffs],
                "cos": [float(v) for v in model.cos_coeffs],
                "period": float(model.period),
            },
            "r_squared": float(r2),
        },
    )
    _manifest(
        args.out, "fit-arrivals",
        {"csv": args.csv, "order": args.order, "period": args.period},
        None, [args.out], started,
        details={"samples": len(series.times), "r_squared": float(r2)},
    )
    return 0


def _cmd_gbfs_hist(args) -> int:
    started = time.perf_counter()
    with open(args.status, "r", encoding="utf-8") as fh:
        status_doc = json.load(fh)
    with open(args.info, "r", encoding="utf-8") as fh:
        info_doc = json.load(fh)
    snap = parse_gbfs(status_doc, info_doc)
    counts, ratios = snapshot_histograms(snap, args.k_max)
    rows = [("count", n, v) for n, v in enumerate(counts)]
    rows += [("ratio", b, v) for b, v in enumerate(ratios)]
    _write_csv(args.out, ("observable", "index", "value"), rows)
    _manifest(
        args.out, "gbfs-hist",
        {"status": args.status, "info": args.info, "k_max": args.k_max},
        None, [args.out], started,
        details={"stations": len(snap), "dropped": snap.dropped,
                 "clamped": snap.clamped},
    )
    return 0


# ---------------------------------------------------------------- parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="bss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("simulate", _cmd_simulate,
            "event-level CTMC run from a round-robin start")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--horizon", type=float, required=True, help="hours")
    p.add_argument("--sample-dt", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")

    p = add("meanfield", _cmd_meanfield, "integrate the mean-field ODE")
    p.add_argument("--config", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--sample-dt", type=float, default=1.0)
    p.add_argument("--y0", default="builtin:uniform",
                   help="builtin:uniform, builtin:mass@n, or a CSV path")
    p.add_argument("--step", type=float, default=0.005, help="RK4 step, hours")
    p.add_argument("--out", required=True)

    p = add("diffusion", _cmd_diffusion,
            "integrate the fluctuation covariance along the mean-field path")
    p.add_argument("--config", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--sample-dt", type=float, default=1.0)
    p.add_argument("--y0", default="builtin:uniform")
    p.add_argument("--step", type=float, default=0.005)
    p.add_argument("--out", required=True)

    p = add("equilibrium", _cmd_equilibrium, "solve the mean-field fixed point")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("sweep", _cmd_sweep, "equilibrium surface over a parameter grid")
    p.add_argument("--plane", required=True,
                   choices=("p-theta", "p-c", "p-alpha", "p-gamma"))
    p.add_argument("--grid", required=True,
                   help="e.g. 'p=0:1:0.05,theta=0:2:0.1' (endpoints inclusive)")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap for grid fan-out (default: BSS_THREADS or cores)")
    p.add_argument("--out", required=True)

    p = add("verify", _cmd_verify, "run one verification experiment")
    p.add_argument("--suite", required=True,
                   choices=("flln", "fclt", "interchange", "forward"))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--n", type=int, default=None, help="station count")
    p.add_argument("--n-list", dest="n_list", default=None,
                   help="flln sizes, e.g. 200,2000")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--t-check", dest="t_check", type=float, default=None)
    p.add_argument("--burn-in", dest="burn_in", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--f-spec", dest="f_spec", default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)

    p = add("fit-arrivals", _cmd_fit_arrivals,
            "least-squares Fourier fit of an arrival-rate series")
    p.add_argument("--csv", required=True, help="CSV with header t_hours,rate")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--period", type=float, default=24.0)
    p.add_argument("--out", required=True, help="JSON path")

    p = add("gbfs-hist", _cmd_gbfs_hist,
            "bike-count and fill-ratio histograms from a GBFS snapshot")
    p.add_argument("--status", required=True, help="station_status JSON")
    p.add_argument("--info", required=True, help="station_information JSON")
    p.add_argument("--k-max", dest="k_max", type=int, default=20)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
