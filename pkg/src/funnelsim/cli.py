"""Command-line interface: simulate / feasible / diagnose / sweep.

Usage:
    funnelsim simulate <config.toml>
    funnelsim feasible <config.toml>
    funnelsim diagnose <trace.csv> <config.toml>
    funnelsim sweep    <config.toml>

`simulate` writes <out>/<basename>.csv (fixed column schema) plus
<out>/<basename>.meta.json and exits 0 only if the run covered the full
horizon with all invariants holding.  `diagnose` re-runs the
configuration (integration is deterministic), verifies the stored trace
matches byte-for-byte, and evaluates the trajectory identities.
`sweep` expands the configured axes into a Cartesian product and runs
the cells in parallel.

Exit codes: 0 success; 1 I/O or configuration error; 2 step-size
underflow; 3 infeasible initial data; 4 diagnostics failure; 5 stored
trace does not match its configuration.

Environment: FUNNELSIM_OUT_DIR overrides [output].directory and
FUNNELSIM_WORKERS overrides [sweep].workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from .analysis import run_diagnostics
from .config import ExperimentConfig, config_from_dict, expand_sweep, parse_config
from .controller import initial_feasibility, render_feasibility
from .errors import InfeasibleStart, StepUnderflow, ValidationError
from .integrator import simulate
from .trace_io import csv_header, render_trace_csv, write_metadata

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNDERFLOW = 2
EXIT_INFEASIBLE = 3
EXIT_DIAG_FAIL = 4
EXIT_MISMATCH = 5


def _metadata(cfg: ExperimentConfig, sim) -> dict:
    return {
        "tool": {"name": "funnelsim", "version": __version__},
        "config": cfg.echo(),
        "system": {
            "name": cfg.system.name,
            "r": cfg.system.r,
            "n": cfg.system.n,
            "m": cfg.system.operator.m,
            "meta": cfg.system.meta,
        },
        "columns": csv_header(cfg.system.r, cfg.system.n),
        "feasibility": sim.feasibility.to_dict(),
        "stats": sim.stats.to_dict(),
        "invariants": sim.summary(),
        "controller": {
            "gain": cfg.params.gain,
            "theta_hat": [float(v) for v in cfg.params.theta_hat],
        },
    }


def cmd_simulate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ValidationError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=_sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"cannot read config: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    try:
        sim = simulate(cfg.system, cfg.params, cfg.funnel, cfg.reference, cfg.integrator)
    except InfeasibleStart as exc:
        print("infeasible initial data; refusing to simulate", file=_sys.stderr)
        print(render_feasibility(exc.report), file=_sys.stderr)
        return EXIT_INFEASIBLE
    except StepUnderflow as exc:
        print(f"integration failed: {exc}", file=_sys.stderr)
        return EXIT_UNDERFLOW

    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        csv_path = os.path.join(cfg.out_dir, cfg.basename + ".csv")
        meta_path = os.path.join(cfg.out_dir, cfg.basename + ".meta.json")
        with open(csv_path, "w", newline="") as fh:
            fh.write(render_trace_csv(sim))
        write_metadata(meta_path, _metadata(cfg, sim))
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=_sys.stderr)
        return EXIT_ERROR

    info = sim.summary()
    print(f"wrote {csv_path} ({info['samples']} samples) and {meta_path}")
    print(
        f"horizon [{cfg.system.t0:g}, {cfg.integrator.t_end:g}] covered; "
        f"max phi||e|| = {info['max_funnel_ratio']:.6f}, "
        f"max ||u|| = {info['max_u_norm']:.6g}, "
        f"steps accepted/rejected = {sim.stats.accepted}/"
        f"{sim.stats.rejected_error + sim.stats.rejected_domain}"
    )
    ok = info["max_funnel_ratio"] < 1.0 and all(v < 1.0 for v in info["max_theta_ratio"])
    return EXIT_OK if ok else EXIT_ERROR


def cmd_feasible(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ValidationError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=_sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"cannot read config: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    report = initial_feasibility(cfg.system, cfg.params, cfg.funnel, cfg.reference)
    print(render_feasibility(report))
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def cmd_diagnose(args) -> int:
    try:
        cfg = parse_config(args.config)
        with open(args.csv, "r") as fh:
            stored = fh.read()
    except ValidationError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=_sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"cannot read inputs: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    try:
        sim = simulate(cfg.system, cfg.params, cfg.funnel, cfg.reference, cfg.integrator)
    except (InfeasibleStart, StepUnderflow) as exc:
        print(f"cannot reproduce run: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    if render_trace_csv(sim) != stored:
        print(
            "stored trace does not match this configuration "
            "(same tool version and config reproduce traces bit-exactly)",
            file=_sys.stderr,
        )
        return EXIT_MISMATCH
    report = run_diagnostics(sim, cfg.system, cfg.params, cfg.funnel, cfg.reference)
    print(report.render())
    out_path = os.path.splitext(args.csv)[0] + ".diagnostics.json"
    try:
        with open(out_path, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"wrote {out_path}")
    except OSError as exc:
        print(f"cannot write diagnostics: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if report.passed else EXIT_DIAG_FAIL


def _sweep_cell(payload: dict) -> dict:
    row = {"overrides": payload["overrides"]}
    try:
        cfg = config_from_dict(payload["raw"])
        sim = simulate(cfg.system, cfg.params, cfg.funnel, cfg.reference, cfg.integrator)
        info = sim.summary()
        row.update(
            feasible=True,
            completed=True,
            status="ok",
            max_funnel_ratio=info["max_funnel_ratio"],
            max_u_norm=info["max_u_norm"],
        )
    except InfeasibleStart:
        row.update(feasible=False, completed=False, status="infeasible",
                   max_funnel_ratio=float("nan"), max_u_norm=float("nan"))
    except StepUnderflow as exc:
        row.update(feasible=True, completed=False, status=f"underflow:{exc.constraint}",
                   max_funnel_ratio=float("nan"), max_u_norm=float("nan"))
    except Exception as exc:  # cell failures are recorded, the sweep continues
        row.update(feasible=False, completed=False, status=f"error:{exc}",
                   max_funnel_ratio=float("nan"), max_u_norm=float("nan"))
    return row


def cmd_sweep(args) -> int:
    try:
        cfg = parse_config(args.config)
        cells = expand_sweep(cfg)
    except ValidationError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=_sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"cannot read config: {exc}", file=_sys.stderr)
        return EXIT_ERROR

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]

    keys = list(cfg.sweep_axes.keys())
    header = keys + ["feasible", "completed", "max_funnel_ratio", "max_u_norm", "status"]
    print("  ".join(f"{h:>22s}" for h in header))
    lines = [",".join(header)]
    for row in rows:
        cells_txt = [f"{row['overrides'][k]:g}" if isinstance(row["overrides"][k], (int, float))
                     else str(row["overrides"][k]) for k in keys]
        cells_txt += [
            str(row["feasible"]),
            str(row["completed"]),
            f"{row['max_funnel_ratio']:.6g}",
            f"{row['max_u_norm']:.6g}",
            row["status"],
        ]
        print("  ".join(f"{c:>22s}" for c in cells_txt))
        lines.append(",".join(cells_txt))

    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        out_path = os.path.join(cfg.out_dir, cfg.basename + "_sweep.csv")
        with open(out_path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {out_path}")
    except OSError as exc:
        print(f"cannot write sweep summary: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="funnelsim",
        description="Funnel-controller simulation, feasibility checks and diagnostics",
    )
    parser.add_argument("--version", action="version", version=f"funnelsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a configuration and write CSV + metadata")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("feasible", help="check the start conditions of a configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_feasible)

    p = sub.add_parser("diagnose", help="verify a stored trace and run trajectory diagnostics")
    p.add_argument("csv")
    p.add_argument("config")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="run the configured parameter sweep")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
