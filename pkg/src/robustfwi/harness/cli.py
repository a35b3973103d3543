"""Command-line entry point: ``robustfwi run|compare|schedule|tailcheck``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .. import misfit
from ..sampling import ScheduleParams, schedule_table, write_schedule_csv
from .config import OUTPUT_DIR_ENV, ConfigError, load_config
from .experiment import CompareError, ExperimentError, compare, run


def _output_dir(default: str) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or default)


def cmd_run(args) -> int:
    cfg = load_config(args.config, env=os.environ)
    outdir = Path(args.output_dir) if args.output_dir else Path(cfg["output.dir"])
    result = run(cfg, outdir)
    s = result.manifest["summary"]
    print(
        f"{result.record.solver}: {s['iterations']} iterations, status {result.manifest['solver']['status']}, "
        f"model error {s['initial_model_error']:.4g} -> {s['final_model_error']:.4g}; "
        f"artifacts in {result.outdir}"
    )
    return 0


def cmd_compare(args) -> int:
    out = Path(args.output) if args.output else _output_dir(".") / "comparison.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table = compare(args.manifests, out)
    print(f"{len(table)} rows written to {out}")
    return 0


def cmd_schedule(args) -> int:
    params = ScheduleParams(
        m=args.m, rate=args.rate, iterations=args.iters, beta1=args.beta1, beta2=args.beta2, lipschitz=args.lipschitz
    )
    table = schedule_table(params)
    write_schedule_csv(args.output or sys.stdout, table)
    clamped = [name for name, s in table.items() if s.clamped.any()]
    if clamped:
        print(f"warning: sizes clamped to m for {', '.join(clamped)}", file=sys.stderr)
    return 0


def cmd_tailcheck(args) -> int:
    params = {}
    if args.density == "laplace":
        params["alpha"] = args.alpha
    elif args.density == "students-t":
        params["nu"] = args.nu
    d = misfit.density(args.density, **params)
    q = misfit.TailQuery.at(d, args.t0, args.t1, args.t2)
    rep = misfit.theorem1_bound_check(q, d)
    print(
        json.dumps(
            {
                "density": d.name,
                "t0": q.t0,
                "t1": q.t1,
                "t2": q.t2,
                "alpha0": q.alpha0,
                "lhs": rep.lhs,
                "rhs": rep.rhs,
                "satisfied": rep.satisfied,
                "log_concave": rep.log_concave,
            },
            indent=2,
        )
    )
    return 0


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustfwi", description="Robust waveform inversion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("config")
    r.add_argument("--output-dir", help=f"artifact directory (overrides the config and ${OUTPUT_DIR_ENV})")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="merge run traces into comparison.csv")
    c.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    c.add_argument("-o", "--output", help=f"output CSV (default: ${OUTPUT_DIR_ENV} or . / comparison.csv)")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("schedule", help="sample-size schedules for the three strategies")
    s.add_argument("m", type=int)
    s.add_argument("rate", type=float)
    s.add_argument("iters", type=int)
    s.add_argument("--beta1", type=float, default=1.0)
    s.add_argument("--beta2", type=float, default=1.0)
    s.add_argument("--lipschitz", type=float, default=1.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_schedule)

    t = sub.add_parser("tailcheck", help="conditional tail versus the log-concave bound")
    t.add_argument("density", choices=["gaussian", "laplace", "cauchy", "students-t"])
    t.add_argument("t0", type=float)
    t.add_argument("t1", type=float)
    t.add_argument("t2", type=float)
    t.add_argument("--alpha", type=float, default=1.0, help="Laplace rate")
    t.add_argument("--nu", type=float, default=1.0, help="Student's t degrees of freedom")
    t.set_defaults(func=cmd_tailcheck)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, CompareError, ValueError, OSError, misfit.QuadratureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
