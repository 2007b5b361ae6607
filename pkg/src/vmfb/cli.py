"""Command line entry point: ``vmfb {gen,solve,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    ExperimentConfig,
    emit_signal_overlay,
    make_metric,
    read_results_csv,
    report_table,
    run_experiment,
    run_single,
    write_trace_csv,
)
from .problems import RNG_ID, LassoInstance, build_lasso, generate_lasso_instance
from .solver import Schedules, validate_schedules

log = logging.getLogger("vmfb")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_instance_args(p):
    p.add_argument("--m", type=int, default=240, help="number of measurements (default 240)")
    p.add_argument("--n", type=int, default=1024, help="signal length (default 1024)")
    p.add_argument("--k", type=int, default=40, help="nonzeros in the planted signal (default 40)")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    p.add_argument("--t", type=float, default=None,
                   help="L1 radius (default: L1 norm of the planted signal)")
    p.add_argument("--instance", type=Path, default=None,
                   help="load the instance from a JSON file written by 'gen'")


def _add_run_args(p):
    p.add_argument("--metric", default="identity",
                   help="identity, scaled:<c> or diagonal-ramp (default identity)")
    p.add_argument("--mode", choices=("Thm31", "Thm32"), default="Thm31",
                   help="condition set for the validity report (default Thm31)")
    p.add_argument("--permissive", action="store_true",
                   help="run inadmissible parameters instead of stopping with ParameterViolation")
    p.add_argument("--max-iter", type=int, default=200_000, help="iteration cap (default 200000)")
    p.add_argument("--norm-tol", type=float, default=1e-6,
                   help="relative accuracy of the ||A|| estimate (default 1e-6)")


def _load_instance(args):
    if args.instance is not None:
        return LassoInstance.load(args.instance)
    return generate_lasso_instance(args.m, args.n, args.k, args.seed, t=args.t)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vmfb", description="Relaxed variable metric forward-backward LASSO benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a LASSO instance and write it as JSON")
    _add_instance_args(p)
    p.add_argument("-o", "--out", type=Path, required=True)

    p = sub.add_parser("solve", help="one run at a single (gamma, lambda, epsilon)")
    _add_instance_args(p)
    _add_run_args(p)
    p.add_argument("--gamma-mult", type=float, default=1.9, help="gamma as a multiple of 1/L")
    p.add_argument("--lam", type=float, default=1.05, help="relaxation parameter")
    p.add_argument("--eps", type=float, default=1e-6, help="relative-change tolerance")
    p.add_argument("--trace", type=Path, help="write the k,obj,residual,rel_change trace CSV")
    p.add_argument("--overlay", type=Path, help="write the index,true,recovered CSV")
    p.add_argument("--json", action="store_true", help="print the result row as JSON")

    p = sub.add_parser("sweep", help="run a (gamma, lambda, epsilon) grid")
    _add_instance_args(p)
    _add_run_args(p)
    p.add_argument("--gammas", type=_floats, default=ExperimentConfig.gamma_grid,
                   help="comma-separated multiples of 1/L (default 0.5,1,1.9)")
    p.add_argument("--lambdas", type=_floats, default=ExperimentConfig.lambda_grid,
                   help="comma-separated relaxation parameters")
    p.add_argument("--eps", type=_floats, default=ExperimentConfig.epsilons,
                   help="comma-separated tolerances (default 1e-6,1e-8)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--trace-every", type=int, default=1,
                   help="keep every n-th trace row (default 1)")
    p.add_argument("--no-timing", action="store_true",
                   help="write wall_ms as NA so results.csv is byte-stable")
    p.add_argument("-o", "--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("report", help="print a results.csv as a table, sorted")
    p.add_argument("results", type=Path)
    p.add_argument("--csv", action="store_true", help="print sorted CSV instead of the table")
    p.add_argument("--no-timing", action="store_true")
    return parser


def cmd_gen(args):
    inst = _load_instance(args)
    inst.save(args.out)
    m, n = inst.shape
    print(f"wrote {args.out}: m={m} n={n} k={inst.sparsity} seed={inst.seed} t={inst.t!r}")
    return 0


def cmd_solve(args):
    inst = _load_instance(args)
    P, B, beta = build_lasso(inst, norm_tol=args.norm_tol)
    U = make_metric(args.metric, inst.shape[1])
    row, trace = run_single(inst, args.gamma_mult, args.lam, args.eps, metric=U,
                            permissive=args.permissive, max_iter=args.max_iter, P=P, B=B)
    report = validate_schedules(Schedules.constant(args.gamma_mult * beta / U.norm, args.lam, U),
                                beta, horizon=min(args.max_iter, 1000), mode=args.mode,
                                dim=inst.shape[1])
    if args.trace:
        write_trace_csv(trace, args.trace)
    if args.overlay:
        emit_signal_overlay(inst.x_true, trace.x, args.overlay)
    if args.json:
        print(json.dumps({
            "schema": 1, "version": __version__, "rng": RNG_ID, "err_norm": "l2",
            "beta": beta, "row": {"gamma_mult": row.gamma_mult, "lambda": row.lam,
                                  "epsilon": row.epsilon, "iter": row.iter, "err": row.err,
                                  "obj": row.obj, "wall_ms": row.wall_ms,
                                  "status": row.status},
            "message": trace.message, "validity": report.to_dict(),
        }, indent=2))
    else:
        text, _ = report_table([row])
        sys.stdout.write(text)
        if trace.message:
            print(trace.message)
        if not report.passed:
            print("validity report: failed checks " + ", ".join(report.failed()))
    return 0


def cmd_sweep(args):
    cfg = ExperimentConfig(
        m=args.m, n=args.n, k=args.k, seed=args.seed, t=args.t,
        gamma_grid=args.gammas, lambda_grid=args.lambdas, epsilons=args.eps,
        metric=args.metric, mode=args.mode, permissive=args.permissive,
        max_iter=args.max_iter, norm_tol=args.norm_tol, trace_every=args.trace_every,
        jobs=args.jobs)
    inst = LassoInstance.load(args.instance) if args.instance else None
    rows, _ = run_experiment(cfg, out_dir=args.out, instance=inst)
    text, csv_text = report_table(rows, timing=not args.no_timing)
    (args.out / "results.csv").write_text(csv_text)
    (args.out / "results.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(args):
    rows = read_results_csv(args.results)
    timing = not args.no_timing and not all(np.isnan(r.wall_ms) for r in rows)
    text, csv_text = report_table(rows, timing=timing)
    sys.stdout.write(csv_text if args.csv else text)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"gen": cmd_gen, "solve": cmd_solve, "sweep": cmd_sweep, "report": cmd_report}
    try:
        return handler[args.command](args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"vmfb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
