"""LASSO benchmark sweeps: (gamma, lambda, epsilon) grids, result tables, traces.

Step sizes are given as multiples of ``1/L`` with ``L = 1/beta`` the certified
Lipschitz constant of the least-squares gradient; under a metric ``U`` the
step is ``gamma = mult * beta / ||U||`` so the admissible range stays
``mult in (0, 2)`` and ``lambda in (0, (4 - mult)/2]``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .linops import Diagonal, ScaledIdentity
from .problems import RNG_ID, LassoInstance, build_lasso, generate_lasso_instance
from .solver import BOUNDARY_RTOL, Schedules, StoppingRule, solve, validate_schedules

__all__ = [
    "RESULT_COLUMNS",
    "TRACE_COLUMNS",
    "META_SCHEMA",
    "ExperimentConfig",
    "ResultRow",
    "make_metric",
    "run_single",
    "run_experiment",
    "report_table",
    "read_results_csv",
    "write_trace_csv",
    "emit_signal_overlay",
]

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["gamma_mult", "lambda", "epsilon", "iter", "err", "obj", "wall_ms", "status"]
TRACE_COLUMNS = ["k", "obj", "residual", "rel_change"]
META_SCHEMA = 1


@dataclass(frozen=True)
class ExperimentConfig:
    m: int = 240
    n: int = 1024
    k: int = 40
    seed: int = 0
    t: float | None = None
    gamma_grid: tuple = (0.5, 1.0, 1.9)
    lambda_grid: tuple = (0.2, 0.4, 0.6, 0.8, 1.0, 1.05, 1.2, 1.5, 1.75)
    epsilons: tuple = (1e-6, 1e-8)
    metric: str = "identity"
    mode: str = "Thm31"
    permissive: bool = False
    max_iter: int = 200_000
    norm_tol: float = 1e-6
    trace_every: int = 1
    jobs: int = 1

    def __post_init__(self):
        for name in ("gamma_grid", "lambda_grid", "epsilons"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.mode not in ("Thm31", "Thm32"):
            raise ValueError(f"mode must be Thm31 or Thm32, got {self.mode!r}")
        if any(g <= 0 for g in self.gamma_grid) or any(e <= 0 for e in self.epsilons):
            raise ValueError("gamma multiples and epsilons must be positive")
        make_metric(self.metric, 1)  # validates the metric name

    def cells(self):
        """Grid cells in report order: gamma ascending, then lambda, then epsilon."""
        return [(g, lam, eps)
                for g in sorted(set(self.gamma_grid))
                for lam in sorted(set(self.lambda_grid))
                for eps in sorted(set(self.epsilons))]

    def inadmissible_pairs(self):
        return [(g, lam) for g in sorted(set(self.gamma_grid))
                for lam in sorted(set(self.lambda_grid))
                if not (g < 2.0 and 0 < lam <= (4.0 - g) / 2.0 * (1 + BOUNDARY_RTOL))]


@dataclass(frozen=True)
class ResultRow:
    gamma_mult: float
    lam: float
    epsilon: float
    iter: int
    err: float
    obj: float
    wall_ms: float
    status: str

    def sort_key(self):
        return (self.gamma_mult, self.lam, self.epsilon)


def make_metric(spec, n):
    """Metric from a CLI string: ``identity``, ``scaled:<c>`` or ``diagonal-ramp``.

    ``diagonal-ramp`` is ``diag(linspace(0.5, 1, n))``.
    """
    if spec == "identity":
        return ScaledIdentity(1.0)
    if spec.startswith("scaled:"):
        return ScaledIdentity(float(spec.split(":", 1)[1]))
    if spec == "diagonal-ramp":
        return Diagonal(np.linspace(0.5, 1.0, n)) if n > 1 else Diagonal([1.0])
    raise ValueError(f"unknown metric spec {spec!r}")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _tag(g, lam, eps):
    return f"g{g:g}_l{lam:g}_e{eps:g}"


def run_single(inst: LassoInstance, gamma_mult, lam, epsilon, *, metric="identity",
               permissive=False, max_iter=200_000, norm_tol=1e-6, P=None, B=None):
    """One LASSO run from ``x0 = 0``; returns ``(ResultRow, RunTrace)``."""
    if P is None or B is None:
        P, B, _ = build_lasso(inst, norm_tol=norm_tol)
    U = make_metric(metric, inst.shape[1]) if isinstance(metric, str) else metric
    gamma = gamma_mult * B.beta / U.norm
    S = Schedules.constant(gamma, lam, U)
    stop = StoppingRule(epsilon=epsilon, max_iter=max_iter)
    t0 = time.perf_counter()
    trace = solve(P, B, S, stop, np.zeros(inst.shape[1]), strict=not permissive,
                  store_iterates=False)
    wall_ms = (time.perf_counter() - t0) * 1e3
    x = trace.x
    row = ResultRow(
        gamma_mult=float(gamma_mult),
        lam=float(lam),
        epsilon=float(epsilon),
        iter=trace.iterations,
        err=float(np.linalg.norm(x - inst.x_true)),
        obj=inst.objective(x),
        wall_ms=wall_ms,
        status=trace.status.value,
    )
    return row, trace


def _run_cell(payload):
    inst_dict, g, lam, eps, cfg_dict = payload
    inst = LassoInstance.from_dict(inst_dict)
    row, trace = run_single(inst, g, lam, eps, metric=cfg_dict["metric"],
                            permissive=cfg_dict["permissive"], max_iter=cfg_dict["max_iter"],
                            norm_tol=cfg_dict["norm_tol"])
    return row, trace


def run_experiment(cfg: ExperimentConfig, out_dir=None, instance: LassoInstance | None = None):
    """Run every grid cell of `cfg` on one instance.

    Rows come back in the declared order regardless of how cells were
    scheduled.  A failing cell is recorded with its status (or
    ``Error: ...``) and never aborts the sweep.  With `out_dir`, writes
    ``results.csv``, ``results.txt``, ``metadata.json`` and per-cell
    ``traces/trace_<tag>.csv`` and ``traces/overlay_<tag>.csv``.

    Returns
    -------
    rows : list of ResultRow
    traces : dict mapping ``(gamma_mult, lambda, epsilon)`` to RunTrace
    """
    inst = instance if instance is not None else generate_lasso_instance(
        cfg.m, cfg.n, cfg.k, cfg.seed, t=cfg.t)
    P, B, beta = build_lasso(inst, norm_tol=cfg.norm_tol)
    cells = cfg.cells()
    for g, lam in cfg.inadmissible_pairs():
        log.info("pair gamma=%g/L lambda=%g is outside the admissible range", g, lam)

    results = {}
    if cfg.jobs > 1:
        cfg_dict = asdict(cfg)
        inst_dict = inst.to_dict()
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {cell: pool.submit(_run_cell, (inst_dict, *cell, cfg_dict)) for cell in cells}
            for cell, fut in futures.items():
                try:
                    results[cell] = fut.result()
                except Exception as exc:  # recorded, sweep continues
                    results[cell] = (_error_row(cell, exc), None)
    else:
        for cell in cells:
            try:
                results[cell] = run_single(inst, *cell, metric=cfg.metric,
                                           permissive=cfg.permissive, max_iter=cfg.max_iter,
                                           norm_tol=cfg.norm_tol, P=P, B=B)
            except Exception as exc:
                log.exception("cell %s failed", cell)
                results[cell] = (_error_row(cell, exc), None)

    rows = [results[cell][0] for cell in cells]
    traces = {cell: results[cell][1] for cell in cells}

    if out_dir is not None:
        out = Path(out_dir)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        text, csv_text = report_table(rows)
        (out / "results.csv").write_text(csv_text)
        (out / "results.txt").write_text(text)
        for cell, trace in traces.items():
            if trace is None:
                continue
            write_trace_csv(trace, out / "traces" / f"trace_{_tag(*cell)}.csv",
                            every=cfg.trace_every)
            emit_signal_overlay(inst.x_true, trace.x, out / "traces" / f"overlay_{_tag(*cell)}.csv")
        meta = _metadata(cfg, inst, beta, rows)
        (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return rows, traces


def _error_row(cell, exc):
    g, lam, eps = cell
    return ResultRow(g, lam, eps, 0, float("nan"), float("nan"), 0.0,
                     f"Error: {type(exc).__name__}")


def _metadata(cfg, inst, beta, rows):
    U = make_metric(cfg.metric, inst.shape[1])
    validity = {}
    for g in sorted(set(cfg.gamma_grid)):
        for lam in sorted(set(cfg.lambda_grid)):
            S = Schedules.constant(g * beta / U.norm, lam, U)
            rep = validate_schedules(S, beta, horizon=min(cfg.max_iter, 1000), mode=cfg.mode,
                                     dim=inst.shape[1])
            validity[f"{g:g}/{lam:g}"] = rep.to_dict()
    m, n = inst.shape
    return {
        "schema": META_SCHEMA,
        "version": __version__,
        "config": asdict(cfg),
        "instance": {"m": m, "n": n, "k": inst.sparsity, "seed": inst.seed, "t": inst.t,
                     "rng": inst.rng},
        "rng": RNG_ID,
        "beta": beta,
        "lipschitz": 1.0 / beta,
        "err_norm": "l2",
        "obj": "0.5*||Ax-b||_2^2",
        "validity": validity,
        "rows": len(rows),
        "statuses": sorted({r.status for r in rows}),
    }


def report_table(rows, timing=True):
    """Format rows as a fixed-width text table and a CSV string.

    Ordering is gamma ascending, then lambda, then epsilon.  Floats are
    written with ``repr`` so the CSV round-trips exactly; with
    ``timing=False`` the ``wall_ms`` column is written as ``NA``, which
    makes the CSV byte-identical across repeated runs.
    """
    rows = sorted(rows, key=ResultRow.sort_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.gamma_mult), _fmt(r.lam), _fmt(r.epsilon), r.iter, _fmt(r.err),
                    _fmt(r.obj), _fmt(round(r.wall_ms, 3)) if timing else "NA", r.status])

    header = f"{'gamma':>8} {'lambda':>7} {'eps':>8} {'Iter':>8} {'Err':>11} {'Obj':>11} " \
             f"{'ms':>9}  status"
    lines = [header, "-" * len(header)]
    for r in rows:
        ms = f"{r.wall_ms:9.1f}" if timing else f"{'NA':>9}"
        lines.append(f"{r.gamma_mult:>6g}/L {r.lam:>7g} {r.epsilon:>8.0e} {r.iter:>8d} "
                     f"{r.err:>11.4e} {r.obj:>11.4e} {ms}  {r.status}")
    return "\n".join(lines) + "\n", buf.getvalue()


def read_results_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            wall = rec["wall_ms"]
            rows.append(ResultRow(
                gamma_mult=float(rec["gamma_mult"]), lam=float(rec["lambda"]),
                epsilon=float(rec["epsilon"]), iter=int(rec["iter"]), err=float(rec["err"]),
                obj=float(rec["obj"]), wall_ms=float(wall) if wall != "NA" else float("nan"),
                status=rec["status"]))
    return rows


def write_trace_csv(trace, path, every=1):
    """Iteration-vs-objective trace (``k, obj, residual, rel_change``); the last row is always kept."""
    idx = np.arange(0, len(trace.k), max(int(every), 1))
    if idx[-1] != len(trace.k) - 1:
        idx = np.append(idx, len(trace.k) - 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for j in idx:
            w.writerow([int(trace.k[j]), repr(float(trace.obj[j])), repr(float(trace.residual[j])),
                        repr(float(trace.rel_change[j]))])


def emit_signal_overlay(x_true, x_hat, path):
    """Write ``index, true, recovered`` columns for a true-vs-recovered signal plot."""
    x_true = np.asarray(x_true, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x_true.shape != x_hat.shape:
        raise ValueError("x_true and x_hat must have the same shape")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "true", "recovered"])
        for i, (a, b) in enumerate(zip(x_true, x_hat)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    return Path(path)
