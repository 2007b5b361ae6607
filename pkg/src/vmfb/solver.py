"""Relaxed, inexact, variable metric forward-backward iteration.

Each step computes

    y_k     = x_k - gamma_k U_k (B x_k + b_k)
    x_{k+1} = x_k + lambda_k (J_{gamma_k U_k A}(y_k) + a_k - x_k)

with ``0 < gamma_k < 2 beta / ||U_k||`` and over-relaxation allowed up to
``lambda_k < 1/alpha_k = (4 beta - gamma_k ||U_k||) / (2 beta)``.  With
``A = ∂g`` and ``B = grad f`` this is the proximal gradient method in the
``U_k^{-1}`` geometry; with ``U_k = I`` it is plain relaxed forward-backward
with variable steps.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .linops import Metric, ScaledIdentity, as_vector, loewner_min_eig, metric_inv_norm
from .operators import Cocoercive, ParameterError, Proximable, _step_ratio

__all__ = [
    "Status",
    "StopMode",
    "StoppingRule",
    "Schedules",
    "ConditionCheck",
    "ValidityReport",
    "RunTrace",
    "constant",
    "ramp",
    "from_list",
    "decaying_noise",
    "relaxation_upper_bound",
    "validate_schedules",
    "fb_step",
    "solve",
    "stopping_check",
]

log = logging.getLogger(__name__)

SNAPSHOT_MAX_DIM = 256
# lambda_k = 1/alpha_k is admitted (e.g. gamma = 1.9/L with lambda = 1.05)
BOUNDARY_RTOL = 1e-9
# Iterates are flushed below this magnitude: with small relaxations the
# off-support entries decay geometrically into subnormal floats, which slows
# BLAS matrix-vector products by an order of magnitude.
_TINY = np.finfo(float).tiny


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIterReached"
    PARAMETER_VIOLATION = "ParameterViolation"
    BLOW_UP = "NumericalBlowUp"


class StopMode(str, enum.Enum):
    RELATIVE_CHANGE = "RelativeChange"
    FIXED_POINT_RESIDUAL = "FixedPointResidual"


@dataclass(frozen=True)
class StoppingRule:
    epsilon: float = 1e-6
    max_iter: int = 200_000
    mode: StopMode = StopMode.RELATIVE_CHANGE

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        object.__setattr__(self, "mode", StopMode(self.mode))


def stopping_check(rule: StoppingRule, x_prev, x_next, residual=math.nan) -> bool:
    """Return True when `rule` says to stop.

    ``RelativeChange`` compares ``||x_next - x_prev|| / ||x_prev||`` with
    epsilon; when ``x_prev = 0`` the absolute change is compared instead.
    """
    if rule.mode is StopMode.FIXED_POINT_RESIDUAL:
        return residual <= rule.epsilon
    return _relative_change(np.asarray(x_prev, float), np.asarray(x_next, float)) <= rule.epsilon


def _norm(v):
    return math.sqrt(float(v @ v))


def _relative_change(x_prev, x_next):
    step = _norm(x_next - x_prev)
    base = _norm(x_prev)
    return step / base if base > 0 else step


# ---------------------------------------------------------------------------
# parameter streams
# ---------------------------------------------------------------------------

class _Constant:
    def __init__(self, value):
        self.value = value

    def __call__(self, k):
        return self.value

    def __repr__(self):
        return f"constant({self.value!r})"


class _Ramp:
    def __init__(self, start, step, lo, hi):
        self.start, self.step, self.lo, self.hi = start, step, lo, hi

    def __call__(self, k):
        return min(max(self.start + self.step * k, self.lo), self.hi)

    def __repr__(self):
        return f"ramp({self.start!r}, {self.step!r})"


class _FromList:
    def __init__(self, values):
        self.values = list(values)
        if not self.values:
            raise ValueError("empty schedule")

    def __call__(self, k):
        return self.values[k]

    def __len__(self):
        return len(self.values)


class _DecayingNoise:
    def __init__(self, dim, c, seed, power):
        self.dim, self.c, self.seed, self.power = dim, c, seed, power

    def __call__(self, k):
        v = np.random.default_rng([self.seed, k]).standard_normal(self.dim)
        return (self.c / (k + 1) ** self.power) * v / np.linalg.norm(v)


def constant(value):
    """Stream returning `value` at every index."""
    return _Constant(value)


def ramp(start, step, lo=-math.inf, hi=math.inf):
    """Arithmetic stream ``start + step*k``, clipped to ``[lo, hi]``."""
    return _Ramp(float(start), float(step), lo, hi)


def from_list(values):
    """Finite stream; indexing past the end raises IndexError."""
    return _FromList(values)


def decaying_noise(dim, c=0.1, seed=0, power=2.0):
    """Error stream with ``||e_k|| = c / (k+1)^power`` and seeded random directions.

    Direction ``k`` depends only on ``(seed, k)``, so the stream is random
    access and reproducible.
    """
    return _DecayingNoise(int(dim), float(c), int(seed), float(power))


def _as_stream(obj):
    if obj is None or callable(obj) and not isinstance(obj, Metric):
        return obj
    if isinstance(obj, (list, tuple)):
        return from_list(obj)
    return constant(obj)


@dataclass(frozen=True)
class Schedules:
    """Per-iteration parameter streams.

    Each field is a callable ``k -> value``; plain numbers, metrics and
    vectors are wrapped as constants and lists as finite streams.  Error
    streams ``a_err``/``b_err`` default to zero (``None``).  ``eta_cap`` and
    ``error_cap`` bound the partial sums that must stay finite.
    """

    gamma: object
    lam: object
    metric: object = field(default_factory=lambda: constant(ScaledIdentity(1.0)))
    eta: object = field(default_factory=lambda: constant(0.0))
    a_err: object = None
    b_err: object = None
    eta_cap: float = math.inf
    error_cap: float = math.inf

    def __post_init__(self):
        for name in ("gamma", "lam", "metric", "eta", "a_err", "b_err"):
            object.__setattr__(self, name, _as_stream(getattr(self, name)))

    @classmethod
    def constant(cls, gamma, lam, metric=None, **kw):
        """Constant step, relaxation and metric (``U_k = I`` when `metric` is None)."""
        return cls(gamma=gamma, lam=lam,
                   metric=ScaledIdentity(1.0) if metric is None else metric, **kw)

    def length(self):
        """Shortest finite stream length, or None if all streams are unbounded."""
        lens = [len(s) for s in (self.gamma, self.lam, self.metric, self.eta,
                                 self.a_err, self.b_err) if hasattr(s, "__len__")]
        return min(lens) if lens else None

    def at(self, k):
        """``(U_k, gamma_k, lambda_k)``."""
        return self.metric(k), float(self.gamma(k)), float(self.lam(k))


def relaxation_upper_bound(beta, gamma, normU):
    """``1/alpha_k = (4 beta - gamma ||U||) / (2 beta)``, which lies in (1, 2)."""
    return 2.0 - _step_ratio(beta, gamma, normU)


def _inv_alpha(beta, gamma, normU):
    try:
        return relaxation_upper_bound(beta, gamma, normU)
    except ParameterError:
        return math.nan


# ---------------------------------------------------------------------------
# validity report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionCheck:
    name: str
    passed: bool
    heuristic: bool
    value: float
    detail: str = ""


@dataclass(frozen=True)
class ValidityReport:
    mode: str
    horizon: int
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "mode": self.mode,
            "horizon": self.horizon,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "heuristic": c.heuristic,
                 "value": c.value, "detail": c.detail}
                for c in self.checks
            ],
        }


def _quarters(seq):
    q = max(len(seq) // 4, 1)
    return np.min(seq[:q]), np.min(seq[-q:])


def _uniformly_positive(seq):
    """Heuristic for ``inf_k seq_k > 0``: positive, and the tail minimum is at
    least 3/4 of the head minimum.  A sequence decaying like ``k^-p`` has
    ratio about ``4^-p``, so anything decaying faster than ``k^-0.2`` fails."""
    seq = np.asarray(seq, dtype=float)
    if np.any(~(seq > 0)):
        return False, float(np.min(seq))
    head, tail = _quarters(seq)
    return bool(tail >= 0.75 * head), float(np.min(seq))


def _dyadic_blocks(terms):
    h = len(terms)
    if h < 4:
        return None
    return float(np.sum(terms[h // 4:h // 2])), float(np.sum(terms[h // 2:]))


def _looks_divergent(terms):
    """Heuristic for ``sum terms = +inf``: the last dyadic block sum is not shrinking."""
    terms = np.asarray(terms, dtype=float)
    blocks = _dyadic_blocks(terms)
    if blocks is None:
        return bool(np.sum(terms) > 0)
    prev, last = blocks
    return bool(last > 0 and last >= 0.9 * prev)


def _looks_summable(terms, cap=math.inf):
    """Heuristic for ``sum terms < +inf``: bounded by `cap` and the last dyadic
    block sum shrinking (or negligible)."""
    terms = np.asarray(terms, dtype=float)
    total = float(np.sum(terms))
    if not np.isfinite(total) or total > cap:
        return False, total
    blocks = _dyadic_blocks(terms)
    if blocks is None:
        return True, total
    prev, last = blocks
    return bool(last <= 0.75 * prev or last <= 1e-12 * (1.0 + total)), total


def validate_schedules(S: Schedules, beta, horizon, mode="Thm31", dim=None, n_probes=5, seed=0):
    """Check the convergence conditions on the first `horizon` entries of `S`.

    Pointwise conditions (step and relaxation ranges, metric ordering) are
    checked exactly over the horizon.  Conditions about infinite sums or
    uniform bounds cannot be decided from finitely many terms; they are
    reported with ``heuristic=True``:

    * a uniform positive lower bound passes if the minimum over the last
      quarter of the horizon is at least 3/4 of the minimum over the first;
    * a series is called divergent if its last dyadic block sum is at least
      0.9 times the previous one, and summable if it is at most 0.75 times
      the previous one (and the partial sum is below the declared cap).

    ``mode`` is ``"Thm31"`` (uniform relaxation gap) or ``"Thm32"``
    (divergent ``sum lambda_k (1/alpha_k - lambda_k)`` plus bounded
    variation of steps and metrics).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if mode not in ("Thm31", "Thm32"):
        raise ValueError(f"unknown mode {mode!r}")
    n_avail = S.length()
    h = horizon if n_avail is None else min(horizon, n_avail)

    metrics = [S.metric(k) for k in range(h)]
    gammas = np.array([float(S.gamma(k)) for k in range(h)])
    lams = np.array([float(S.lam(k)) for k in range(h)])
    etas = np.array([float(S.eta(k)) for k in range(h)])
    norms = np.array([U.norm for U in metrics])
    mins = np.array([U.min_eig for U in metrics])
    if dim is None:
        dims = [U.dim for U in metrics if U.dim is not None]
        dim = dims[0] if dims else 1
    ratio = gammas * norms / (2.0 * beta) if math.isfinite(beta) else np.zeros(h)
    inv_alpha = 2.0 - ratio
    mu = float(norms.max())

    checks = []

    def add(name, passed, value, heuristic=False, detail=""):
        checks.append(ConditionCheck(name, bool(passed), heuristic, float(value), detail))

    add("metric_bounds", mins.min() > 0 and np.isfinite(mu), mins.min(),
        detail=f"alpha={mins.min():.6g}, mu={mu:.6g}")

    gaps = [loewner_min_eig(metrics[k + 1], metrics[k], dim, scale=1.0 + etas[k])
            for k in range(h - 1)]
    worst = min(gaps) if gaps else 0.0
    add("metric_monotone", worst >= -1e-12 * max(mu, 1.0), worst,
        detail="min eig of (1+eta_k) U_{k+1} - U_k")

    ok, total = _looks_summable(etas, S.eta_cap)
    add("eta_summable", ok and np.all(etas >= 0), total, heuristic=True,
        detail="partial sum of eta_k over horizon")

    g_ok = np.all(gammas > 0) & np.all(ratio < 1.0)
    add("gamma_range", g_ok, float(np.max(ratio)),
        detail="max gamma_k ||U_k|| / (2 beta); must be < 1")

    add("lambda_range", np.all(lams > 0) and np.all(lams <= inv_alpha * (1.0 + BOUNDARY_RTOL)),
        float(np.min(inv_alpha - lams)), detail="min (1/alpha_k - lambda_k); must be >= 0")

    for label, stream in (("a", S.a_err), ("b", S.b_err)):
        if stream is None:
            terms = np.zeros(h)
        else:
            terms = lams * np.array([np.linalg.norm(stream(k)) for k in range(h)])
        ok, total = _looks_summable(terms, S.error_cap)
        add(f"errors_{label}_summable", ok, total, heuristic=True,
            detail=f"partial sum of lambda_k ||{label}_k||")

    step_ok, step_min = _uniformly_positive(gammas)
    upper_ok, upper_min = _uniformly_positive(2.0 * beta - gammas * mu
                                              if math.isfinite(beta) else np.ones(h))

    if mode == "Thm31":
        lo_ok, lam_min = _uniformly_positive(lams)
        gap_ok, gap_min = _uniformly_positive(inv_alpha - lams)
        add("lambda_uniform_gap", lo_ok and gap_ok, gap_min, heuristic=True,
            detail=f"lambda_min={lam_min:.6g}, min gap to 1/alpha_k={gap_min:.6g}")
        add("gamma_lower_bound", step_ok, step_min, heuristic=True)
        add("gamma_upper_uniform", upper_ok, upper_min, heuristic=True,
            detail="min (2 beta - gamma_k mu)")
    else:
        terms = lams * (inv_alpha - lams)
        add("relaxation_sum_divergent", _looks_divergent(terms), float(np.sum(terms)),
            heuristic=True, detail="partial sum of lambda_k (1/alpha_k - lambda_k)")
        add("gamma_lower_bound", step_ok, step_min, heuristic=True)
        add("gamma_upper_uniform", upper_ok, upper_min, heuristic=True,
            detail="min (2 beta - gamma_k mu)")
        ok, total = _looks_summable(np.abs(np.diff(gammas)))
        add("gamma_variation_summable", ok, total, heuristic=True)
        ok, total = _looks_summable(np.abs(np.diff(gammas * norms)))
        add("scaled_step_variation_summable", ok, total, heuristic=True)
        probes = np.random.default_rng(seed).standard_normal((n_probes, dim))
        worst_ok, worst_total = True, 0.0
        for p in probes:
            inv = [U.inv_apply(p) for U in metrics]
            terms = [np.linalg.norm(inv[k] - inv[k + 1]) for k in range(h - 1)]
            ok, total = _looks_summable(terms)
            worst_ok &= ok
            worst_total = max(worst_total, total)
        add("metric_inverse_variation_summable", worst_ok, worst_total, heuristic=True,
            detail=f"checked on {n_probes} probe vectors")

    return ValidityReport(mode=mode, horizon=h, checks=tuple(checks))


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------

def _check_params(beta, gamma, lam, U, bound=None):
    if bound is None or math.isnan(bound):
        try:
            bound = relaxation_upper_bound(beta, gamma, U.norm)
        except ParameterError as exc:
            return str(exc)
    if not 0 < lam <= bound * (1.0 + BOUNDARY_RTOL):
        return f"lambda={lam!r} is outside (0, 1/alpha] = (0, {bound!r}]"
    return None


def fb_step(P: Proximable, B: Cocoercive, U: Metric, gamma, lam, a, b, x, strict=False):
    """One relaxed step ``x + lam (J_{gamma U A}(x - gamma U (Bx + b)) + a - x)``.

    `a` and `b` may be None for exact evaluations.  With ``strict=True`` a
    :class:`ParameterError` is raised when ``gamma`` or ``lam`` is outside
    its admissible range for ``B.beta`` and ``||U||``.
    """
    if strict:
        msg = _check_params(B.beta, gamma, lam, U)
        if msg:
            raise ParameterError(msg)
    x = np.asarray(x, dtype=float)
    g = B(x)
    if b is not None:
        g = g + b
    Jy = P.resolvent(x - gamma * U.apply(g), gamma, U)
    if a is not None:
        Jy = Jy + a
    return x + lam * (Jy - x)


@dataclass(frozen=True)
class RunTrace:
    """Per-iteration diagnostics of a :func:`solve` run.

    Row ``j`` describes iterate ``x_j`` (row 0 is the starting point):
    its fixed-point residual under ``(gamma_j, U_j)``, the relative change
    from ``x_{j-1}`` (NaN on row 0), the objective, the ``U_j^{-1}``-distance
    to the reference point (NaN without one), and the parameters of step j.
    """

    k: np.ndarray
    residual: np.ndarray
    rel_change: np.ndarray
    obj: np.ndarray
    dist: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    inv_alpha: np.ndarray
    x: np.ndarray
    status: Status
    message: str = ""
    iterates: np.ndarray | None = None

    @property
    def iterations(self):
        return len(self.k) - 1

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def final_residual(self):
        return float(self.residual[-1])

    def fingerprint(self):
        """Bytes covering every deterministic field; equal for identical runs."""
        parts = [self.k, self.residual, self.rel_change, self.obj, self.dist,
                 self.gamma, self.lam, self.inv_alpha, self.x]
        if self.iterates is not None:
            parts.append(self.iterates)
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts) + \
            self.status.value.encode()


def _param_index(n_avail, k):
    return k if n_avail is None or k < n_avail else n_avail - 1


def solve(P: Proximable, B: Cocoercive, S: Schedules, stop: StoppingRule, x0, *,
          reference=None, objective=None, strict=True, store_iterates=None):
    """Run the relaxed variable metric forward-backward iteration.

    Parameters
    ----------
    P, B : Proximable, Cocoercive
        The two operators of ``0 in Ax + Bx``.
    S : Schedules
        Step sizes, relaxations, metrics, and optional error streams.
    stop : StoppingRule
        Tolerance, iteration cap and criterion.
    x0 : array_like
        Starting point.
    reference : array_like, optional
        A known solution; ``||x_k - x*||_{U_k^{-1}}`` is then recorded.
    objective : callable, optional
        Recorded per iterate.  Defaults to ``B.value`` when available.
    strict : bool
        Stop with ``ParameterViolation`` as soon as ``gamma_k`` or
        ``lambda_k`` leaves its admissible range.  If False, violations are
        logged and the run continues.
    store_iterates : bool, optional
        Keep every iterate.  Defaults to True when ``n <= 256``.

    Returns
    -------
    RunTrace
    """
    x = as_vector(x0, "x0").copy()
    n = x.size
    n_avail = S.length()
    if n_avail is not None and n_avail < stop.max_iter:
        raise ValueError(f"schedules supply {n_avail} entries, need {stop.max_iter}")
    if store_iterates is None:
        store_iterates = n <= SNAPSHOT_MAX_DIM
    if reference is not None:
        reference = as_vector(reference, "reference")
    if objective is None:
        def evaluate(z):
            try:
                return B.value_and_apply(z)
            except NotImplementedError:
                return math.nan, B(z)
    else:
        def evaluate(z):
            return float(objective(z)), B(z)

    cols = {name: [] for name in ("residual", "rel_change", "obj", "dist",
                                  "gamma", "lam", "inv_alpha")}
    snaps = []
    status = None
    message = ""
    rel = math.nan
    beta = B.beta
    fpr_mode = stop.mode is StopMode.FIXED_POINT_RESIDUAL
    warned = False

    k = 0
    while True:
        U, gamma, lam = S.at(_param_index(n_avail, k))
        inv_alpha = _inv_alpha(beta, gamma, U.norm)
        violation = _check_params(beta, gamma, lam, U, inv_alpha)

        Tx = None
        fx, Bx = evaluate(x)
        if gamma > 0:
            Tx = P.resolvent(x - gamma * U.apply(Bx), gamma, U)
            res = _norm(x - Tx)
        else:
            res = math.nan

        cols["residual"].append(res)
        cols["rel_change"].append(rel)
        cols["obj"].append(fx)
        cols["dist"].append(metric_inv_norm(U, x - reference) if reference is not None
                            else math.nan)
        cols["gamma"].append(gamma)
        cols["lam"].append(lam)
        cols["inv_alpha"].append(inv_alpha)
        if store_iterates:
            snaps.append(x.copy())

        if status is not None:
            break
        if fpr_mode and res <= stop.epsilon:
            status = Status.CONVERGED
            break
        if k >= stop.max_iter:
            status = Status.MAX_ITER
            break
        if violation:
            if strict:
                status = Status.PARAMETER_VIOLATION
                message = f"iteration {k}: {violation}"
                break
            if not warned:
                log.warning("iteration %d: %s (permissive mode, continuing)", k, violation)
                warned = True
        if Tx is None:
            status = Status.PARAMETER_VIOLATION
            message = f"iteration {k}: gamma={gamma!r} is not positive"
            break

        Jy = Tx
        if S.b_err is not None:
            Jy = P.resolvent(x - gamma * U.apply(Bx + S.b_err(k)), gamma, U)
        if S.a_err is not None:
            Jy = Jy + S.a_err(k)
        x_new = x + lam * (Jy - x)
        x_new[np.abs(x_new) < _TINY] = 0.0
        rel = _relative_change(x, x_new)
        if not math.isfinite(rel):
            status = Status.BLOW_UP
            message = f"iteration {k}: non-finite iterate"
            break
        x = x_new
        k += 1
        if not fpr_mode and rel <= stop.epsilon:
            # record the final iterate on the next pass, then stop
            status = Status.CONVERGED

    arr = {name: np.asarray(v, dtype=float) for name, v in cols.items()}
    return RunTrace(
        k=np.arange(len(arr["residual"])),
        x=x,
        status=status,
        message=message,
        iterates=np.array(snaps) if store_iterates else None,
        **arr,
    )
