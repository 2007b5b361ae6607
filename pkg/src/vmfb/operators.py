"""Monotone and cocoercive operators for forward-backward splitting.

The set-valued side ``A`` of ``0 in Ax + Bx`` is represented by a
:class:`Proximable`: something whose metric resolvent

    J_{gamma U A}(x) = argmin_p  1/2 ||p - x||^2_{U^{-1}} + gamma g(p)

can be evaluated exactly.  The single-valued side ``B`` is a
:class:`Cocoercive` carrying a certified constant ``beta`` with

    <x - y, Bx - By> >= beta ||Bx - By||^2.

The remaining functions turn the averagedness calculus for the composed
map ``J_{gamma U A}(I - gamma U B)`` into numbers and predicates that tests
can check against sampled points.
"""

from __future__ import annotations

import math

import numpy as np

from .linops import (
    LinearMap,
    Metric,
    ScaledIdentity,
    as_vector,
    metric_inv_norm,
)

__all__ = [
    "ParameterError",
    "UnsupportedMetricError",
    "Proximable",
    "Zero",
    "L1Norm",
    "L1BallIndicator",
    "BoxIndicator",
    "HalfSpaceIndicator",
    "NormalCone",
    "Cocoercive",
    "ZeroMap",
    "LeastSquaresGradient",
    "SfpResidualGradient",
    "AffineMonotone",
    "project_l1_ball",
    "project_l1_ball_weighted",
    "resolvent",
    "cocoercive_apply",
    "forward_backward_map",
    "averaged_constant_forward",
    "averaged_constant_composed",
    "compose_averaged",
    "averaged_constant_bauschke",
    "averaged_constant_byrne",
    "averaged_violation",
    "check_averaged",
    "fixed_point_residual",
    "metric_perturbation_bound",
]

BISECTION_TOL = 1e-12
BISECTION_MAX_STEPS = 200


class ParameterError(ValueError):
    """A step size or relaxation parameter lies outside its admissible range."""


class UnsupportedMetricError(TypeError):
    """The metric resolvent of this operator has no exact evaluation for that metric."""


# ---------------------------------------------------------------------------
# L1-ball projections
# ---------------------------------------------------------------------------

def project_l1_ball(x, t):
    """Euclidean projection of `x` onto ``{p : ||p||_1 <= t}``.

    Sort-based: with ``u`` the magnitudes in decreasing order, the
    threshold is ``theta = (sum_{j<=rho} u_j - t) / rho`` for the largest
    ``rho`` with ``u_rho > theta``.  O(n log n).
    """
    if t <= 0:
        raise ValueError(f"radius must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    if ax.sum() <= t:
        return x.copy()
    u = np.sort(ax)[::-1]
    css = np.cumsum(u) - t
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u * idx > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.sign(x) * np.maximum(ax - theta, 0.0)


def project_l1_ball_weighted(x, t, d, tol=BISECTION_TOL, max_steps=BISECTION_MAX_STEPS):
    """Projection onto the L1 ball in the norm ``sum_i p_i^2 / d_i``.

    This is the resolvent of the ball indicator under ``U = diag(d)``.  The
    KKT conditions give ``p_i = sign(x_i) max(|x_i| - theta d_i, 0)`` where
    ``theta >= 0`` solves ``phi(theta) = sum_i max(|x_i| - theta d_i, 0) = t``.
    ``phi`` is decreasing and piecewise linear, so bisection on ``theta``
    locates the active set and a closed-form solve on that set finishes.
    """
    if t <= 0:
        raise ValueError(f"radius must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    d = np.broadcast_to(np.asarray(d, dtype=float), x.shape)
    ax = np.abs(x)
    if ax.sum() <= t:
        return x.copy()

    def phi(theta):
        return np.maximum(ax - theta * d, 0.0).sum()

    lo, hi = 0.0, float(np.max(ax / d))
    scale = max(t, 1.0)
    theta = 0.5 * (lo + hi)
    for _ in range(max_steps):
        theta = 0.5 * (lo + hi)
        gap = phi(theta) - t
        if abs(gap) <= tol * scale:
            break
        if gap > 0:
            lo = theta
        else:
            hi = theta
    else:
        gap = phi(theta) - t
        if abs(gap) > 1e3 * tol * scale:
            raise ArithmeticError(
                f"weighted L1 projection: bisection stalled with KKT gap {gap:.3e}")

    active = ax - theta * d > 0
    if np.any(active):
        exact = (ax[active].sum() - t) / d[active].sum()
        if exact >= 0 and abs(phi(exact) - t) <= abs(phi(theta) - t):
            theta = exact
    return np.sign(x) * np.maximum(ax - theta * d, 0.0)


# ---------------------------------------------------------------------------
# Proximable (maximal monotone) side
# ---------------------------------------------------------------------------

class Proximable:
    """A maximal monotone ``A = ∂g`` with an exact metric resolvent.

    Subclasses implement :meth:`_resolvent`, :meth:`value` and
    :meth:`subgradient_violation`.  Indicator-type subclasses set
    ``is_set = True`` and also provide :meth:`project` and :meth:`contains`.
    """

    is_set = False
    dim: int | None = None

    def supports(self, U: Metric) -> bool:
        return U.is_separable

    def resolvent(self, x, gamma, U: Metric):
        if gamma <= 0:
            raise ParameterError(f"gamma must be positive, got {gamma}")
        if not self.supports(U):
            raise UnsupportedMetricError(
                f"{type(self).__name__} has no exact resolvent under a {U.kind} metric")
        x = np.asarray(x, dtype=float)
        if self.dim is not None and x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: operator dim {self.dim}, vector {x.shape[0]}")
        return self._resolvent(x, gamma, U)

    def value(self, x) -> float:
        raise NotImplementedError

    def subgradient_violation(self, p, v, tol=1e-9) -> float:
        """Distance-like measure of how far ``v`` is from ``A(p)``; 0 means ``v in A(p)``."""
        raise NotImplementedError

    def _resolvent(self, x, gamma, U):
        raise NotImplementedError


class Zero(Proximable):
    """``A = 0`` (``g = 0``); the resolvent is the identity for every metric."""

    def supports(self, U):
        return True

    def _resolvent(self, x, gamma, U):
        return x.copy()

    def value(self, x):
        return 0.0

    def subgradient_violation(self, p, v, tol=1e-9):
        return float(np.max(np.abs(v)))

    def __repr__(self):
        return "Zero()"


class L1Norm(Proximable):
    """``g(x) = w ||x||_1``; soft thresholding with per-coordinate thresholds ``gamma w U_ii``."""

    def __init__(self, w=1.0):
        if w < 0:
            raise ValueError("L1Norm weight must be >= 0")
        self.w = float(w)

    def _resolvent(self, x, gamma, U):
        thr = gamma * self.w * U.diagonal(x.size)
        return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)

    def value(self, x):
        return self.w * float(np.abs(x).sum())

    def subgradient_violation(self, p, v, tol=1e-9):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        nz = p != 0
        on = np.abs(v[nz] - self.w * np.sign(p[nz]))
        off = np.maximum(np.abs(v[~nz]) - self.w, 0.0)
        return float(max(on.max(initial=0.0), off.max(initial=0.0)))

    def __repr__(self):
        return f"L1Norm(w={self.w!r})"


class _SetIndicator(Proximable):
    is_set = True

    def project(self, x):
        """Euclidean projection onto the set."""
        return self.resolvent(x, 1.0, ScaledIdentity(1.0))

    def contains(self, x, tol=1e-10) -> bool:
        return self.infeasibility(x) <= tol

    def infeasibility(self, x) -> float:
        raise NotImplementedError

    def value(self, x):
        return 0.0 if self.contains(x) else math.inf


class L1BallIndicator(_SetIndicator):
    """``C = {x : ||x||_1 <= t}``.

    Scaled-identity metrics use the sort-based Euclidean projection; diagonal
    metrics use :func:`project_l1_ball_weighted`.  Dense metrics are rejected.
    """

    def __init__(self, t):
        if not t > 0:
            raise ValueError(f"L1 ball radius must be positive, got {t}")
        self.t = float(t)

    def _resolvent(self, x, gamma, U):
        if U.kind == "scaled":
            return project_l1_ball(x, self.t)
        return project_l1_ball_weighted(x, self.t, U.diagonal(x.size))

    def infeasibility(self, x):
        return max(float(np.abs(x).sum()) - self.t, 0.0)

    def subgradient_violation(self, p, v, tol=1e-9):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        infeas = self.infeasibility(p)
        if np.abs(p).sum() < self.t - tol * max(self.t, 1.0):
            return max(infeas, float(np.max(np.abs(v))))
        # boundary: v = theta * s with s in the subdifferential of ||.||_1 at p
        theta = float(np.max(np.abs(v)))
        nz = p != 0
        on = np.abs(v[nz] * np.sign(p[nz]) - theta)
        return max(infeas, float(on.max(initial=0.0)))

    def __repr__(self):
        return f"L1BallIndicator(t={self.t!r})"


class BoxIndicator(_SetIndicator):
    """``C = {x : lo <= x <= hi}``; infinite bounds are allowed."""

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        self.lo = lo.copy()
        self.hi = hi.copy()
        self.dim = lo.size

    @classmethod
    def whole_space(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def _resolvent(self, x, gamma, U):
        return np.clip(x, self.lo, self.hi)

    def infeasibility(self, x):
        x = np.asarray(x, dtype=float)
        return float(max(np.max(self.lo - x, initial=0.0), np.max(x - self.hi, initial=0.0)))

    def subgradient_violation(self, p, v, tol=1e-9):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        at_lo = np.abs(p - self.lo) <= tol * np.maximum(1.0, np.abs(self.lo))
        at_hi = np.abs(p - self.hi) <= tol * np.maximum(1.0, np.abs(self.hi))
        viol = np.abs(v)
        viol = np.where(at_lo, np.maximum(v, 0.0), viol)
        viol = np.where(at_hi, np.maximum(-v, 0.0), viol)
        viol = np.where(at_lo & at_hi, 0.0, viol)
        return max(self.infeasibility(p), float(viol.max()))

    def __repr__(self):
        return f"BoxIndicator(lo={self.lo.tolist()!r}, hi={self.hi.tolist()!r})"


class HalfSpaceIndicator(_SetIndicator):
    """``C = {x : <a, x> <= b}``.

    The metric projection has a closed form for every SPD metric:
    ``p = x - theta U a`` with ``theta = max(0, (<a, x> - b) / <a, U a>)``.
    """

    def __init__(self, a, b):
        a = as_vector(a, "a")
        if not np.any(a):
            raise ValueError("half-space normal must be nonzero")
        self.a = a
        self.b = float(b)
        self.dim = a.size

    def supports(self, U):
        return True

    def _resolvent(self, x, gamma, U):
        excess = float(self.a @ x) - self.b
        if excess <= 0:
            return x.copy()
        Ua = U.apply(self.a)
        return x - (excess / float(self.a @ Ua)) * Ua

    def infeasibility(self, x):
        return max(float(self.a @ x) - self.b, 0.0)

    def subgradient_violation(self, p, v, tol=1e-9):
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        infeas = self.infeasibility(p)
        if float(self.a @ p) < self.b - tol * max(abs(self.b), 1.0):
            return max(infeas, float(np.max(np.abs(v))))
        theta = float(v @ self.a) / float(self.a @ self.a)
        return max(infeas, float(np.max(np.abs(v - theta * self.a))), max(-theta, 0.0))

    def __repr__(self):
        return f"HalfSpaceIndicator(a={self.a.tolist()!r}, b={self.b!r})"


class NormalCone(Proximable):
    """``A = N_C`` for an indicator-type set ``C``.

    The resolvent is the metric projection onto ``C``; everything is
    delegated to the wrapped set.
    """

    is_set = True

    def __init__(self, C):
        if isinstance(C, NormalCone):
            C = C.C
        if not getattr(C, "is_set", False):
            raise TypeError(f"NormalCone needs an indicator-type set, got {C!r}")
        self.C = C
        self.dim = C.dim

    def supports(self, U):
        return self.C.supports(U)

    def _resolvent(self, x, gamma, U):
        return self.C._resolvent(x, gamma, U)

    def project(self, x):
        return self.C.project(x)

    def contains(self, x, tol=1e-10):
        return self.C.contains(x, tol)

    def infeasibility(self, x):
        return self.C.infeasibility(x)

    def value(self, x):
        return self.C.value(x)

    def subgradient_violation(self, p, v, tol=1e-9):
        return self.C.subgradient_violation(p, v, tol)

    def __repr__(self):
        return f"NormalCone({self.C!r})"


def resolvent(P: Proximable, gamma, U: Metric, x):
    """Return ``J_{gamma U A}(x)``, i.e. ``prox^{U^{-1}}_{gamma g}(x)``."""
    return P.resolvent(x, gamma, U)


# ---------------------------------------------------------------------------
# Cocoercive side
# ---------------------------------------------------------------------------

def _certified_beta(L: LinearMap, tol):
    if L.op_norm is None:
        L = L.with_op_norm(tol=tol)
    sigma = L.op_norm * (1.0 + L.op_norm_tol)
    return L, (math.inf if sigma == 0 else 1.0 / sigma**2)


def _as_linear_map(A):
    return A if isinstance(A, LinearMap) else LinearMap(A)


class Cocoercive:
    """Single-valued ``B`` with cocoercivity constant ``beta > 0``.

    ``beta`` may be ``inf`` (only for the zero map).  ``value`` returns the
    potential ``f`` with ``B = grad f`` where one exists.
    """

    beta: float
    dim: int | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim is not None and x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: operator dim {self.dim}, vector {x.shape[0]}")
        return self._apply(x)

    apply = __call__

    def value(self, x) -> float:
        raise NotImplementedError

    def value_and_apply(self, x):
        """``(f(x), Bx)``; subclasses override when both share work."""
        return self.value(x), self(x)

    def _apply(self, x):
        raise NotImplementedError


class ZeroMap(Cocoercive):
    beta = math.inf

    def _apply(self, x):
        return np.zeros_like(x)

    def value(self, x):
        return 0.0

    def __repr__(self):
        return "ZeroMap()"


class LeastSquaresGradient(Cocoercive):
    """``B = A^T (A x - b)``, the gradient of ``1/2 ||Ax - b||^2``.

    ``beta = 1 / (sigma (1 + tol))^2`` where ``sigma`` is the power-iteration
    estimate of ``||A||``; the inflation keeps ``beta`` a valid lower bound.
    """

    def __init__(self, A, b, norm_tol=1e-6):
        A = _as_linear_map(A)
        b = as_vector(b, "b")
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        self.A, self.beta = _certified_beta(A, norm_tol)
        self.b = b
        self.dim = A.shape[1]

    @property
    def lipschitz(self):
        return 1.0 / self.beta

    def residual(self, x):
        return self.A(x) - self.b

    def _apply(self, x):
        return self.A.adjoint(self.A(x) - self.b)

    def value(self, x):
        r = self.A(np.asarray(x, dtype=float)) - self.b
        return 0.5 * float(r @ r)

    def value_and_apply(self, x):
        r = self.A(np.asarray(x, dtype=float)) - self.b
        return 0.5 * float(r @ r), self.A.adjoint(r)

    def __repr__(self):
        return f"LeastSquaresGradient(shape={self.A.shape}, beta={self.beta:.6g})"


class SfpResidualGradient(Cocoercive):
    """``B = L^T (L x - P_Q(L x))`` for the split feasibility problem.

    Gradient of ``f(x) = 1/2 ||Lx - P_Q(Lx)||^2``; cocoercive with
    ``beta = 1/||L||^2`` (inflated as for least squares).
    """

    def __init__(self, L, Q, norm_tol=1e-6):
        L = _as_linear_map(L)
        if not getattr(Q, "is_set", False):
            raise TypeError(f"Q must be an indicator-type set, got {Q!r}")
        if Q.dim is not None and Q.dim != L.shape[0]:
            raise ValueError(f"Q lives in R^{Q.dim} but L maps into R^{L.shape[0]}")
        self.L, self.beta = _certified_beta(L, norm_tol)
        self.Q = Q
        self.dim = L.shape[1]

    def _apply(self, x):
        Lx = self.L(x)
        return self.L.adjoint(Lx - self.Q.project(Lx))

    def value(self, x):
        return self.value_and_apply(x)[0]

    def value_and_apply(self, x):
        Lx = self.L(np.asarray(x, dtype=float))
        r = Lx - self.Q.project(Lx)
        return 0.5 * float(r @ r), self.L.adjoint(r)

    def __repr__(self):
        return f"SfpResidualGradient(shape={self.L.shape}, Q={self.Q!r})"


class AffineMonotone(Cocoercive):
    """``B x = M x + c`` with ``M`` symmetric positive definite; ``beta = 1/lambda_max(M)``."""

    def __init__(self, M, c):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        c = as_vector(c, "c")
        if M.shape != (c.size, c.size):
            raise ValueError(f"M has shape {M.shape}, c has {c.size} entries")
        if np.abs(M - M.T).max() > 1e-12 * max(np.abs(M).max(), 1.0):
            raise ValueError("AffineMonotone requires a symmetric M")
        eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
        if eigs[0] <= 0:
            raise ValueError("AffineMonotone requires a positive definite M")
        self.M = M
        self.c = c
        self.beta = 1.0 / float(eigs[-1])
        self.dim = c.size

    def _apply(self, x):
        return self.M @ x + self.c

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.M @ x) + float(self.c @ x)

    def __repr__(self):
        return f"AffineMonotone(dim={self.dim}, beta={self.beta:.6g})"


def cocoercive_apply(B: Cocoercive, x):
    """Return ``Bx``."""
    return B(x)


# ---------------------------------------------------------------------------
# Averagedness calculus
# ---------------------------------------------------------------------------

def _step_ratio(beta, gamma, normU):
    """``gamma ||U|| / (2 beta)``, validated to lie in [0, 1)."""
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if not normU > 0:
        raise ParameterError(f"||U|| must be positive, got {normU}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    r = 0.0 if math.isinf(beta) else gamma * normU / (2.0 * beta)
    if r >= 1.0:
        raise ParameterError(
            f"gamma={gamma!r} is outside (0, 2*beta/||U||) = (0, {2 * beta / normU!r})")
    return r


def averaged_constant_forward(beta, gamma, normU):
    """Averagedness constant ``gamma ||U|| / (2 beta)`` of ``I - gamma U B`` on ``H_{U^{-1}}``."""
    return _step_ratio(beta, gamma, normU)


def averaged_constant_composed(beta, gamma, normU):
    """Averagedness constant ``2 beta / (4 beta - gamma ||U||)`` of the forward-backward map.

    Obtained by composing the firmly nonexpansive resolvent (1/2) with
    the forward step via :func:`compose_averaged`.
    """
    return 1.0 / (2.0 - _step_ratio(beta, gamma, normU))


def compose_averaged(a1, a2):
    """Averagedness constant of ``T1 T2`` for ``a1``- and ``a2``-averaged factors."""
    return (a1 + a2 - 2.0 * a1 * a2) / (1.0 - a1 * a2)


def averaged_constant_bauschke(a1, a2):
    """The coarser composition constant ``2 / (1 + 1/max(a1, a2))``."""
    return 2.0 / (1.0 + 1.0 / max(a1, a2))


def averaged_constant_byrne(a1, a2):
    """The coarser composition constant ``a1 + a2 - a1 a2``."""
    return a1 + a2 - a1 * a2


def averaged_violation(T, alpha, U: Metric, pairs):
    """Largest violation of the averagedness inequality over `pairs`.

    For each pair, evaluates (all norms in ``||.||_{U^{-1}}``)

        ||Tx - Ty||^2 - ||x - y||^2 + (1 - alpha)/alpha ||(I-T)x - (I-T)y||^2

    which is <= 0 exactly when the inequality holds.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    coef = (1.0 - alpha) / alpha
    worst = -math.inf
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        Tx, Ty = T(x), T(y)
        dT = Tx - Ty
        dx = x - y
        dR = dx - dT
        gap = (metric_inv_norm(U, dT) ** 2 - metric_inv_norm(U, dx) ** 2
               + coef * metric_inv_norm(U, dR) ** 2)
        worst = max(worst, gap)
    return worst


def check_averaged(T, alpha, U: Metric, sample_pairs, slack=1e-8) -> bool:
    """True iff `T` satisfies the ``alpha``-averagedness inequality on every pair, within `slack`."""
    return averaged_violation(T, alpha, U, sample_pairs) <= slack


def forward_backward_map(P: Proximable, B: Cocoercive, gamma, U: Metric):
    """Return ``T = J_{gamma U A}(I - gamma U B)`` as a callable."""
    def T(x):
        x = np.asarray(x, dtype=float)
        return P.resolvent(x - gamma * U.apply(B(x)), gamma, U)
    return T


def fixed_point_residual(P: Proximable, B: Cocoercive, gamma, U: Metric, x) -> float:
    """Euclidean norm of ``x - J_{gamma U A}(x - gamma U Bx)``; zero iff ``0 in Ax + Bx``."""
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(x - forward_backward_map(P, B, gamma, U)(x)))


def metric_perturbation_bound(P: Proximable, B: Cocoercive, r, s, U: Metric, V: Metric, x):
    """Both sides of the step/metric perturbation bound at `x`.

    With ``T_{rU} = J_{rUA}(I - rUB)``::

        lhs = ||T_{rU} x - T_{sV} x||
        rhs = ||U|| * ||(U^{-1} - (r/s) V^{-1})(x - T_{sV} x)||

    (``||U||`` is ``1 / lambda_min(U^{-1})``).  ``lhs <= rhs`` must hold.
    """
    if r <= 0 or s <= 0:
        raise ParameterError("r and s must be positive")
    x = np.asarray(x, dtype=float)
    Tr = forward_backward_map(P, B, r, U)(x)
    Ts = forward_backward_map(P, B, s, V)(x)
    lhs = float(np.linalg.norm(Tr - Ts))
    dx = x - Ts
    rhs = U.norm * float(np.linalg.norm(U.inv_apply(dx) - (r / s) * V.inv_apply(dx)))
    return lhs, rhs
