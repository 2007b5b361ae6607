"""Finite-dimensional linear algebra: SPD metrics, metric norms, dense maps.

A metric ``U`` is a symmetric positive definite operator on R^n.  Three kinds
are provided, ordered by cost: :class:`ScaledIdentity`, :class:`Diagonal` and
:class:`DenseSPD`.  Every metric knows its spectral bounds at construction,

    min_eig * ||x||^2 <= <Ux, x> <= norm * ||x||^2,

so the step-size and relaxation bounds of the solver can be evaluated per
iteration without further factorizations.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

__all__ = [
    "Metric",
    "ScaledIdentity",
    "Diagonal",
    "DenseSPD",
    "LinearMap",
    "ConvergenceWarning",
    "as_vector",
    "metric_apply",
    "metric_inv_apply",
    "metric_norm",
    "metric_inv_norm",
    "loewner_min_eig",
    "op_norm_estimate",
]

SYMMETRY_RTOL = 1e-12


class ConvergenceWarning(UserWarning):
    """An iterative estimate stopped before meeting its tolerance."""


def as_vector(x, name="x"):
    """Return `x` as a finite 1-D float array, raising ValueError otherwise."""
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Metric:
    """Base class for symmetric positive definite metrics.

    Subclasses implement ``_apply``, ``_inv_apply`` and ``diagonal``; the
    public methods here add the dimension checks.
    """

    kind = "abstract"
    dim: int | None = None
    norm: float
    min_eig: float

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
        if self.dim is not None and x.shape[0] != self.dim:
            raise ValueError(
                f"dimension mismatch: metric has dim {self.dim}, vector has {x.shape[0]}")
        return x

    def apply(self, x):
        """Return ``Ux``."""
        return self._apply(self._check(x))

    def inv_apply(self, x):
        """Return ``U^{-1} x``."""
        return self._inv_apply(self._check(x))

    def inner(self, x, y):
        """``<x, y>_U = <Ux, y>``."""
        return float(np.dot(self.apply(x), y))

    def inv_inner(self, x, y):
        """``<x, y>_{U^{-1}}``."""
        return float(np.dot(self.inv_apply(x), y))

    @property
    def is_separable(self):
        return self.kind in ("scaled", "diagonal")

    def diagonal(self, n):
        raise NotImplementedError

    def to_dense(self, n=None):
        raise NotImplementedError

    def _apply(self, x):
        raise NotImplementedError

    def _inv_apply(self, x):
        raise NotImplementedError


class ScaledIdentity(Metric):
    """``U = c I`` with ``c > 0``; `dim` may be left unset to accept any size."""

    kind = "scaled"

    def __init__(self, c=1.0, dim=None):
        c = float(c)
        if not np.isfinite(c) or c <= 0:
            raise ValueError(f"ScaledIdentity requires c > 0, got {c}")
        if dim is not None and dim < 1:
            raise ValueError("dim must be >= 1")
        self.c = c
        self.dim = dim
        self.norm = c
        self.min_eig = c

    def _apply(self, x):
        return self.c * x

    def _inv_apply(self, x):
        return x / self.c

    def diagonal(self, n):
        return np.full(n if self.dim is None else self.dim, self.c)

    def to_dense(self, n=None):
        n = self.dim if n is None else n
        return self.c * np.eye(n)

    def __repr__(self):
        return f"ScaledIdentity(c={self.c!r}, dim={self.dim!r})"


class Diagonal(Metric):
    """``U = diag(d)`` with every ``d_i > 0``."""

    kind = "diagonal"

    def __init__(self, d):
        d = as_vector(d, "d")
        if np.any(d <= 0):
            raise ValueError("Diagonal metric requires strictly positive entries")
        self.d = _frozen(d)
        self.dim = d.size
        self.norm = float(d.max())
        self.min_eig = float(d.min())

    def _apply(self, x):
        return self.d * x

    def _inv_apply(self, x):
        return x / self.d

    def diagonal(self, n):
        return np.array(self.d)

    def to_dense(self, n=None):
        return np.diag(self.d)

    def __repr__(self):
        return f"Diagonal(d={self.d.tolist()!r})"


class DenseSPD(Metric):
    """General SPD matrix metric.

    The Cholesky factor is computed once at construction and reused by
    :meth:`inv_apply`; the extreme eigenvalues come from ``eigvalsh``.
    """

    kind = "dense"

    def __init__(self, M):
        M = np.array(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
            raise ValueError(f"DenseSPD requires a non-empty square matrix, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValueError("DenseSPD matrix has non-finite entries")
        scale = max(np.abs(M).max(), np.finfo(float).tiny)
        if np.abs(M - M.T).max() > SYMMETRY_RTOL * scale:
            raise ValueError("DenseSPD matrix is not symmetric")
        M = 0.5 * (M + M.T)
        eigs = np.linalg.eigvalsh(M)
        if eigs[0] <= 0:
            raise ValueError(f"DenseSPD matrix is not positive definite (min eig {eigs[0]:.3e})")
        try:
            self._cho = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Cholesky factorization failed; matrix is not SPD") from exc
        self.M = _frozen(M)
        self.dim = M.shape[0]
        self.norm = float(eigs[-1])
        self.min_eig = float(eigs[0])

    def _apply(self, x):
        return self.M @ x

    def _inv_apply(self, x):
        return sla.cho_solve(self._cho, x, check_finite=False)

    def diagonal(self, n):
        raise TypeError("a dense metric has no diagonal representation")

    def to_dense(self, n=None):
        return np.array(self.M)

    def __repr__(self):
        return f"DenseSPD(dim={self.dim})"


def metric_apply(U: Metric, x):
    """Return ``Ux``."""
    return U.apply(x)


def metric_inv_apply(U: Metric, x):
    """Return ``U^{-1} x`` (cached Cholesky solve for dense metrics)."""
    return U.inv_apply(x)


def metric_norm(U: Metric, x) -> float:
    """``||x||_U = sqrt(<Ux, x>)``."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(max(np.dot(U.apply(x), x), 0.0)))


def metric_inv_norm(U: Metric, x) -> float:
    """``||x||_{U^{-1}}``, the norm in which the forward-backward maps are averaged."""
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(max(np.dot(U.inv_apply(x), x), 0.0)))


def loewner_min_eig(U: Metric, V: Metric, n: int, scale=1.0) -> float:
    """Smallest eigenvalue of ``scale*U - V`` on R^n.

    ``scale*U ⪰ V`` holds iff the result is >= 0.  Separable pairs are compared
    entrywise; anything involving a dense metric goes through ``eigvalsh``.
    """
    if U.is_separable and V.is_separable:
        return float(np.min(scale * U.diagonal(n) - V.diagonal(n)))
    D = scale * U.to_dense(n) - V.to_dense(n)
    return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])


class LinearMap:
    """Dense real ``m x n`` matrix acting as a bounded linear map.

    ``op_norm`` is only present on instances returned by
    :meth:`with_op_norm`, in which case the true spectral norm lies within
    ``op_norm * (1 +- op_norm_tol)``.
    """

    def __init__(self, matrix, op_norm=None, op_norm_tol=None, certified=None):
        A = np.array(matrix, dtype=float)
        if A.ndim == 1:
            A = A.reshape(1, -1)
        if A.ndim != 2 or A.size == 0:
            raise ValueError(f"LinearMap requires a non-empty 2-D matrix, got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("LinearMap matrix has non-finite entries")
        A.setflags(write=False)
        self.matrix = A
        self.op_norm = op_norm
        self.op_norm_tol = op_norm_tol
        self.certified = certified

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @property
    def shape(self):
        return self.matrix.shape

    def __call__(self, x):
        return self.matrix @ x

    def adjoint(self, y):
        return self.matrix.T @ y

    def with_op_norm(self, tol=1e-6, max_iter=5000, seed=0):
        """Return a copy carrying a spectral norm estimate at relative accuracy `tol`."""
        sigma, certified, _ = op_norm_estimate(self, tol=tol, max_iter=max_iter,
                                               seed=seed, return_info=True)
        return LinearMap(self.matrix, op_norm=sigma, op_norm_tol=tol, certified=certified)

    def __repr__(self):
        return f"LinearMap(shape={self.shape}, op_norm={self.op_norm!r})"


def op_norm_estimate(L, tol=1e-6, max_iter=5000, seed=0, return_info=False):
    """Estimate the spectral norm ``||L||_2`` by power iteration.

    Power iteration runs on the smaller of the two Gram matrices ``L^T L``
    and ``L L^T``.  With Rayleigh quotient ``rho = <v, Gv>`` for unit ``v``,
    the residual ``||Gv - rho v||`` bounds the distance from ``rho`` to the
    spectrum of ``G``, so stopping when it drops below ``tol * rho`` pins
    ``sqrt(rho)`` to within ``tol`` of a singular value.  ``rho`` never exceeds
    the top eigenvalue, so the estimate errs low.

    Parameters
    ----------
    L : LinearMap or array_like
        The ``m x n`` map.
    tol : float
        Relative accuracy in (0, 1).
    max_iter : int
        Iteration cap.
    seed : int
        Seed of the Gaussian start vector.
    return_info : bool
        If true, return ``(sigma, certified, iterations)``.

    Returns
    -------
    sigma : float
        The estimate.  When the test does not pass within `max_iter` steps
        the best estimate is returned, a :class:`ConvergenceWarning` is
        emitted and ``certified`` is False.
    """
    if not 0 < tol < 1:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    A = L.matrix if isinstance(L, LinearMap) else np.atleast_2d(np.asarray(L, dtype=float))
    m, n = A.shape
    G = A @ A.T if m < n else A.T @ A
    G = 0.5 * (G + G.T)

    if not np.any(G):
        return (0.0, True, 0) if return_info else 0.0

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    rho = 0.0
    certified = False
    it = 0
    for it in range(1, max_iter + 1):
        w = G @ v
        rho = float(v @ w)
        res = np.linalg.norm(w - rho * v)
        if rho > 0 and res <= tol * rho:
            certified = True
            break
        wn = np.linalg.norm(w)
        if wn == 0.0:
            # start vector in the null space; draw another
            v = rng.standard_normal(G.shape[0])
            v /= np.linalg.norm(v)
            continue
        v = w / wn
    sigma = float(np.sqrt(max(rho, 0.0)))
    if not certified:
        warnings.warn(f"power iteration did not reach tol={tol} in {max_iter} steps",
                      ConvergenceWarning, stacklevel=2)
    if return_info:
        return sigma, certified, it
    return sigma
