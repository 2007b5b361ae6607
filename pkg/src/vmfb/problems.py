"""Problem reductions to ``(Proximable, Cocoercive, beta)`` triples and instance generators.

* constrained LASSO  ``min 1/2 ||Ax - b||^2  s.t. ||x||_1 <= t``
* variational inequality  ``<Bx*, y - x*> >= 0  for all y in C``
* constrained minimization  ``min f(x)  s.t. x in C``
* split feasibility  ``find x in C with Lx in Q``
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linops import LinearMap, as_vector
from .operators import (
    Cocoercive,
    L1BallIndicator,
    LeastSquaresGradient,
    NormalCone,
    SfpResidualGradient,
)

__all__ = [
    "RNG_ID",
    "LassoInstance",
    "SfpInstance",
    "generate_lasso_instance",
    "build_lasso",
    "build_vip",
    "build_constrained_min",
    "build_sfp",
]

# Recorded in instance metadata so a replay knows how the numbers were drawn.
RNG_ID = "numpy.random.Generator(PCG64); normal=ziggurat; uniform=53-bit double; support=permutation prefix"

INSTANCE_SCHEMA = 1


@dataclass(frozen=True)
class LassoInstance:
    A: LinearMap
    b: np.ndarray
    t: float
    x_true: np.ndarray
    seed: int | None = None
    rng: str = RNG_ID

    def __post_init__(self):
        if not isinstance(self.A, LinearMap):
            object.__setattr__(self, "A", LinearMap(self.A))
        object.__setattr__(self, "b", as_vector(self.b, "b"))
        object.__setattr__(self, "x_true", as_vector(self.x_true, "x_true"))
        m, n = self.A.shape
        if self.b.size != m or self.x_true.size != n:
            raise ValueError(f"inconsistent shapes: A {self.A.shape}, b {self.b.size}, "
                             f"x_true {self.x_true.size}")
        if not self.t > 0:
            raise ValueError("t must be positive")

    @property
    def shape(self):
        return self.A.shape

    @property
    def sparsity(self):
        return int(np.count_nonzero(self.x_true))

    def objective(self, x):
        r = self.A(x) - self.b
        return 0.5 * float(r @ r)

    def to_dict(self):
        m, n = self.A.shape
        return {
            "schema": INSTANCE_SCHEMA,
            "m": m,
            "n": n,
            "k": self.sparsity,
            "seed": self.seed,
            "rng": self.rng,
            "t": self.t,
            "A": self.A.matrix.ravel().tolist(),
            "b": self.b.tolist(),
            "x_true": self.x_true.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        A = np.asarray(d["A"], dtype=float).reshape(d["m"], d["n"])
        return cls(A=LinearMap(A), b=d["b"], t=d["t"], x_true=d["x_true"],
                   seed=d.get("seed"), rng=d.get("rng", RNG_ID))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SfpInstance:
    L: LinearMap
    C: object
    Q: object

    def __post_init__(self):
        if not isinstance(self.L, LinearMap):
            object.__setattr__(self, "L", LinearMap(self.L))
        for name in ("C", "Q"):
            if not getattr(getattr(self, name), "is_set", False):
                raise TypeError(f"{name} must be an indicator-type set")


def generate_lasso_instance(m, n, k, seed, t=None):
    """Random sparse recovery instance.

    ``A`` has i.i.d. standard normal entries (drawn row-major first), the
    support of ``x_true`` is the first `k` entries of a seeded permutation,
    its values are uniform on [-2, 2], and ``b = A x_true``.  The radius
    defaults to ``t = ||x_true||_1`` so the planted signal is feasible.
    """
    if m < 1 or n < 1 or not 1 <= k <= n:
        raise ValueError(f"invalid dimensions m={m}, n={n}, k={k}")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    support = rng.permutation(n)[:k]
    values = rng.uniform(-2.0, 2.0, size=k)
    while np.any(values == 0.0):
        values[values == 0.0] = rng.uniform(-2.0, 2.0, size=int(np.sum(values == 0.0)))
    x_true = np.zeros(n)
    x_true[support] = values
    b = A @ x_true
    if t is None:
        t = float(np.abs(x_true).sum())
    return LassoInstance(A=LinearMap(A), b=b, t=float(t), x_true=x_true, seed=seed)


def build_lasso(inst: LassoInstance, norm_tol=1e-6):
    """``(L1BallIndicator(t), grad 1/2||Ax-b||^2, beta)`` with ``beta`` certified against ``||A||^2``."""
    B = LeastSquaresGradient(inst.A, inst.b, norm_tol=norm_tol)
    return L1BallIndicator(inst.t), B, B.beta


def build_vip(C, B: Cocoercive):
    """Variational inequality over `C` as ``0 in Bx + N_C(x)``."""
    return NormalCone(C), B, B.beta


def build_constrained_min(C, f_grad: Cocoercive):
    """``min f + delta_C``; `f_grad` is the gradient of the smooth part."""
    return NormalCone(C), f_grad, f_grad.beta


def build_sfp(inst: SfpInstance, norm_tol=1e-6):
    """Split feasibility as ``min_{x in C} 1/2 ||Lx - P_Q(Lx)||^2``."""
    B = SfpResidualGradient(inst.L, inst.Q, norm_tol=norm_tol)
    return NormalCone(inst.C), B, B.beta
