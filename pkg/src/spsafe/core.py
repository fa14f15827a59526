"""System and controller contracts for slow/fast interconnections.

Every vector field in this package is vectorized over leading axes: a
callable taking ``x`` of shape ``(n,)`` also accepts ``(..., n)`` and
returns the matching leading shape. Slow state is ``x``, fast state ``z``,
input ``u``; the fast rate is ``g / eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class ContractViolation(ValueError):
    """Shapes or preconditions of an operation were not met."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling box (stands in for the compact sets C and U)."""

    lo: Array
    hi: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ContractViolation(f"bad box bounds {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> Array:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0) -> Array:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def grid(self, n: int) -> Array:
        """Tensor grid with ``n`` points per axis, shape ``(n**dim, dim)``."""
        axes = [np.linspace(a, b, n) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, count: int) -> Array:
        return self.lo + rng.random((count, self.dim)) * self.width


@dataclass(frozen=True)
class SlowFastSystem:
    """The pair ``x' = f(x, z, u)``, ``eps z' = g(z, x, u)``.

    ``z_eq(x, u)`` is the fast equilibrium and ``grad_z_eq(x, u)`` its
    Jacobian with respect to the stacked ``(x, u)``, shape ``(..., p, n+m)``.
    ``reduced_affine`` optionally returns ``(d(x), B(x))`` with
    ``f(x, z_eq(x, u), u) = d(x) + B(x) u``.
    """

    n_slow: int
    n_fast: int
    n_input: int
    f: Callable
    g: Callable
    z_eq: Callable
    grad_z_eq: Callable
    x_box: Box
    u_box: Optional[Box] = None
    reduced_affine: Optional[Callable] = None
    name: str = "system"

    def check_dims(self, x=None, z=None, u=None):
        for label, arr, n in (("x", x, self.n_slow), ("z", z, self.n_fast),
                              ("u", u, self.n_input)):
            if arr is not None and np.shape(arr)[-1:] != (n,):
                raise ContractViolation(
                    f"{self.name}: {label} has shape {np.shape(arr)}, expected (..., {n})")


@dataclass(frozen=True)
class ClassK:
    """Linear class-K rate ``alpha(s) = gain * s`` (extended to s < 0)."""

    gain: float
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ContractViolation(f"unsupported class-K kind {self.kind!r}")
        if not self.gain > 0:
            raise DomainError("class-K gain must be positive")

    @property
    def lipschitz(self) -> float:
        return float(self.gain)

    def __call__(self, s):
        return eval_class_k(self, s)


@dataclass(frozen=True)
class Controller:
    """Feedback policy ``u = policy(x)``.

    ``infeasible(x)``, when given, flags states where the underlying safety
    filter had no feasible input and fell back to the nominal one.
    """

    policy: Callable
    input_dim: int
    lipschitz: Optional[float] = None
    infeasible: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.policy(x)


def _as_float(a):
    return np.asarray(a, dtype=float)


def full_dynamics(sys: SlowFastSystem, x, z, u, eps: float):
    """Return ``(x_dot, z_dot)`` of the interconnection at timescale ``eps``."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    x, z, u = _as_float(x), _as_float(z), _as_float(u)
    sys.check_dims(x, z, u)
    return sys.f(x, z, u), sys.g(z, x, u) / eps


def reduced_dynamics(sys: SlowFastSystem, x, u):
    """Slow field on the fast equilibrium manifold, ``f(x, z_eq(x,u), u)``."""
    x, u = _as_float(x), _as_float(u)
    sys.check_dims(x=x, u=u)
    zs = sys.z_eq(x, u)
    if not np.all(np.isfinite(zs)):
        raise DomainError(f"{sys.name}: z_eq undefined at the given (x, u)")
    return sys.f(x, zs, u)


def boundary_layer_dynamics(sys: SlowFastSystem, zt, x_bar, u_bar):
    """Fast error dynamics in stretched time with ``(x, u)`` frozen."""
    zt, x_bar, u_bar = _as_float(zt), _as_float(x_bar), _as_float(u_bar)
    sys.check_dims(x_bar, zt, u_bar)
    return sys.g(zt + sys.z_eq(x_bar, u_bar), x_bar, u_bar)


def eval_class_k(alpha: ClassK, s):
    return alpha.gain * _as_float(s)


def equilibrium_residual(sys: SlowFastSystem, X, U) -> float:
    """Largest ``||g(z_eq(x,u), x, u)||`` over the sample pairs."""
    X, U = _as_float(X), _as_float(U)
    r = sys.g(sys.z_eq(X, U), X, U)
    return float(np.max(np.linalg.norm(r, axis=-1)))


def central_jacobian(fun: Callable, x, step) -> Array:
    """Central-difference Jacobian of a vectorized ``fun`` at points ``x``.

    ``x`` has shape ``(..., n)``; ``step`` is a scalar or per-axis array.
    Returns shape ``(..., k, n)`` where ``k`` is the output size.
    """
    x = _as_float(x)
    n = x.shape[-1]
    step = np.broadcast_to(_as_float(step), (n,))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step[i]
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step[i]))
    return np.stack(cols, axis=-1)
