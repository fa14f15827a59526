"""Barrier functions and closed-form safety filters on the reduced model.

All filters handle a single affine constraint ``a.u + b >= 0`` and are
vectorized over leading axes of ``a``/``b``/``u_des``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ClassK, ContractViolation, DomainError

# ||a||^2 at or below this counts as a vanishing input direction
A_TINY = 1e-30


class InfeasibleConstraint(ValueError):
    """``a = 0`` and ``b < 0``: no input can satisfy the constraint."""


class UnsupportedModel(ValueError):
    """The reduced model does not expose a control-affine form."""


@dataclass(frozen=True)
class Barrier:
    h: Callable
    grad_h: Callable
    alpha: ClassK
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError("safety margin eta must be positive")


@dataclass(frozen=True)
class PositionMargin:
    """Scalar margin on configuration ``q`` with gradient and Hessian."""

    value: Callable
    grad: Callable
    hess: Callable


@dataclass(frozen=True)
class AffineConstraint:
    """Half-space ``a.u + b >= 0``; ``a`` has shape ``(..., m)``."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim == 0:
            a = a[None]
        if a.shape[:-1] != b.shape:
            raise ContractViolation(f"constraint shapes a{a.shape} b{b.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def margin(self, u) -> np.ndarray:
        return np.einsum("...m,...m->...", self.a, np.asarray(u, dtype=float)) + self.b

    @property
    def infeasible(self) -> np.ndarray:
        return (np.einsum("...m,...m->...", self.a, self.a) <= A_TINY) & (self.b < 0)


def constraint_coeffs(barrier: Barrier, reduced_affine, x) -> AffineConstraint:
    """Coefficients of ``grad_h.(d + B u) + alpha(h) - eta >= 0``."""
    if reduced_affine is None:
        raise UnsupportedModel("reduced dynamics are not control-affine")
    x = np.asarray(x, dtype=float)
    d, B = reduced_affine(x)
    gh = barrier.grad_h(x)
    a = np.einsum("...nm,...n->...m", B, gh)
    b = np.einsum("...n,...n->...", gh, d) + barrier.alpha(barrier.h(x)) - barrier.eta
    return AffineConstraint(a, b)


def safe_filter_hard(c: AffineConstraint, u_des, on_infeasible: str = "raise"):
    """Euclidean projection of ``u_des`` onto the constraint half-space.

    Infeasible instances raise, or with ``on_infeasible="keep"`` return
    ``u_des`` unchanged (check ``c.infeasible`` to record them).
    """
    u_des = np.asarray(u_des, dtype=float)
    a, b = c.a, c.b
    bad = c.infeasible
    if np.any(bad) and on_infeasible == "raise":
        raise InfeasibleConstraint("a = 0 with b < 0")
    norm2 = np.einsum("...m,...m->...", a, a)
    m = np.einsum("...m,...m->...", a, u_des) + b
    active = (m < 0) & (norm2 > A_TINY)
    scale = np.where(active, -m / np.where(active, norm2, 1.0), 0.0)
    return u_des + scale[..., None] * a


def softplus(s, sigma: float):
    """``(1/sigma) ln(1 + exp(sigma s))`` without overflow."""
    return np.logaddexp(0.0, sigma * np.asarray(s, dtype=float)) / sigma


def safe_filter_smooth(c: AffineConstraint, u_des, sigma: float = 50.0):
    """Softplus relaxation of the projection; never less safe than it.

    The returned input satisfies ``a.u + b >= max(0, a.u_des + b)`` and lies
    within ``ln 2 / (sigma ||a||)`` of the hard projection. Rows with
    ``a = 0`` get the hard-filter semantics.
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    u_des = np.asarray(u_des, dtype=float)
    a = c.a
    norm2 = np.einsum("...m,...m->...", a, a)
    ok = norm2 > A_TINY
    m = np.einsum("...m,...m->...", a, u_des) + c.b
    scale = np.where(ok, softplus(-m, sigma) / np.where(ok, norm2, 1.0), 0.0)
    return u_des + scale[..., None] * a


def hocbf_lift(margin: PositionMargin, gamma: float, q, omega):
    """First-order barrier ``grad_hbar(q).omega + gamma hbar(q)``.

    Returns ``(value, gradient)`` with the gradient taken w.r.t. the stacked
    ``(q, omega)``.
    """
    q = np.asarray(q, dtype=float)
    omega = np.asarray(omega, dtype=float)
    g = margin.grad(q)
    H = margin.hess(q)
    value = np.einsum("...i,...i->...", g, omega) + gamma * margin.value(q)
    dq = np.einsum("...ij,...j->...i", H, omega) + gamma * g
    return value, np.concatenate([dq, g], axis=-1)


def lse_aggregate(values, rho: float):
    """Soft minimum ``-(1/rho) ln sum exp(-rho h_j)`` over the last axis."""
    v = np.asarray(values, dtype=float)
    if v.shape[-1:] == (0,) or v.ndim == 0:
        raise ContractViolation("lse_aggregate needs a nonempty list")
    if not rho > 0:
        raise DomainError("rho must be positive")
    vmin = v.min(axis=-1)
    s = np.exp(-rho * (v - vmin[..., None])).sum(axis=-1)
    return vmin - np.log(s) / rho


def lse_weights(values, rho: float):
    v = np.asarray(values, dtype=float)
    if v.shape[-1:] == (0,) or v.ndim == 0:
        raise ContractViolation("lse weights need a nonempty list")
    w = np.exp(-rho * (v - v.min(axis=-1, keepdims=True)))
    return w / w.sum(axis=-1, keepdims=True)


def lse_gradient(values, grads, rho: float):
    """Gradient of :func:`lse_aggregate`; ``grads`` has shape ``(..., N, n)``."""
    grads = np.asarray(grads, dtype=float)
    w = lse_weights(values, rho)
    if grads.shape[:-1] != w.shape:
        raise ContractViolation("values and grads differ in length")
    return np.einsum("...j,...jn->...n", w, grads)
