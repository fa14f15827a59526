"""Scalar slow state coupled to a first-order fast lag.

``x' = z - x``, ``eps z' = u + x - z``; the fast equilibrium ``z = u + x``
turns the reduced model into a single integrator ``x' = u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cbf import A_TINY, Barrier, constraint_coeffs, safe_filter_hard
from ..composite import SafetyBundle, quadratic_certificate
from ..core import Box, ClassK, Controller, DomainError, SlowFastSystem


@dataclass(frozen=True)
class ToyParams:
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 0.1
    x0: float = 0.5
    z0_offset: float = 0.8

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0 and self.eta > 0):
            raise DomainError("beta, gamma and eta must be positive")
        if not self.eta < self.gamma * self.beta**2:
            raise DomainError("eta must stay below alpha(beta^2)")


def toy_nominal(x):
    return 2.0 * np.sin(np.asarray(x, dtype=float))


def toy_system(p: ToyParams) -> SlowFastSystem:
    def f(x, z, u):
        return np.asarray(z, dtype=float) - np.asarray(x, dtype=float)

    def g(z, x, u):
        return np.asarray(u, dtype=float) + np.asarray(x, dtype=float) - np.asarray(z, dtype=float)

    def z_eq(x, u):
        return np.asarray(u, dtype=float) + np.asarray(x, dtype=float)

    def grad_z_eq(x, u):
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.ones(lead + (1, 2))

    def reduced_affine(x):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x), np.ones(x.shape + (1,))

    # the sampling box is C itself, so grids include its boundary
    w = p.beta
    return SlowFastSystem(1, 1, 1, f, g, z_eq, grad_z_eq, Box([-w], [w]),
                          reduced_affine=reduced_affine, name="toy")


def toy_barrier(p: ToyParams) -> Barrier:
    def h(x):
        x = np.asarray(x, dtype=float)
        return p.beta**2 - x[..., 0] ** 2

    def grad_h(x):
        return -2.0 * np.asarray(x, dtype=float)

    return Barrier(h, grad_h, ClassK(p.gamma), p.eta)


def toy_controller(p: ToyParams, sys: SlowFastSystem, barrier: Barrier) -> Controller:
    """Hard CBF-QP filter on ``2 sin x``, generic numpy route."""

    def constraint(x):
        return constraint_coeffs(barrier, sys.reduced_affine, x)

    def policy(x):
        return safe_filter_hard(constraint(x), toy_nominal(x), on_infeasible="keep")

    return Controller(policy, 1, infeasible=lambda x: constraint(x).infeasible,
                      meta={"filter": "hard"})


def _closed_loop(p: ToyParams):
    """Fused closed-loop field; same arithmetic as the generic route."""
    beta2, gam, eta = p.beta**2, p.gamma, p.eta

    def field(X, Z, eps):
        x = X[:, 0]
        ud = 2.0 * np.sin(x)
        a = -2.0 * x
        b = gam * (beta2 - x * x) - eta
        m = a * ud + b
        n2 = a * a
        active = (m < 0) & (n2 > A_TINY)
        u = ud - np.where(active, m / np.where(active, n2, 1.0), 0.0) * a
        U = u[:, None]
        return Z - X, (U + X - Z) / eps, U, (n2 <= A_TINY) & (b < 0)

    return field


def toy_bundle(p: ToyParams | None = None) -> SafetyBundle:
    p = ToyParams() if p is None else p
    sys = toy_system(p)
    barrier = toy_barrier(p)
    ctrl = toy_controller(p, sys, barrier)
    cert = quadratic_certificate(-np.eye(1))
    x0 = np.array([p.x0])
    z0 = sys.z_eq(x0, ctrl(x0)) + p.z0_offset
    return SafetyBundle("toy", sys, ctrl, barrier, cert, x0, z0, params=p,
                        closed_loop=_closed_loop(p), sweep_range=(0.05, 2.0, 10))
