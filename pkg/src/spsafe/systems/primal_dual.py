"""Single integrator whose input is produced by a primal-dual flow.

The fast state ``z = (u, lam)`` solves the safety QP
``min (u - u_des)^2  s.t.  c(u, x) = u + gamma x - eta >= 0``
online; the slow state integrates ``x' = u``. The barrier is ``h = x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cbf import Barrier, constraint_coeffs, safe_filter_hard
from ..composite import SafetyBundle
from ..core import Box, ClassK, Controller, DomainError, SlowFastSystem
from ..sim import integrate_ode


@dataclass(frozen=True)
class PrimalDualParams:
    u_des: float = -3.0
    gamma: float = 2.0
    eta: float = 0.1
    x0: float = 4.0
    z0: tuple = (-3.0, 0.0)

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError("eta must be positive")
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")
        if len(self.z0) != 2:
            raise DomainError("z0 needs (u, lambda)")


def pd_barrier(p: PrimalDualParams) -> Barrier:
    return Barrier(lambda x: np.asarray(x, dtype=float)[..., 0],
                   lambda x: np.ones_like(np.asarray(x, dtype=float)),
                   ClassK(p.gamma), p.eta)


def _reduced_affine(x):
    x = np.asarray(x, dtype=float)
    return np.zeros_like(x), np.ones(x.shape + (1,))


def qp_oracle(p: PrimalDualParams, x):
    """Exact CBF-QP input for the single integrator."""
    x = np.asarray(x, dtype=float)
    xv = x[..., None] if x.ndim == 0 or x.shape[-1:] != (1,) else x
    c = constraint_coeffs(pd_barrier(p), _reduced_affine, xv)
    u = safe_filter_hard(c, np.full(xv.shape[:-1] + (1,), p.u_des))
    return u[..., 0]


def kkt_pair(p: PrimalDualParams, x):
    """Closed-form ``(u*, lam*)`` of the safety QP."""
    x = np.asarray(x, dtype=float)
    u = np.maximum(p.u_des, p.eta - p.gamma * x)
    return u, 2.0 * (u - p.u_des)


def primal_dual_system(p: PrimalDualParams) -> SlowFastSystem:
    """No exogenous input: the fast state itself carries the control."""

    def f(x, z, u):
        return np.asarray(z, dtype=float)[..., :1] + 0.0 * np.asarray(x, dtype=float)

    def g(z, x, u):
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        uu, lam = z[..., 0], z[..., 1]
        c = uu + p.gamma * x[..., 0] - p.eta
        du = -2.0 * (uu - p.u_des) + lam
        # projection onto lam >= 0; below zero (integration overshoot) the
        # multiplier relaxes back instead of freezing
        dlam = np.where(lam > 0, -c, np.maximum(-c, -lam))
        return np.stack([du, dlam], -1)

    def z_eq(x, u):
        u_s, lam_s = kkt_pair(p, np.asarray(x, dtype=float)[..., 0])
        return np.stack([u_s, lam_s], -1)

    def grad_z_eq(x, u):
        x = np.asarray(x, dtype=float)
        active = (p.eta - p.gamma * x[..., 0]) > p.u_des
        du = np.where(active, -p.gamma, 0.0)
        return np.stack([du, 2.0 * du], -1)[..., None]

    return SlowFastSystem(1, 2, 0, f, g, z_eq, grad_z_eq, Box([0.0], [5.0]),
                          name="primal_dual")


def qp_reference(p: PrimalDualParams, t_f: float = 10.0, dt: float = 1e-3):
    """Trajectory of ``x' = qp_oracle(x)`` from ``x0``: ``(times, xs, us)``."""
    times, xs = integrate_ode(lambda t, x: qp_oracle(p, x), np.array([p.x0]), t_f, dt)
    return times, xs, qp_oracle(p, xs)


def pd_bundle(p: PrimalDualParams | None = None) -> SafetyBundle:
    p = PrimalDualParams() if p is None else p
    sys = primal_dual_system(p)
    ctrl = Controller(lambda x: np.zeros(np.shape(x)[:-1] + (0,)), 0,
                      meta={"filter": "primal-dual flow"})
    return SafetyBundle("primal_dual", sys, ctrl, pd_barrier(p), None,
                        np.array([p.x0]), np.asarray(p.z0, dtype=float), params=p,
                        sweep_range=(0.01, 0.3, 20))
