"""Two-link planar arm in a vertical plane, driven by joint DC motors.

Slow state ``x = (q1, q2, w1, w2)``, fast state the motor currents
``z = (i1, i2)``, input the motor voltages. Links are identical uniform rods
(center of mass at l/2, centroidal inertia J). Angles are measured from the
downward vertical, so ``q = 0`` is the hanging rest pose and the end effector
sits at ``l (sin q1 + sin q12, -cos q1 - cos q12)``.

Numpy functions here are the readable reference; the compiled kernels in
``_arm_kernels`` implement the same maths for simulation and grid work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cbf import (AffineConstraint, Barrier, PositionMargin, hocbf_lift, lse_aggregate,
                   lse_gradient, safe_filter_smooth)
from ..composite import SafetyBundle, quadratic_certificate
from ..core import Box, ClassK, Controller, DomainError, SlowFastSystem
from . import _arm_kernels as K


@dataclass(frozen=True)
class ArmParams:
    m: float = 0.5
    l: float = 1.0
    J: float = 0.167
    b: float = 0.5
    R: float = 0.6
    L_tilde: float = 1.0
    K_I: float = 0.4
    K_w: float = 0.4
    g0: float = 9.81
    gamma: float = 10.0
    eta: float = 0.1
    rho: float = 50.0
    sigma: float = 50.0
    kp: float = 20.0
    kd: float = 10.0
    q_min_deg: tuple = (0.0, -80.0)
    q_max_deg: tuple = (185.0, 80.0)
    q_target_deg: tuple = (180.0, 0.0)
    q0_deg: tuple = (0.0, 0.0)
    omega0: tuple = (0.0, 0.0)
    i0_offset: tuple = (0.0, 0.0)
    obstacle_radius: float = 0.3
    obstacles: tuple = ((1.1, -1.7), (2.2, 0.0), (1.9, 0.6), (1.3, 1.7), (-0.4, 2.1))
    omega_box: float = 5.0

    def __post_init__(self):
        for f in ("m", "l", "J", "b", "R", "L_tilde", "K_I", "K_w", "g0", "gamma",
                  "eta", "rho", "sigma", "kp", "kd", "obstacle_radius", "omega_box"):
            if not getattr(self, f) > 0:
                raise DomainError(f"arm parameter {f} must be positive")
        for f in ("q_min_deg", "q_max_deg", "q_target_deg", "q0_deg", "omega0", "i0_offset"):
            if len(getattr(self, f)) != 2:
                raise DomainError(f"arm parameter {f} needs two entries")
        if any(lo >= hi for lo, hi in zip(self.q_min_deg, self.q_max_deg)):
            raise DomainError("joint limits must satisfy q_min < q_max")
        obs = np.asarray(self.obstacles, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != 2:
            raise DomainError("obstacles must be a list of (x, y) centers")

    @property
    def q_min(self):
        return np.radians(self.q_min_deg)

    @property
    def q_max(self):
        return np.radians(self.q_max_deg)

    @property
    def q_target(self):
        return np.radians(self.q_target_deg)

    @property
    def B_f(self) -> float:
        """Effective damping including back-EMF."""
        return self.b + self.K_I * self.K_w / self.R

    def packed(self):
        pv = np.empty(K.N_PARAMS)
        pv[[K.P_M, K.P_L, K.P_J, K.P_B, K.P_R, K.P_LT, K.P_KI, K.P_KW, K.P_G0]] = (
            self.m, self.l, self.J, self.b, self.R, self.L_tilde, self.K_I, self.K_w, self.g0)
        pv[[K.P_GAMMA, K.P_ETA, K.P_RHO, K.P_SIGMA, K.P_KP, K.P_KD]] = (
            self.gamma, self.eta, self.rho, self.sigma, self.kp, self.kd)
        pv[[K.P_QT1, K.P_QT2]] = self.q_target
        pv[[K.P_QMIN1, K.P_QMIN2]] = self.q_min
        pv[[K.P_QMAX1, K.P_QMAX2]] = self.q_max
        pv[K.P_ROBS] = self.obstacle_radius
        return pv, np.ascontiguousarray(np.asarray(self.obstacles, dtype=float))


# ---- rigid-body terms (numpy reference) -------------------------------------

def _split(q):
    q = np.asarray(q, dtype=float)
    return q[..., 0], q[..., 1]


def arm_mass_matrix(p: ArmParams, q):
    _, q2 = _split(q)
    lc = p.l / 2
    c2 = np.cos(q2)
    m22 = p.J + p.m * lc**2 + np.zeros_like(c2)
    m12 = m22 + p.m * p.l * lc * c2
    m11 = 2 * p.J + p.m * lc**2 + p.m * (p.l**2 + lc**2 + 2 * p.l * lc * c2)
    return np.stack([np.stack([m11, m12], -1), np.stack([m12, m22], -1)], -2)


def arm_coriolis(p: ArmParams, q, omega):
    """Christoffel-based C(q, omega); ``M' - 2C`` is skew-symmetric."""
    _, q2 = _split(q)
    w1, w2 = _split(omega)
    hh = -p.m * p.l * (p.l / 2) * np.sin(q2)
    row1 = np.stack([hh * w2, hh * (w1 + w2)], -1)
    row2 = np.stack([-hh * w1, np.zeros_like(hh * w1)], -1)
    return np.stack([row1, row2], -2)


def arm_gravity(p: ArmParams, q):
    q1, q2 = _split(q)
    lc = p.l / 2
    s12 = np.sin(q1 + q2)
    return np.stack([p.m * p.g0 * ((lc + p.l) * np.sin(q1) + lc * s12),
                     p.m * p.g0 * lc * s12], -1)


def arm_potential(p: ArmParams, q):
    q1, q2 = _split(q)
    lc = p.l / 2
    return -p.m * p.g0 * ((lc + p.l) * np.cos(q1) + lc * np.cos(q1 + q2))


def arm_end_effector(p: ArmParams, q):
    q1, q2 = _split(q)
    return p.l * np.stack([np.sin(q1) + np.sin(q1 + q2), -np.cos(q1) - np.cos(q1 + q2)], -1)


def arm_position_margins(p: ArmParams) -> list:
    """Four joint-limit margins then one squared-distance margin per obstacle."""
    margins = []
    zero2 = np.zeros((2, 2))
    for i in range(2):
        e = np.eye(2)[i]
        lo, hi = p.q_min[i], p.q_max[i]
        margins.append(PositionMargin(
            lambda q, i=i, lo=lo: np.asarray(q)[..., i] - lo,
            lambda q, e=e: np.broadcast_to(e, np.shape(q)).copy(),
            lambda q: np.broadcast_to(zero2, np.shape(q)[:-1] + (2, 2)).copy()))
    # order in the kernels: q1-lo, q2-lo, hi-q1, hi-q2
    for i in range(2):
        e = np.eye(2)[i]
        hi = p.q_max[i]
        margins.append(PositionMargin(
            lambda q, i=i, hi=hi: hi - np.asarray(q)[..., i],
            lambda q, e=e: np.broadcast_to(-e, np.shape(q)).copy(),
            lambda q: np.broadcast_to(zero2, np.shape(q)[:-1] + (2, 2)).copy()))
    r2 = p.obstacle_radius**2
    for c in np.asarray(p.obstacles, dtype=float):
        margins.append(_obstacle_margin(p, c, r2))
    return margins


def _obstacle_margin(p: ArmParams, c, r2) -> PositionMargin:
    l = p.l

    def parts(q):
        q1, q2 = _split(q)
        s1, c1, s12, c12 = np.sin(q1), np.cos(q1), np.sin(q1 + q2), np.cos(q1 + q2)
        d = arm_end_effector(p, q) - c
        # Jacobian columns of p(q) and their derivatives
        Jp = np.stack([np.stack([l * (c1 + c12), l * c12], -1),
                       np.stack([l * (s1 + s12), l * s12], -1)], -2)
        return d, Jp, (s1, c1, s12, c12)

    def value(q):
        d, _, _ = parts(q)
        return np.einsum("...i,...i->...", d, d) - r2

    def grad(q):
        d, Jp, _ = parts(q)
        return 2 * np.einsum("...ij,...i->...j", Jp, d)

    def hess(q):
        d, Jp, (s1, c1, s12, c12) = parts(q)
        # second derivatives of px and py w.r.t. q
        px11, px12 = -l * (s1 + s12), -l * s12
        py11, py12 = l * (c1 + c12), l * c12
        Hx = np.stack([np.stack([px11, px12], -1), np.stack([px12, px12], -1)], -2)
        Hy = np.stack([np.stack([py11, py12], -1), np.stack([py12, py12], -1)], -2)
        JtJ = np.einsum("...ki,...kj->...ij", Jp, Jp)
        return 2 * (JtJ + d[..., 0, None, None] * Hx + d[..., 1, None, None] * Hy)

    return PositionMargin(value, grad, hess)


def arm_nominal_controller(p: ArmParams, q, omega):
    """PD plus gravity compensation, as voltage through the static gain."""
    q = np.asarray(q, dtype=float)
    omega = np.asarray(omega, dtype=float)
    tau = p.kp * (p.q_target - q) - p.kd * omega + arm_gravity(p, q)
    return p.R / p.K_I * tau


# ---- system, barrier, controller --------------------------------------------

def _rows(a, n):
    a = np.asarray(a, dtype=float)
    return np.ascontiguousarray(a.reshape(-1, n)), a.shape[:-1]


def arm_system(p: ArmParams) -> SlowFastSystem:
    pv, _ = p.packed()

    def f(x, z, u):
        X, lead = _rows(x, 4)
        Z, _ = _rows(np.broadcast_to(z, lead + (2,)), 2)
        out = np.empty_like(X)
        K.f_batch(pv, X, Z, out)
        return out.reshape(lead + (4,))

    def g(z, x, u):
        z, x, u = (np.asarray(a, dtype=float) for a in (z, x, u))
        return (u - p.R * z - p.K_w * x[..., 2:4]) / p.L_tilde

    def z_eq(x, u):
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        return (u - p.K_w * x[..., 2:4]) / p.R

    def grad_z_eq(x, u):
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        G = np.zeros((2, 6))
        G[:, 2:4] = -p.K_w / p.R * np.eye(2)
        G[:, 4:6] = np.eye(2) / p.R
        return np.broadcast_to(G, lead + (2, 6)).copy()

    def reduced_affine(x):
        x = np.asarray(x, dtype=float)
        q, w = x[..., :2], x[..., 2:]
        Minv = np.linalg.inv(arm_mass_matrix(p, q))
        tau = (-p.B_f * w - np.einsum("...ij,...j->...i", arm_coriolis(p, q, w), w)
               - arm_gravity(p, q))
        d = np.concatenate([w, np.einsum("...ij,...j->...i", Minv, tau)], -1)
        B = np.zeros(x.shape[:-1] + (4, 2))
        B[..., 2:, :] = Minv * (p.K_I / p.R)
        return d, B

    wb = p.omega_box
    x_box = Box(np.r_[p.q_min, -wb, -wb], np.r_[p.q_max, wb, wb])
    return SlowFastSystem(4, 2, 2, f, g, z_eq, grad_z_eq, x_box,
                          reduced_affine=reduced_affine, name="arm")


def arm_barrier(p: ArmParams) -> Barrier:
    """Compiled LSE-of-lifted-margins barrier."""
    pv, obs = p.packed()

    def _eval(x):
        X, lead = _rows(x, 4)
        H = np.empty(X.shape[0])
        G = np.empty_like(X)
        K.barrier_batch(pv, obs, X, H, G)
        return H.reshape(lead), G.reshape(lead + (4,))

    return Barrier(lambda x: _eval(x)[0], lambda x: _eval(x)[1], ClassK(p.gamma), p.eta)


def arm_barrier_reference(p: ArmParams) -> Barrier:
    """Same barrier assembled from the generic numpy building blocks."""
    margins = arm_position_margins(p)

    def lifted(x):
        x = np.asarray(x, dtype=float)
        q, w = x[..., :2], x[..., 2:]
        vals, grads = zip(*(hocbf_lift(mg, p.gamma, q, w) for mg in margins))
        return np.stack(vals, -1), np.stack(grads, -2)

    def h(x):
        return lse_aggregate(lifted(x)[0], p.rho)

    def grad_h(x):
        v, g = lifted(x)
        return lse_gradient(v, g, p.rho)

    return Barrier(h, grad_h, ClassK(p.gamma), p.eta)


def arm_components(p: ArmParams):
    """Per-constraint lifted values ``h_j(x)``, shape ``(..., 4 + K)``."""
    pv, obs = p.packed()

    def comps(x):
        X, lead = _rows(x, 4)
        HJ = np.empty((X.shape[0], 4 + obs.shape[0]))
        K.components_batch(pv, obs, X, HJ)
        return HJ.reshape(lead + (HJ.shape[1],))

    return comps


def arm_controller(p: ArmParams) -> Controller:
    """Softplus-filtered nominal voltage (compiled)."""
    pv, obs = p.packed()

    def _eval(x):
        X, lead = _rows(x, 4)
        U = np.empty((X.shape[0], 2))
        bad = np.zeros(X.shape[0], dtype=np.bool_)
        K.policy_batch(pv, obs, X, U, bad)
        return U.reshape(lead + (2,)), bad.reshape(lead)

    return Controller(lambda x: _eval(x)[0], 2, infeasible=lambda x: _eval(x)[1],
                      meta={"filter": "softplus", "sigma": p.sigma})


def arm_controller_reference(p: ArmParams, barrier: Barrier | None = None) -> Controller:
    """Numpy route of :func:`arm_controller`, for cross-checks."""
    sys = arm_system(p)
    barrier = arm_barrier_reference(p) if barrier is None else barrier

    def policy(x):
        x = np.asarray(x, dtype=float)
        d, B = sys.reduced_affine(x)
        gh = barrier.grad_h(x)
        a = np.einsum("...nm,...n->...m", B, gh)
        b = np.einsum("...n,...n->...", gh, d) + barrier.alpha(barrier.h(x)) - barrier.eta
        u_des = arm_nominal_controller(p, x[..., :2], x[..., 2:])
        return safe_filter_smooth(AffineConstraint(a, b), u_des, p.sigma)

    return Controller(policy, 2, meta={"filter": "softplus", "sigma": p.sigma})


def arm_bundle(p: ArmParams | None = None) -> SafetyBundle:
    p = ArmParams() if p is None else p
    pv, obs = p.packed()
    sys = arm_system(p)
    barrier = arm_barrier(p)
    ctrl = arm_controller(p)
    cert = quadratic_certificate(-p.R / p.L_tilde * np.eye(2))
    x0 = np.r_[np.radians(p.q0_deg), p.omega0]
    z0 = sys.z_eq(x0, ctrl(x0)) + np.asarray(p.i0_offset, dtype=float)

    def closed_loop(X, Z, eps):
        n = X.shape[0]
        DX, DZ = np.empty((n, 4)), np.empty((n, 2))
        U = np.empty((n, 2))
        bad = np.zeros(n, dtype=np.bool_)
        K.closed_loop_batch(pv, obs, np.ascontiguousarray(X), np.ascontiguousarray(Z),
                            1.0 / eps, DX, DZ, U, bad)
        return DX, DZ, U, bad

    def bounds(X, xstep):
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty((X.shape[0], K.N_BOUNDS))
        K.bounds_batch(pv, obs, X, np.ascontiguousarray(xstep, dtype=float), out)
        return out

    return SafetyBundle("arm", sys, ctrl, barrier, cert, x0, z0, params=p,
                        closed_loop=closed_loop, pointwise_bounds=bounds,
                        components=arm_components(p), sweep_range=(0.001, 0.035, 10))
