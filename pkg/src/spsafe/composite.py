"""Composite barrier ``V = h - U(z - z_eq_pi)``, constants and the eps bound."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .cbf import Barrier
from .core import Box, ContractViolation, Controller, DomainError, SlowFastSystem

log = logging.getLogger(__name__)


class CertificateError(ValueError):
    """The boundary layer admits no quadratic certificate."""


class EstimationError(ValueError):
    """Constant estimation found no sample inside the safe set."""


@dataclass(frozen=True)
class LyapunovCertificate:
    """Boundary-layer Lyapunov function with its quadratic bounds.

    ``b1 |z|^2 <= U <= b2 |z|^2``, ``grad U . g_bl <= -b3 |z|^2`` and
    ``|grad U| <= b4 |z|``.
    """

    U: Callable
    grad_U: Callable
    b1: float
    b2: float
    b3: float
    b4: float
    P: Optional[np.ndarray] = None

    def __post_init__(self):
        if min(self.b1, self.b2, self.b3, self.b4) <= 0:
            raise CertificateError("certificate constants must be positive")
        if self.b1 > self.b2:
            raise CertificateError("b1 must not exceed b2")

    def violations(self, sys: SlowFastSystem, Zt, X, Uin) -> dict:
        """Largest violation of each of the four inequalities on samples.

        Values <= 0 mean the inequality holds at every sample.
        """
        Zt = np.asarray(Zt, dtype=float)
        n2 = np.einsum("...i,...i->...", Zt, Zt)
        u = self.U(Zt)
        gu = self.grad_U(Zt)
        gbl = sys.g(Zt + sys.z_eq(X, Uin), X, Uin)
        return {
            "lower": float(np.max(self.b1 * n2 - u)),
            "upper": float(np.max(u - self.b2 * n2)),
            "decrease": float(np.max(np.einsum("...i,...i->...", gu, gbl) + self.b3 * n2)),
            "gradient": float(np.max(np.linalg.norm(gu, axis=-1) - self.b4 * np.sqrt(n2))),
        }


@dataclass(frozen=True)
class ConstantSet:
    """Bounds over C entering the eps bound; K1 and K2 are derived."""

    L_f: float
    L_g: float
    L_h: float
    L_rs: float
    L_zeqpi: float
    L_pi: float
    L_alpha: float
    b4: float
    inflation: float = 1.0
    grid: Optional[int] = None
    n_safe: Optional[int] = None

    def __post_init__(self):
        for f in ("L_f", "L_g", "L_h", "L_rs", "L_zeqpi", "L_pi", "L_alpha", "b4"):
            v = getattr(self, f)
            if not (v >= 0):
                raise DomainError(f"{f} must be nonnegative, got {v}")

    @property
    def K1(self) -> float:
        return self.L_h * self.L_f + self.b4 * self.L_zeqpi * self.L_rs

    @property
    def K2(self) -> float:
        return self.b4 * self.L_zeqpi * self.L_f

    def raw(self) -> dict:
        """Pre-inflation sups (L_alpha and b4 are never inflated)."""
        k = self.inflation
        return {"L_f": self.L_f / k, "L_g": self.L_g / k, "L_h": self.L_h / k,
                "L_rs": self.L_rs / k, "L_zeqpi": self.L_zeqpi / k, "L_pi": self.L_pi / k}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["K1"], d["K2"] = self.K1, self.K2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstantSet":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class EpsilonCertificate:
    eps1: float
    eps2: float
    eps_bar: float
    nu: float
    eta: float
    b2: float
    b3: float
    constants: ConstantSet
    certificate_valid: bool

    def to_dict(self) -> dict:
        return {
            "eps1": _json_float(self.eps1), "eps2": _json_float(self.eps2),
            "eps_bar": _json_float(self.eps_bar), "nu": self.nu, "eta": self.eta,
            "b2": self.b2, "b3": self.b3, "certificate_valid": self.certificate_valid,
            "constants": self.constants.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpsilonCertificate":
        try:
            return cls(eps1=float(d["eps1"]), eps2=float(d["eps2"]),
                       eps_bar=float(d["eps_bar"]), nu=float(d["nu"]),
                       eta=float(d["eta"]), b2=float(d["b2"]), b3=float(d["b3"]),
                       constants=ConstantSet.from_dict(d["constants"]),
                       certificate_valid=bool(d["certificate_valid"]))
        except (KeyError, TypeError) as exc:
            raise ContractViolation(f"malformed certificate: {exc}") from exc


def _json_float(v: float):
    return v if math.isfinite(v) else str(v)


@dataclass(frozen=True)
class SafetyBundle:
    """Everything needed to simulate and certify one closed loop.

    ``closed_loop(X, Z, eps)`` optionally fuses policy and both vector
    fields for speed, returning ``(dX, dZ, U, infeasible)``;
    ``pointwise_bounds(X, xstep)`` optionally replaces the numpy route of
    :func:`pointwise_bounds`.
    """

    name: str
    system: SlowFastSystem
    controller: Controller
    barrier: Barrier
    certificate: Optional[LyapunovCertificate]
    x0: np.ndarray
    z0: np.ndarray
    params: Any = None
    closed_loop: Optional[Callable] = None
    pointwise_bounds: Optional[Callable] = None
    components: Optional[Callable] = None
    sweep_range: tuple = (0.01, 1.0, 10)

    def V(self, x, z):
        return composite_cbf(self.barrier, self.certificate, self.system,
                             self.controller, x, z)


def zeq_pi(sys: SlowFastSystem, ctrl: Controller, x):
    """Fast equilibrium under the closed-loop policy, ``z_eq(x, pi(x))``."""
    x = np.asarray(x, dtype=float)
    return sys.z_eq(x, ctrl(x))


def composite_cbf(barrier: Barrier, cert: LyapunovCertificate, sys: SlowFastSystem,
                  ctrl: Controller, x, z):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    return barrier.h(x) - cert.U(z - zeq_pi(sys, ctrl, x))


def in_Cv(barrier, cert, sys, ctrl, x, z):
    return composite_cbf(barrier, cert, sys, ctrl, x, z) >= 0


def _lyapunov_identity(A: np.ndarray) -> np.ndarray:
    """Solve ``A^T P + P A = -I`` through the Kronecker-vectorized system."""
    p = A.shape[0]
    eye = np.eye(p)
    K = np.kron(eye, A.T) + np.kron(A.T, eye)
    P = np.linalg.solve(K, -eye.reshape(-1)).reshape(p, p)
    return 0.5 * (P + P.T)


def quadratic_certificate(A_bl) -> LyapunovCertificate:
    """Certificate ``U = z^T P z`` for a linear boundary layer ``dz/dtau = A z``."""
    A = np.atleast_2d(np.asarray(A_bl, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ContractViolation("boundary-layer matrix must be square")
    if not np.all(np.linalg.eigvals(A).real < 0):
        raise CertificateError("boundary-layer matrix is not Hurwitz")
    P = _lyapunov_identity(A)
    lam = np.linalg.eigvalsh(P)
    if lam[0] <= 0:
        raise CertificateError("Lyapunov solution is not positive definite")

    def U(zt):
        zt = np.asarray(zt, dtype=float)
        return np.einsum("...i,ij,...j->...", zt, P, zt)

    def grad_U(zt):
        return 2.0 * np.asarray(zt, dtype=float) @ P

    return LyapunovCertificate(U, grad_U, float(lam[0]), float(lam[-1]), 1.0,
                               2.0 * float(lam[-1]), P)


# ---- constant estimation ----------------------------------------------------

BOUND_COLUMNS = ("h", "L_h", "L_rs", "L_zeqpi", "L_f", "L_g", "L_pi")


def _opnorm(J):
    return np.linalg.norm(J, ord=2, axis=(-2, -1))


def pointwise_bounds(sys: SlowFastSystem, ctrl: Controller, barrier: Barrier, X, xstep):
    """Per-point ingredients of the constant set, columns as ``BOUND_COLUMNS``.

    Jacobians are central differences: policy and x-axes with step
    ``xstep``, z- and u-axes with ``1e-5 max(1, |value|)``. The Jacobians of
    f and g are taken at the closed-loop point ``(x, z_eq_pi(x), pi(x))``.
    Rows with h < 0 carry NaN outside the first column.
    """
    X = np.asarray(X, dtype=float)
    n, p, m = sys.n_slow, sys.n_fast, sys.n_input
    out = np.full((X.shape[0], len(BOUND_COLUMNS)), np.nan)
    h = barrier.h(X)
    out[:, 0] = h
    safe = h >= 0
    if not np.any(safe):
        return out
    Xs = X[safe]
    u = ctrl(Xs)
    zs = sys.z_eq(Xs, u)
    out[safe, 1] = np.linalg.norm(barrier.grad_h(Xs), axis=-1)
    out[safe, 2] = np.linalg.norm(sys.f(Xs, zs, u), axis=-1)
    Jpi = np.zeros((Xs.shape[0], m, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = xstep[i]
        Jpi[..., i] = (ctrl(Xs + e) - ctrl(Xs - e)) / (2 * xstep[i])
    G = sys.grad_z_eq(Xs, u)
    Jz = G[..., :n] + G[..., n:] @ Jpi
    out[safe, 3] = _opnorm(Jz)
    out[safe, 6] = _opnorm(Jpi) if m else 0.0
    base = np.concatenate([Xs, zs, u], axis=-1)
    steps = np.concatenate([np.broadcast_to(xstep, Xs.shape),
                            1e-5 * np.maximum(1.0, np.abs(base[:, n:]))], axis=-1)

    def split(v):
        return v[:, :n], v[:, n:n + p], v[:, n + p:]

    Jf = np.zeros((Xs.shape[0], n, n + p + m))
    Jg = np.zeros((Xs.shape[0], p, n + p + m))
    for i in range(n + p + m):
        vp, vm = base.copy(), base.copy()
        vp[:, i] += steps[:, i]
        vm[:, i] -= steps[:, i]
        xp, zp, up = split(vp)
        xm, zm, um = split(vm)
        d = 2 * steps[:, i:i + 1]
        Jf[..., i] = (sys.f(xp, zp, up) - sys.f(xm, zm, um)) / d
        Jg[..., i] = (sys.g(zp, xp, up) - sys.g(zm, xm, um)) / d
    out[safe, 4] = _opnorm(Jf)
    out[safe, 5] = _opnorm(Jg)
    return out


def _grid_chunks(box: Box, n: int, chunk: int):
    axes = [np.linspace(a, b, n) for a, b in zip(box.lo, box.hi)]
    total = n ** box.dim
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), (n,) * box.dim)
        yield np.stack([ax[i] for ax, i in zip(axes, idx)], axis=-1)


def estimate_constants(sys: SlowFastSystem, ctrl: Controller, barrier: Barrier, box: Box,
                       grid: int, inflation: float = 1.1,
                       cert: Optional[LyapunovCertificate] = None,
                       pointwise: Optional[Callable] = None,
                       chunk: int = 200_000) -> ConstantSet:
    """Grid sups over ``{grid in box} ∩ {h >= 0}``, inflated by ``inflation``.

    ``pointwise(X, xstep)`` may replace the numpy route (same columns).
    """
    if grid < 2:
        raise ContractViolation("grid needs at least 2 points per axis")
    if inflation < 1:
        raise DomainError("inflation factor must be >= 1")
    xstep = 1e-5 * box.width
    if pointwise is None:
        def pointwise(X, xstep):
            return pointwise_bounds(sys, ctrl, barrier, X, xstep)
    best = np.zeros(len(BOUND_COLUMNS) - 1)
    n_safe = 0
    for X in _grid_chunks(box, grid, chunk):
        B = pointwise(X, xstep)
        safe = B[:, 0] >= 0
        if np.any(safe):
            n_safe += int(safe.sum())
            best = np.maximum(best, B[safe, 1:].max(axis=0))
    if n_safe == 0:
        raise EstimationError(f"{sys.name}: no grid point with h >= 0")
    if not np.all(np.isfinite(best)):
        raise EstimationError(f"{sys.name}: non-finite bound {best}")
    L_h, L_rs, L_zeqpi, L_f, L_g, L_pi = (float(v) * inflation for v in best)
    log.info("%s: %d/%d grid points in C", sys.name, n_safe, grid ** box.dim)
    return ConstantSet(L_f=L_f, L_g=L_g, L_h=L_h, L_rs=L_rs, L_zeqpi=L_zeqpi, L_pi=L_pi,
                       L_alpha=barrier.alpha.lipschitz,
                       b4=cert.b4 if cert is not None else 0.0,
                       inflation=inflation, grid=grid, n_safe=n_safe)


def epsilon_bar(consts: ConstantSet, cert: LyapunovCertificate, eta: float,
                nu: float = 0.5) -> EpsilonCertificate:
    """Timescale-separation bound below which C_V is forward invariant.

    Ratios with a vanishing denominator are +inf and drop out of the min.
    """
    if not 0 < nu < 1:
        raise DomainError(f"nu must lie in (0, 1), got {nu}")
    if not eta > 0:
        raise DomainError("eta must be positive")
    c = dataclasses.replace(consts, b4=cert.b4)
    b2, b3 = cert.b2, cert.b3
    K1, K2 = c.K1, c.K2
    eps1 = nu * b3 / K2 if K2 > 0 else math.inf
    den = K1 * K1 + 4 * eta * K2
    eps2 = min(eps1, 4 * eta * nu * b3 / den if den > 0 else math.inf)
    lab = c.L_alpha * b2
    eps = min(eps2, (1 - nu) * b3 / lab if lab > 0 else math.inf)
    valid = bool(math.isfinite(eps) and eps > 0 and all(
        math.isfinite(v) for v in (K1, K2, c.L_alpha)))
    return EpsilonCertificate(eps1, eps2, eps, nu, eta, b2, b3, c, valid)


def max_over_ic(barrier: Barrier, cert: LyapunovCertificate, sys: SlowFastSystem,
                ctrl: Controller, box: Box, n_samples: int,
                rng: Optional[np.random.Generator] = None,
                zt_radius: Optional[float] = None):
    """Rejection-sample initial conditions inside C_V.

    ``x`` is uniform in ``box``; the fast state is drawn in error
    coordinates, ``z = z_eq_pi(x) + zt`` with ``zt`` uniform in
    ``[-zt_radius, zt_radius]^p``. The default radius
    ``sqrt(max h / b1)`` covers every ``zt`` compatible with ``V >= 0``.
    Returns ``(X0, Z0)``, possibly with fewer than ``n_samples`` rows.
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    X = box.sample(rng, n_samples)
    h = barrier.h(X)
    if zt_radius is None:
        zt_radius = math.sqrt(max(float(h.max()), 0.0) / cert.b1)
    Zt = (2 * rng.random((n_samples, sys.n_fast)) - 1) * zt_radius
    Z = zeq_pi(sys, ctrl, X) + Zt
    keep = (h - cert.U(Zt)) >= 0
    keep &= in_Cv(barrier, cert, sys, ctrl, X, Z)
    return X[keep], Z[keep]
