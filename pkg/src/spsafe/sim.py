"""Fixed-step RK4 simulation of the closed loop, sweeps over eps and the
Monte Carlo check of the composite barrier."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cbf import Barrier
from .composite import EpsilonCertificate, LyapunovCertificate, SafetyBundle, max_over_ic
from .core import ContractViolation, Controller, DomainError, SlowFastSystem

log = logging.getLogger(__name__)

STIFFNESS_RATIO = 50.0


class DivergedError(RuntimeError):
    """Non-finite state; ``trajectory`` holds the samples recorded so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_f: float = 10.0
    record_every: int = 10
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not self.t_f > self.dt:
            raise DomainError("t_f must exceed dt")
        if self.record_every < 1:
            raise DomainError("record_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise DomainError("max_steps must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    xs: np.ndarray
    zs: np.ndarray
    us: np.ndarray
    h_vals: np.ndarray
    V_vals: np.ndarray
    eps: float
    dt_eff: float
    n_steps: int
    infeasible_steps: int = 0

    @property
    def min_h(self) -> float:
        return float(np.min(self.h_vals))

    @property
    def min_V(self) -> float:
        return float(np.min(self.V_vals))

    @property
    def violation_time(self) -> Optional[float]:
        return detect_violation(self)

    def summary(self) -> dict:
        return {"eps": self.eps, "min_h": self.min_h,
                "min_V": None if np.isnan(self.min_V) else self.min_V,
                "violation_time": self.violation_time,
                "infeasible_steps": self.infeasible_steps,
                "dt_eff": self.dt_eff, "n_steps": self.n_steps,
                "t_end": float(self.times[-1])}


def effective_step(dt: float, eps: float, ratio: float = STIFFNESS_RATIO) -> float:
    """Step cap resolving the fast time constant ``eps`` with ``ratio`` steps."""
    if not (dt > 0 and eps > 0):
        raise DomainError("dt and eps must be positive")
    return min(dt, eps / ratio)


def detect_violation(traj: Trajectory, threshold: float = 0.0) -> Optional[float]:
    """First time h drops below ``threshold``, linearly interpolated."""
    h = np.asarray(traj.h_vals) - threshold
    below = np.flatnonzero(h < 0)
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(traj.times[0])
    t0, t1 = traj.times[k - 1], traj.times[k]
    return float(t0 + (t1 - t0) * h[k - 1] / (h[k - 1] - h[k]))


def rk4_step(fun: Callable, t: float, y, dt: float):
    k1 = fun(t, y)
    k2 = fun(t + dt / 2, y + dt / 2 * k1)
    k3 = fun(t + dt / 2, y + dt / 2 * k2)
    k4 = fun(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_ode(fun: Callable, y0, t_f: float, dt: float):
    """Plain fixed-step RK4 for ``y' = fun(t, y)``; returns ``(times, ys)``."""
    n = max(1, math.ceil(t_f / dt - 1e-9))
    y = np.asarray(y0, dtype=float)
    ys = np.empty((n + 1,) + y.shape)
    ys[0] = y
    for k in range(n):
        y = rk4_step(fun, k * dt, y, dt)
        ys[k + 1] = y
    return np.arange(n + 1) * dt, ys


def _generic_field(sys: SlowFastSystem, ctrl: Controller):
    def field_(X, Z, eps):
        U = np.asarray(ctrl(X), dtype=float).reshape(X.shape[0], sys.n_input)
        bad = (np.asarray(ctrl.infeasible(X), dtype=bool) if ctrl.infeasible is not None
               else np.zeros(X.shape[0], dtype=bool))
        return sys.f(X, Z, U), sys.g(Z, X, U) / eps, U, bad

    return field_


def _run(field_, X0, Z0, eps, dt_eff, n_steps, record_every):
    """Batched RK4; returns recorded ``(steps, xs, zs, us, bad_counts, ok)``.

    Rows are independent initial conditions; arrays carry the record index
    first. ``ok`` is False when a non-finite state stopped the run.
    """
    X = np.array(X0, dtype=float)
    Z = np.array(Z0, dtype=float)
    idx = list(range(0, n_steps, record_every)) + [n_steps]
    n_rec = len(idx)
    xs = np.empty((n_rec,) + X.shape)
    zs = np.empty((n_rec,) + Z.shape)
    us = None
    bad_counts = np.zeros(X.shape[0], dtype=np.int64)
    r = 0
    h = dt_eff
    for k in range(n_steps + 1):
        dx1, dz1, U, bad = field_(X, Z, eps)
        if us is None:
            us = np.empty((n_rec,) + U.shape)
        if k == idx[r]:
            xs[r], zs[r], us[r] = X, Z, U
            r += 1
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
                return np.asarray(idx[:r]), xs[:r], zs[:r], us[:r], bad_counts, False
        if k == n_steps:
            break
        bad_counts += bad
        dx2, dz2, _, _ = field_(X + h / 2 * dx1, Z + h / 2 * dz1, eps)
        dx3, dz3, _, _ = field_(X + h / 2 * dx2, Z + h / 2 * dz2, eps)
        dx4, dz4, _, _ = field_(X + h * dx3, Z + h * dz3, eps)
        X = X + h / 6 * (dx1 + 2 * dx2 + 2 * dx3 + dx4)
        Z = Z + h / 6 * (dz1 + 2 * dz2 + 2 * dz3 + dz4)
    return np.asarray(idx), xs, zs, us, bad_counts, True


def _values(sys, barrier, cert, xs, zs, us):
    h = barrier.h(xs)
    if cert is None:
        return h, np.full_like(h, np.nan)
    return h, h - cert.U(zs - sys.z_eq(xs, us))


def _n_steps(t_f, dt_eff, max_steps):
    n = max(1, math.ceil(t_f / dt_eff - 1e-9))
    return n if max_steps is None else min(n, max_steps)


def integrate(sys: SlowFastSystem, ctrl: Controller, barrier: Barrier,
              cert: Optional[LyapunovCertificate], x0, z0, eps: float,
              dt: float = 1e-3, t_f: float = 10.0, record_every: int = 10,
              max_steps: Optional[int] = None,
              closed_loop: Optional[Callable] = None) -> Trajectory:
    """RK4 on the stacked ``(x, z)`` with step ``min(dt, eps/50)``.

    The policy is evaluated at every stage. States are recorded every
    ``record_every`` steps and at the final step. ``closed_loop`` may supply a
    fused field ``(X, Z, eps) -> (dX, dZ, U, infeasible)``.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    SimConfig(dt, t_f, record_every, max_steps)
    x0 = np.asarray(x0, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    sys.check_dims(x0, z0)
    dt_eff = effective_step(dt, eps)
    n = _n_steps(t_f, dt_eff, max_steps)
    field_ = closed_loop if closed_loop is not None else _generic_field(sys, ctrl)
    steps, xs, zs, us, bad, ok = _run(field_, x0[None], z0[None], eps, dt_eff, n, record_every)
    xs, zs, us = xs[:, 0], zs[:, 0], us[:, 0]
    h, V = _values(sys, barrier, cert, xs, zs, us)
    traj = Trajectory(steps * dt_eff, xs, zs, us, h, V, eps, dt_eff, n, int(bad[0]))
    if not ok:
        raise DivergedError(f"non-finite state at t={traj.times[-1]:.6g}", traj)
    return traj


def simulate(bundle: SafetyBundle, eps: float, config: SimConfig = SimConfig(),
             x0=None, z0=None) -> Trajectory:
    return integrate(bundle.system, bundle.controller, bundle.barrier, bundle.certificate,
                     bundle.x0 if x0 is None else x0, bundle.z0 if z0 is None else z0,
                     eps, config.dt, config.t_f, config.record_every, config.max_steps,
                     bundle.closed_loop)


# ---- sweeps -----------------------------------------------------------------

@dataclass
class SweepRun:
    eps: float
    min_h: float = math.nan
    min_V: float = math.nan
    violation_time: Optional[float] = None
    runtime: float = 0.0
    infeasible_steps: int = 0
    error: Optional[str] = None
    trajectory: Optional[Trajectory] = None

    @property
    def safe(self) -> bool:
        return self.error is None and self.min_h >= 0

    def to_dict(self) -> dict:
        return {"eps": self.eps, "min_h": _num(self.min_h), "min_V": _num(self.min_V),
                "violation_time": self.violation_time, "runtime": self.runtime,
                "infeasible_steps": self.infeasible_steps, "error": self.error}


def _num(v):
    return None if v is None or not math.isfinite(v) else v


@dataclass
class SweepReport:
    eps_values: list
    runs: list
    empirical_threshold: Optional[float]
    monotone: bool
    eps_bar: Optional[float] = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"eps_values": list(self.eps_values),
                "runs": [r.to_dict() for r in self.runs],
                "empirical_threshold": self.empirical_threshold,
                "monotone": self.monotone, "eps_bar": self.eps_bar,
                "settings": self.settings}


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SPSAFE_THREADS", "1")))
    except ValueError:
        return 1


def sweep(bundle: SafetyBundle, eps_min: float, eps_max: float, count: int,
          config: SimConfig = SimConfig(), keep_trajectories: bool = False,
          eps_bar: Optional[float] = None, threads: Optional[int] = None,
          monotone_tol: float = 1e-6) -> SweepReport:
    """One run per linearly spaced eps; failures are recorded, not raised."""
    if count < 2:
        raise ContractViolation("a sweep needs at least 2 values")
    if not 0 < eps_min < eps_max:
        raise DomainError("need 0 < eps_min < eps_max")
    eps_values = [float(e) for e in np.linspace(eps_min, eps_max, count)]

    def one(eps):
        run = SweepRun(eps)
        t0 = time.perf_counter()
        try:
            traj = simulate(bundle, eps, config)
        except DivergedError as exc:
            traj = exc.trajectory
            run.error = str(exc)
        run.runtime = time.perf_counter() - t0
        if traj is not None and len(traj.times):
            run.min_h, run.min_V = traj.min_h, traj.min_V
            run.violation_time = traj.violation_time
            run.infeasible_steps = traj.infeasible_steps
            if keep_trajectories:
                run.trajectory = traj
        log.info("%s eps=%.6g min_h=%.4g", bundle.name, eps, run.min_h)
        return run

    threads = thread_count() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(one, eps_values))
    else:
        runs = [one(e) for e in eps_values]
    safe = [r.eps for r in runs if r.safe]
    mins = np.array([r.min_h for r in runs])
    monotone = bool(np.all(np.diff(mins) <= monotone_tol))
    return SweepReport(eps_values, runs, max(safe) if safe else None, monotone, eps_bar,
                       {"dt": config.dt, "t_f": config.t_f, "record_every": config.record_every,
                        "integrator": "rk4", "stiffness_ratio": STIFFNESS_RATIO})


# ---- Monte Carlo check of the composite barrier ------------------------------

@dataclass
class TheoremReport:
    passed: bool
    n_runs: int
    eps_values: list
    counterexamples: list
    out_of_certificate: bool
    vacuous: bool
    horizons: list
    n_ic: int
    eps_bar: float
    tolerance: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def theorem_check(bundle: SafetyBundle, cert_eps: EpsilonCertificate, n_ic: int,
                  config: SimConfig = SimConfig(record_every=1, max_steps=20_000),
                  seed: int = 0, n_eps: int = 20, force_eps: Optional[float] = None,
                  tol: float = 1e-6) -> TheoremReport:
    """Simulate ``n_ic`` initial conditions in C_V at ``n_eps`` random eps.

    Each eps is drawn uniformly in ``(0, eps_bar)`` unless ``force_eps`` is
    given; a forced eps at or above ``eps_bar`` is flagged as out of the
    certificate, so its outcome is informational only. A run fails when
    ``min V < -tol`` on any recorded sample. The horizon is
    ``min(t_f, max_steps * dt_eff)`` per eps.
    """
    if bundle.certificate is None:
        raise DomainError(f"{bundle.name}: no boundary-layer certificate")
    rng = np.random.default_rng(seed)
    eb = cert_eps.eps_bar
    warnings = []
    if force_eps is not None:
        eps_values = [float(force_eps)]
    else:
        if not (math.isfinite(eb) and eb > 0):
            raise DomainError("theorem_check needs a finite positive eps_bar")
        draws = rng.random(n_eps)
        while np.any(draws == 0):
            draws[draws == 0] = rng.random(int(np.sum(draws == 0)))
        eps_values = sorted(float(eb * d) for d in draws)
    out = force_eps is not None and not force_eps < eb
    if n_ic <= 0:
        warnings.append("no initial conditions requested; vacuous pass")
        log.warning(warnings[-1])
        return TheoremReport(True, 0, eps_values, [], out, True, [], 0, eb, tol, warnings)
    sys, ctrl = bundle.system, bundle.controller
    X0, Z0 = max_over_ic(bundle.barrier, bundle.certificate, sys, ctrl, sys.x_box,
                         n_ic, rng)
    if len(X0) < n_ic:
        # top up until the requested count is reached
        for _ in range(100):
            if len(X0) >= n_ic:
                break
            Xa, Za = max_over_ic(bundle.barrier, bundle.certificate, sys, ctrl,
                                 sys.x_box, n_ic, rng)
            X0, Z0 = np.concatenate([X0, Xa]), np.concatenate([Z0, Za])
        X0, Z0 = X0[:n_ic], Z0[:n_ic]
    if len(X0) == 0:
        warnings.append("no initial condition found in C_V; vacuous pass")
        return TheoremReport(True, 0, eps_values, [], out, True, [], 0, eb, tol, warnings)
    field_ = bundle.closed_loop or _generic_field(sys, ctrl)
    counter, horizons = [], []
    for eps in eps_values:
        dt_eff = effective_step(config.dt, eps)
        n = _n_steps(config.t_f, dt_eff, config.max_steps)
        horizons.append(n * dt_eff)
        steps, xs, zs, us, _, ok = _run(field_, X0, Z0, eps, dt_eff, n, config.record_every)
        _, V = _values(sys, bundle.barrier, bundle.certificate, xs, zs, us)
        times = steps * dt_eff
        for i in range(len(X0)):
            v = V[:, i]
            bad = np.flatnonzero(~(v >= -tol))
            if bad.size or not ok:
                k = int(bad[0]) if bad.size else len(times) - 1
                counter.append({"eps": eps, "x0": X0[i].tolist(), "z0": Z0[i].tolist(),
                                "violation_time": float(times[k]),
                                "min_V": float(np.nanmin(v)) if np.any(np.isfinite(v)) else None})
    if out:
        warnings.append("eps at or above eps_bar: outside the certificate, informational")
    passed = not counter
    return TheoremReport(passed, len(eps_values) * len(X0), eps_values, counter, out, False,
                         horizons, len(X0), eb, tol, warnings)
