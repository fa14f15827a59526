import math

import numpy as np
import pytest

from spsafe.cbf import Barrier
from spsafe.composite import ConstantSet, epsilon_bar, quadratic_certificate
from spsafe.core import Box, ClassK, ContractViolation, Controller, DomainError, SlowFastSystem
from spsafe.sim import (DivergedError, SimConfig, Trajectory, detect_violation, effective_step,
                        integrate, simulate, sweep, theorem_check)


def _traj(times, h):
    n = len(times)
    return Trajectory(np.asarray(times, float), np.zeros((n, 1)), np.zeros((n, 1)),
                      np.zeros((n, 1)), np.asarray(h, float), np.zeros(n), 1.0, 0.1, n)


def test_detect_violation_cases():
    assert detect_violation(_traj([0, 1, 2], [0.5, 0.2, 0.1])) is None
    assert detect_violation(_traj([1, 2], [0.2, -0.2])) == pytest.approx(1.5)
    assert detect_violation(_traj([3, 4], [-0.1, 0.5])) == 3.0


def test_effective_step_guard():
    assert effective_step(1e-2, 1e-3) == pytest.approx(2e-5)
    assert effective_step(1e-3, 1.0) == 1e-3
    with pytest.raises(DomainError):
        effective_step(1e-3, 0.0)


def _frozen_lag():
    """x frozen, z relaxes to x: z(t) = x + (z0 - x) exp(-t / eps)."""
    return SlowFastSystem(
        1, 1, 1, lambda x, z, u: np.zeros_like(np.asarray(x, float)),
        lambda z, x, u: np.asarray(u) + np.asarray(x) - np.asarray(z),
        lambda x, u: np.asarray(u) + np.asarray(x),
        lambda x, u: np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (1, 2)),
        Box([-1], [1]))


def _zero_ctrl():
    return Controller(lambda x: np.zeros(np.shape(x)[:-1] + (1,)), 1)


def _unit_barrier():
    return Barrier(lambda x: 1.0 - np.asarray(x)[..., 0] ** 2, lambda x: -2 * np.asarray(x),
                   ClassK(1.0), 0.1)


def test_rk4_fourth_order_on_fast_transient():
    s = _frozen_lag()
    errs = []
    for dt in (0.02, 0.01):
        tr = integrate(s, _zero_ctrl(), _unit_barrier(), None, [0.3], [1.3], 1.0, dt, 1.0, 1)
        errs.append(abs(tr.zs[-1, 0] - (0.3 + math.exp(-tr.times[-1]))))
    ratio = errs[0] / errs[1]
    print("rk4 errors", errs, "ratio", ratio)
    assert 12 <= ratio <= 20


def test_zero_dynamics_keep_slow_state_exactly():
    s = _frozen_lag()
    tr = integrate(s, _zero_ctrl(), _unit_barrier(), None, [0.25], [0.9], 1.0, 1e-3, 1000.0,
                   10_000)
    assert tr.n_steps == 1_000_000
    assert np.all(tr.xs[:, 0] == 0.25)


def test_toy_small_eps_is_safe(toy):
    tr = simulate(toy, 0.001)
    print("toy eps=0.001 min_h", tr.min_h, "min_V", tr.min_V)
    assert tr.min_h >= 0 and tr.min_V >= 0
    assert tr.violation_time is None


def test_toy_large_eps_violates(toy):
    tr = simulate(toy, 2.0)
    print("toy eps=2 min_h", tr.min_h, "violation at", tr.violation_time)
    assert tr.min_h < 0
    assert math.isfinite(tr.violation_time)


def test_trajectory_invariants(toy):
    tr = simulate(toy, 0.05, SimConfig(t_f=2.0))
    assert np.all(np.diff(tr.times) > 0)
    assert len(tr.times) == len(tr.xs) == len(tr.zs) == len(tr.us) == len(tr.h_vals)
    assert tr.min_h == np.min(tr.h_vals)
    assert tr.times[-1] == pytest.approx(2.0)


def test_runs_are_bitwise_deterministic(arm):
    a = simulate(arm, 0.01, SimConfig(t_f=0.5))
    b = simulate(arm, 0.01, SimConfig(t_f=0.5))
    assert np.array_equal(a.xs, b.xs) and np.array_equal(a.zs, b.zs)


def test_fused_and_generic_routes_agree(toy):
    tr1 = simulate(toy, 0.05, SimConfig(t_f=1.0))
    tr2 = integrate(toy.system, toy.controller, toy.barrier, toy.certificate, toy.x0, toy.z0,
                    0.05, t_f=1.0)
    assert np.allclose(tr1.xs, tr2.xs, atol=1e-12)


def test_divergence_carries_partial_trajectory():
    s = SlowFastSystem(1, 1, 0, lambda x, z, u: np.asarray(x) ** 2,
                       lambda z, x, u: -np.asarray(z), lambda x, u: np.zeros_like(x),
                       lambda x, u: np.zeros(np.shape(x)[:-1] + (1, 1)), Box([0], [1]))
    ctrl = Controller(lambda x: np.zeros(np.shape(x)[:-1] + (0,)), 0)
    with pytest.raises(DivergedError) as info, np.errstate(over="ignore", invalid="ignore"):
        integrate(s, ctrl, _unit_barrier(), None, [1.0], [0.0], 1.0, 1e-2, 5.0, 1)
    tr = info.value.trajectory
    print("diverged after", len(tr.times), "samples")
    assert tr is not None and len(tr.times) > 10


def test_safe_arm_runs_keep_every_component_nonnegative(arm):
    tr = simulate(arm, 0.001, SimConfig(t_f=3.0))
    assert tr.min_h >= 0
    comps = arm.components(tr.xs)
    print("smallest lifted component", comps.min())
    assert comps.min() >= 0


def test_sweep_grid_and_threshold(toy):
    rep = sweep(toy, 0.05, 2.0, 4, SimConfig(t_f=10.0))
    assert rep.eps_values == sorted(rep.eps_values)
    assert rep.eps_values[0] == 0.05 and rep.eps_values[-1] == 2.0
    safe = [r.eps for r in rep.runs if r.min_h >= 0]
    assert rep.empirical_threshold == max(safe)
    rep2 = sweep(toy, 0.1, 0.2, 2, SimConfig(t_f=1.0))
    assert rep2.eps_values == [0.1, 0.2]


def test_sweep_arm_grid_values(arm):
    rep = sweep(arm, 0.001, 0.035, 10, SimConfig(t_f=0.02))
    assert rep.eps_values[1] == pytest.approx(0.004778, abs=1e-6)


def test_sweep_rejects_bad_arguments(toy):
    with pytest.raises(ContractViolation):
        sweep(toy, 0.1, 0.2, 1)
    with pytest.raises(DomainError):
        sweep(toy, 0.2, 0.1, 3)


def test_sweep_threads_do_not_change_results(toy, monkeypatch):
    cfg = SimConfig(t_f=2.0)
    serial = sweep(toy, 0.05, 1.0, 4, cfg, threads=1)
    pooled = sweep(toy, 0.05, 1.0, 4, cfg, threads=3)
    assert [r.min_h for r in serial.runs] == [r.min_h for r in pooled.runs]


def _toy_eps(toy):
    from spsafe.composite import estimate_constants
    c = estimate_constants(toy.system, toy.controller, toy.barrier, toy.system.x_box, 100,
                           cert=toy.certificate)
    return epsilon_bar(c, toy.certificate, toy.barrier.eta, 0.5)


def test_theorem_check_toy_small_budget(toy):
    ec = _toy_eps(toy)
    rep = theorem_check(toy, ec, 10, SimConfig(record_every=1, max_steps=2000), n_eps=3)
    print("eps_bar", ec.eps_bar, "runs", rep.n_runs, "counterexamples", rep.counterexamples)
    assert rep.passed and rep.n_runs == 30
    assert all(0 < e < ec.eps_bar for e in rep.eps_values)


def test_theorem_check_forced_eps_is_flagged(toy):
    ec = _toy_eps(toy)
    rep = theorem_check(toy, ec, 5, SimConfig(record_every=1, max_steps=500),
                        force_eps=10 * ec.eps_bar)
    assert rep.out_of_certificate


def test_theorem_check_without_initial_conditions(toy):
    ec = _toy_eps(toy)
    rep = theorem_check(toy, ec, 0)
    assert rep.passed and rep.vacuous and rep.warnings


def test_theorem_check_reports_counterexamples():
    """A deliberately wrong certificate must surface violations."""
    s = _frozen_lag()
    bar = _unit_barrier()
    ctrl = _zero_ctrl()
    from spsafe.composite import SafetyBundle
    # U grows along the flow: z' = +z in stretched time breaks V >= 0
    bad = SlowFastSystem(1, 1, 1, s.f, lambda z, x, u: np.asarray(z) - np.asarray(u) - np.asarray(x),
                         s.z_eq, s.grad_z_eq, Box([-1], [1]))
    cert = quadratic_certificate(-np.eye(1))
    bundle = SafetyBundle("bad", bad, ctrl, bar, cert, np.zeros(1), np.zeros(1))
    consts = ConstantSet(1, 1, 1, 1, 1, 1, 1, 1)
    ec = epsilon_bar(consts, cert, 0.1, 0.5)
    rep = theorem_check(bundle, ec, 5, SimConfig(dt=1e-2, t_f=1.0, record_every=1), n_eps=2)
    print("counterexamples", len(rep.counterexamples))
    assert not rep.passed
    ce = rep.counterexamples[0]
    assert set(ce) >= {"eps", "x0", "z0", "violation_time"}
