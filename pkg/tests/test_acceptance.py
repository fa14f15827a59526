"""End-to-end acceptance criteria, one pass/fail line each.

Run alone with ``pytest tests/test_acceptance.py -s``; the verdict lines are
also collected in the terminal summary.
"""

import math
import time

import numpy as np

from spsafe.cbf import (AffineConstraint, hocbf_lift, lse_aggregate, lse_gradient,
                        safe_filter_hard, safe_filter_smooth)
from spsafe.composite import (ConstantSet, composite_cbf, epsilon_bar, estimate_constants,
                              quadratic_certificate, zeq_pi)
from spsafe.core import equilibrium_residual
from spsafe.sim import SimConfig, integrate, simulate, sweep, theorem_check
from spsafe.systems import (ArmParams, arm_coriolis, arm_mass_matrix, arm_position_margins,
                            qp_oracle, qp_reference)


def _fd_grad(fun, x, step=1e-6):
    return np.stack([(fun(x + e) - fun(x - e)) / (2 * step) for e in np.eye(x.size) * step], -1)


def _rel(g, fd):
    return float(np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g)))


# ---- 1. arm sweep -------------------------------------------------------------

def test_arm_sweep_reproduction(arm, verdict):
    t0 = time.perf_counter()
    rep = sweep(arm, 0.001, 0.035, 10, SimConfig(t_f=10.0))
    elapsed = time.perf_counter() - t0
    for r in rep.runs:
        print(f"  eps={r.eps:.5f} min_h={r.min_h:+.4f}")
    first, last = rep.runs[0], rep.runs[-1]
    thr = rep.empirical_threshold
    ok = (first.min_h >= 0 and last.min_h < 0 and thr is not None
          and 0.001 <= thr < 0.035 and elapsed <= 300)
    assert verdict("1 arm sweep", ok,
                   f"min_h(0.001)={first.min_h:.3g}, min_h(0.035)={last.min_h:.3g}, "
                   f"threshold={thr}, {elapsed:.0f}s")


# ---- 2. primal-dual sweep -----------------------------------------------------

def _qp_gap(pd, eps):
    tr = simulate(pd, eps, SimConfig(t_f=10.0, record_every=1))
    late = tr.times > 1.0
    gap = np.abs(tr.zs[late, 0] - qp_oracle(pd.params, tr.xs[late, 0]))
    return float(gap.max())


def test_primal_dual_sweep_reproduction(pd, verdict):
    p = pd.params
    _, xs_ref, _ = qp_reference(p, 10.0, 1e-3)
    ref_min = float(xs_ref.min())
    rep = sweep(pd, 0.01, 0.3, 20, SimConfig(t_f=10.0))
    for r in rep.runs:
        print(f"  eps={r.eps:.4f} min_h={r.min_h:+.4f}")
    near_top = [r for r in rep.runs if r.eps >= 0.25]
    g_hi, g_lo = _qp_gap(pd, 0.1), _qp_gap(pd, 0.01)
    ratio = g_lo / g_hi
    ok = (ref_min >= -1e-9 and rep.runs[0].min_h >= 0
          and any(r.min_h < 0 for r in near_top) and ratio < 0.5)
    assert verdict("2 primal-dual sweep", ok,
                   f"QP min_h={ref_min:.3g}, min_h(0.01)={rep.runs[0].min_h:.3g}, "
                   f"unsafe near 0.3: {sum(r.min_h < 0 for r in near_top)}/{len(near_top)}, "
                   f"gap(0.1)={g_hi:.3g} gap(0.01)={g_lo:.3g} ratio={ratio:.3f}")


# ---- 3. toy threshold ---------------------------------------------------------

def test_toy_threshold(toy, verdict):
    lo, hi, n = toy.sweep_range
    rep = sweep(toy, lo, hi, n, SimConfig(t_f=10.0))
    mins = [r.min_h for r in rep.runs]
    for r in rep.runs:
        print(f"  eps={r.eps:.4f} min_h={r.min_h:+.5f}")
    pair = any(mins[i] >= 0 and mins[j] < 0 for i in range(n) for j in range(i + 1, n))
    monotone = all(b <= a + 1e-6 for a, b in zip(mins, mins[1:]))
    assert verdict("3 toy threshold", pair and monotone,
                   f"safe->unsafe pair={pair}, nonincreasing={monotone}, "
                   f"threshold={rep.empirical_threshold}")


# ---- 4. Monte Carlo soundness -------------------------------------------------

def test_theorem_soundness(toy, arm, verdict):
    t0 = time.perf_counter()
    details, ok = [], True
    for b in (toy, arm):
        s = b.system
        consts = estimate_constants(s, b.controller, b.barrier, s.x_box, 100, 1.1,
                                    b.certificate, b.pointwise_bounds)
        ec = epsilon_bar(consts, b.certificate, b.barrier.eta, 0.5)
        rep = theorem_check(b, ec, 50, n_eps=20, seed=0)
        print(f"  {b.name}: eps_bar={ec.eps_bar:.4g} runs={rep.n_runs} "
              f"horizon<={max(rep.horizons):.3g}s warnings={rep.warnings}")
        ok &= rep.passed and not rep.vacuous and rep.n_runs == 50 * 20
        details.append(f"{b.name}: eps_bar={ec.eps_bar:.3g}, "
                       f"{len(rep.counterexamples)} counterexamples/{rep.n_runs}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 600
    assert verdict("4 theorem soundness", ok, "; ".join(details) + f", {elapsed:.0f}s")


# ---- 5. set lifting -----------------------------------------------------------

def test_set_lifting(toy, arm, verdict):
    rng = np.random.default_rng(2024)
    n = 100_000
    exceptions, inside = 0, 0
    for b in (toy, arm):
        s = b.system
        lo, hi = s.x_box.lo, s.x_box.hi
        X = lo - 0.2 * (hi - lo) + rng.random((n, s.n_slow)) * 1.4 * (hi - lo)
        scale = rng.choice([1e-3, 1e-1, 1.0, 3.0], size=(n, 1))
        Z = zeq_pi(s, b.controller, X) + scale * rng.normal(size=(n, s.n_fast))
        V = composite_cbf(b.barrier, b.certificate, s, b.controller, X, Z)
        h = b.barrier.h(X)
        exceptions += int(np.sum((V >= 0) & (h < 0)))
        inside += int(np.sum(V >= 0))
    assert verdict("5 set lifting", exceptions == 0,
                   f"{2 * n} samples, {inside} in C_V, {exceptions} exceptions")


# ---- 6. filter oracle ---------------------------------------------------------

def _brute_force_qp(a, b, u_des):
    """Enumerate active sets of ``min |u - u_des|^2 s.t. a.u + b >= 0``.

    Each active set is solved through its KKT linear system; the feasible
    candidate with the smallest objective wins. The constraint is rescaled to
    a unit normal first (same feasible set, well-conditioned KKT matrix).
    """
    k = np.linalg.norm(a)
    a, b = a / k, b / k
    m = a.size
    cands = [u_des]
    K = np.block([[2 * np.eye(m), -a[:, None]], [a[None, :], np.zeros((1, 1))]])
    sol = np.linalg.solve(K, np.r_[2 * u_des, -b])
    if sol[m] >= 0:
        cands.append(sol[:m])
    feas = [u for u in cands if a @ u + b >= -1e-12 * (1 + abs(b))]
    return min(feas, key=lambda u: np.sum((u - u_des) ** 2))


def test_filter_oracle_equivalence(verdict):
    rng = np.random.default_rng(11)
    worst_hard, worst_smooth_excess = 0.0, -math.inf
    for _ in range(1000):
        m = int(rng.integers(1, 4))
        a, u_des, b = rng.normal(size=m), rng.normal(size=m) * 3, rng.normal() * 3
        c = AffineConstraint(a, np.array(b))
        uh = safe_filter_hard(c, u_des)
        worst_hard = max(worst_hard, float(np.max(np.abs(uh - _brute_force_qp(a, b, u_des)))))
        us = safe_filter_smooth(c, u_des, 50.0)
        bound = math.log(2) / (50.0 * np.linalg.norm(a))
        worst_smooth_excess = max(worst_smooth_excess, float(np.linalg.norm(us - uh) - bound))
    ok = worst_hard <= 1e-6 and worst_smooth_excess <= 1e-12
    assert verdict("6 filter oracle", ok,
                   f"max |hard - brute force|={worst_hard:.2e}, "
                   f"max (|smooth - hard| - ln2/(sigma|a|))={worst_smooth_excess:.2e}")


# ---- 7. numerical hygiene -----------------------------------------------------

def _rk4_ratio(toy):
    b = toy
    eps, T = 1.0, 1.0
    ref = integrate(b.system, b.controller, b.barrier, b.certificate, b.x0, b.z0, eps,
                    0.01 / 64, T, 1)
    errs = []
    for dt in (0.02, 0.01):
        tr = integrate(b.system, b.controller, b.barrier, b.certificate, b.x0, b.z0, eps, dt,
                       T, 1)
        errs.append(math.hypot(tr.xs[-1, 0] - ref.xs[-1, 0], tr.zs[-1, 0] - ref.zs[-1, 0]))
    return errs[0] / errs[1]


def test_numerical_hygiene(toy, arm, pd, verdict):
    rng = np.random.default_rng(17)
    err = {}

    # barrier gradients, evaluated inside C where the LSE is smooth
    worst = 0.0
    for b in (toy, arm, pd):
        X = b.system.x_box.sample(rng, 400)
        X = X[b.barrier.h(X) >= 0][:40]
        for x in X:
            worst = max(worst, _rel(b.barrier.grad_h(x), _fd_grad(b.barrier.h, x)))
    err["h"] = worst

    worst = 0.0
    for b in (toy, arm, pd):
        s = b.system
        n = s.n_slow
        for _ in range(20):
            v = np.r_[s.x_box.sample(rng, 1)[0], rng.normal(size=s.n_input)]
            G = s.grad_z_eq(v[:n], v[n:])
            fd = _fd_grad(lambda w: s.z_eq(w[:n], w[n:]), v)
            worst = max(worst, _rel(G, fd))
    err["z_eq"] = worst

    worst = 0.0
    for b in (toy, arm):
        c = b.certificate
        for _ in range(20):
            z = rng.normal(size=c.P.shape[0]) * 2
            worst = max(worst, _rel(c.grad_U(z), _fd_grad(c.U, z)))
    err["U"] = worst

    A = rng.normal(size=(6, 3))
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=3)
        g = lse_gradient(np.sin(A @ x), np.cos(A @ x)[:, None] * A, 50.0)
        worst = max(worst, _rel(g, _fd_grad(lambda y: lse_aggregate(np.sin(A @ y), 50.0), x)))
    err["LSE"] = worst

    gamma = ArmParams().gamma
    worst = 0.0
    for m in arm_position_margins(ArmParams()):
        for _ in range(10):
            s = np.r_[rng.uniform(-2, 2, 2), rng.uniform(-3, 3, 2)]
            _, g = hocbf_lift(m, gamma, s[:2], s[2:])
            fd = _fd_grad(lambda y: hocbf_lift(m, gamma, y[:2], y[2:])[0], s)
            worst = max(worst, _rel(g, fd))
    err["HOCBF"] = worst

    P = ArmParams()
    q = rng.uniform(-np.pi, np.pi, (1000, 2))
    lam_min = float(np.linalg.eigvalsh(arm_mass_matrix(P, q)).min())
    skew = 0.0
    for _ in range(200):
        qq, w = rng.uniform(-3, 3, 2), rng.uniform(-5, 5, 2)

        def d(step):
            return (arm_mass_matrix(P, qq + step * w) - arm_mass_matrix(P, qq - step * w)) / (2 * step)

        N = (4 * d(5e-5) - d(1e-4)) / 3 - 2 * arm_coriolis(P, qq, w)
        skew = max(skew, float(np.max(np.abs(N + N.T))))

    ratio = _rk4_ratio(toy)

    residual = 0.0
    for b in (toy, arm, pd):
        X = b.system.x_box.sample(rng, 500)
        U = rng.normal(size=(500, b.system.n_input)) * 3
        residual = max(residual, equilibrium_residual(b.system, X, U))

    ok = (all(v <= 1e-5 for v in err.values()) and lam_min > 0 and skew <= 1e-10
          and 12 <= ratio <= 20 and residual <= 1e-9)
    grads = ", ".join(f"{k}={v:.1e}" for k, v in err.items())
    assert verdict("7 numerical hygiene", ok,
                   f"grad rel err {grads}; min eig M={lam_min:.3g}; skew={skew:.1e}; "
                   f"RK4 ratio={ratio:.2f}; residual={residual:.1e}")


# ---- 8. appendix chain --------------------------------------------------------

def _handcrafted():
    cert = quadratic_certificate(-np.eye(2))  # P = I/2: b2 = 1/2, b3 = 1, b4 = 1
    sets = [
        ConstantSet(L_f=1.5, L_g=1.0, L_h=2.0, L_rs=0.8, L_zeqpi=3.0, L_pi=1.0, L_alpha=1.0,
                    b4=0.0),
        ConstantSet(L_f=10.0, L_g=1.0, L_h=4.0, L_rs=7.0, L_zeqpi=0.5, L_pi=1.0, L_alpha=3.0,
                    b4=0.0),
        ConstantSet(L_f=0.01, L_g=1.0, L_h=0.1, L_rs=0.1, L_zeqpi=0.1, L_pi=1.0, L_alpha=20.0,
                    b4=0.0),
        # K1 = 0 collapse: L_h = L_rs = 0
        ConstantSet(L_f=2.0, L_g=1.0, L_h=0.0, L_rs=0.0, L_zeqpi=1.0, L_pi=1.0, L_alpha=1.0,
                    b4=0.0),
    ]
    return cert, sets


def test_appendix_chain(verdict):
    cert, sets = _handcrafted()
    b2, b3, b4 = cert.b2, cert.b3, cert.b4
    exact = True
    for c, eta, nu in zip(sets, (0.1, 0.5, 0.01, 0.2), (0.5, 0.3, 0.9, 0.5)):
        K1 = c.L_h * c.L_f + b4 * c.L_zeqpi * c.L_rs
        K2 = b4 * c.L_zeqpi * c.L_f
        e1 = nu * b3 / K2
        e2 = min(e1, 4 * eta * nu * b3 / (K1**2 + 4 * eta * K2))
        e3 = min(e2, (1 - nu) * b3 / (c.L_alpha * b2))
        got = epsilon_bar(c, cert, eta, nu)
        print(f"  K1={K1:.4g} K2={K2:.4g} chain=({got.eps1:.6g}, {got.eps2:.6g}, "
              f"{got.eps_bar:.6g})")
        exact &= (got.eps1, got.eps2, got.eps_bar) == (e1, e2, e3)
    collapse = epsilon_bar(sets[-1], cert, 0.2, 0.5)
    exact &= collapse.constants.K1 == 0 and collapse.eps2 == collapse.eps1

    rng = np.random.default_rng(5)
    monotone = True
    for _ in range(100):
        v = 10.0 ** rng.uniform(-3, 3, 6)
        c = ConstantSet(L_f=v[0], L_g=1.0, L_h=v[1], L_rs=v[2], L_zeqpi=v[3], L_pi=1.0,
                        L_alpha=v[4], b4=0.0)
        nu = rng.uniform(0.05, 0.95)
        etas = np.sort(10.0 ** rng.uniform(-3, 1, 5))
        vals = [epsilon_bar(c, cert, eta, nu).eps_bar for eta in etas]
        monotone &= all(b >= a for a, b in zip(vals, vals[1:]))
    assert verdict("8 appendix chain", exact and monotone,
                   f"exact on {len(sets)} handcrafted sets (incl. K1=0)={exact}, "
                   f"eta-monotone on 100 random sets={monotone}")
