"""Compiled point kernels for the two-link arm with joint motors.

Parameters travel as a flat float vector (see ``P_*`` indices) plus a
``(K, 2)`` array of obstacle centers. Angles are measured from the
downward vertical, so ``q = 0`` is the hanging rest pose.

Kernels take precomputed sines/cosines so finite-difference sweeps can
shift angles with the addition formulas instead of re-evaluating trig.
"""

import math

import numpy as np
from numba import njit

P_M, P_L, P_J, P_B, P_R, P_LT, P_KI, P_KW, P_G0 = range(9)
P_GAMMA, P_ETA, P_RHO, P_SIGMA, P_KP, P_KD = range(9, 15)
P_QT1, P_QT2, P_QMIN1, P_QMIN2, P_QMAX1, P_QMAX2, P_ROBS = range(15, 22)
N_PARAMS = 22

# no nnan/ninf: divergence must stay observable
_JIT = dict(cache=True, nogil=True, fastmath={"reassoc", "contract", "arcp", "nsz"})

# trig record layout: s1, c1, s2, c2, s12, c12
TRIG = 6


@njit(**_JIT)
def trig(q1, q2, t):
    t[0], t[1] = math.sin(q1), math.cos(q1)
    t[2], t[3] = math.sin(q2), math.cos(q2)
    t[4], t[5] = math.sin(q1 + q2), math.cos(q1 + q2)


@njit(**_JIT)
def shift_trig(t, axis, sd, cd, out):
    """Trig record of ``q + delta e_axis`` from that of ``q``."""
    for i in range(TRIG):
        out[i] = t[i]
    s12, c12 = t[4] * cd + t[5] * sd, t[5] * cd - t[4] * sd
    out[4], out[5] = s12, c12
    if axis == 0:
        out[0], out[1] = t[0] * cd + t[1] * sd, t[1] * cd - t[0] * sd
    else:
        out[2], out[3] = t[2] * cd + t[3] * sd, t[3] * cd - t[2] * sd


@njit(**_JIT)
def mass(pv, c2):
    m, l, J = pv[P_M], pv[P_L], pv[P_J]
    lc = 0.5 * l
    m22 = J + m * lc * lc
    m12 = m22 + m * l * lc * c2
    m11 = 2.0 * J + m * lc * lc + m * (l * l + lc * lc + 2.0 * l * lc * c2)
    return m11, m12, m22


@njit(**_JIT)
def coriolis_omega(pv, s2, w1, w2):
    hh = -pv[P_M] * pv[P_L] * 0.5 * pv[P_L] * s2
    return hh * (2.0 * w1 * w2 + w2 * w2), -hh * w1 * w1


@njit(**_JIT)
def gravity(pv, s1, s12):
    m, l, g0 = pv[P_M], pv[P_L], pv[P_G0]
    lc = 0.5 * l
    return m * g0 * ((lc + l) * s1 + lc * s12), m * g0 * lc * s12


@njit(**_JIT)
def inv2(m11, m12, m22):
    det = m11 * m22 - m12 * m12
    return m22 / det, -m12 / det, m11 / det


@njit(**_JIT)
def margins(pv, obs, q1, q2, t, hb, gb, Hb):
    """Position margins, gradients and Hessians into ``hb, gb, Hb``."""
    l = pv[P_L]
    s1, c1, s12, c12 = t[0], t[1], t[4], t[5]
    px = l * (s1 + s12)
    py = -l * (c1 + c12)
    # Jacobian of p(q)
    j11, j12 = l * (c1 + c12), l * c12
    j21, j22 = l * (s1 + s12), l * s12
    for k in range(4):
        for i in range(2):
            gb[k, i] = 0.0
            Hb[k, i, 0] = 0.0
            Hb[k, i, 1] = 0.0
    hb[0] = q1 - pv[P_QMIN1]
    gb[0, 0] = 1.0
    hb[1] = q2 - pv[P_QMIN2]
    gb[1, 1] = 1.0
    hb[2] = pv[P_QMAX1] - q1
    gb[2, 0] = -1.0
    hb[3] = pv[P_QMAX2] - q2
    gb[3, 1] = -1.0
    r = pv[P_ROBS]
    # second derivatives of px, py
    pxx11, pxx12 = -l * (s1 + s12), -l * s12
    pyy11, pyy12 = l * (c1 + c12), l * c12
    for k in range(obs.shape[0]):
        dx = px - obs[k, 0]
        dy = py - obs[k, 1]
        j = 4 + k
        hb[j] = dx * dx + dy * dy - r * r
        gb[j, 0] = 2.0 * (j11 * dx + j21 * dy)
        gb[j, 1] = 2.0 * (j12 * dx + j22 * dy)
        Hb[j, 0, 0] = 2.0 * (j11 * j11 + j21 * j21 + dx * pxx11 + dy * pyy11)
        Hb[j, 0, 1] = 2.0 * (j11 * j12 + j21 * j22 + dx * pxx12 + dy * pyy12)
        Hb[j, 1, 0] = Hb[j, 0, 1]
        Hb[j, 1, 1] = 2.0 * (j12 * j12 + j22 * j22 + dx * pxx12 + dy * pyy12)


@njit(**_JIT)
def aggregate(pv, w1, w2, hb, gb, Hb, hj, grad):
    """LSE of the lifted margins; gradient w.r.t. (q, omega) into ``grad``."""
    gamma, rho = pv[P_GAMMA], pv[P_RHO]
    n = hb.shape[0]
    for j in range(n):
        hj[j] = gb[j, 0] * w1 + gb[j, 1] * w2 + gamma * hb[j]
    hmin = hj[0]
    for j in range(1, n):
        if hj[j] < hmin:
            hmin = hj[j]
    tot = 0.0
    g0 = g1 = g2 = g3 = 0.0
    for j in range(n):
        wj = math.exp(-rho * (hj[j] - hmin))
        tot += wj
        g0 += wj * (Hb[j, 0, 0] * w1 + Hb[j, 0, 1] * w2 + gamma * gb[j, 0])
        g1 += wj * (Hb[j, 1, 0] * w1 + Hb[j, 1, 1] * w2 + gamma * gb[j, 1])
        g2 += wj * gb[j, 0]
        g3 += wj * gb[j, 1]
    grad[0], grad[1], grad[2], grad[3] = g0 / tot, g1 / tot, g2 / tot, g3 / tot
    return hmin - math.log(tot) / rho


@njit(**_JIT)
def filtered_input(pv, q1, q2, w1, w2, t, h, grad, u):
    """Softplus-filtered PD + gravity compensation voltage into ``u``.

    A vanishing input direction leaves the nominal voltage in place and
    returns True when the constraint is then violated.
    """
    R, ki, kw, b = pv[P_R], pv[P_KI], pv[P_KW], pv[P_B]
    m11, m12, m22 = mass(pv, t[3])
    a11, a12, a22 = inv2(m11, m12, m22)
    cw1, cw2 = coriolis_omega(pv, t[2], w1, w2)
    g1, g2 = gravity(pv, t[0], t[4])
    kp, kd = pv[P_KP], pv[P_KD]
    ud1 = R / ki * (kp * (pv[P_QT1] - q1) - kd * w1 + g1)
    ud2 = R / ki * (kp * (pv[P_QT2] - q2) - kd * w2 + g2)
    bf = b + ki * kw / R
    t1 = -bf * w1 - cw1 - g1
    t2 = -bf * w2 - cw2 - g2
    d3 = a11 * t1 + a12 * t2
    d4 = a12 * t1 + a22 * t2
    gain = ki / R
    # a = B_in^T grad_h with B_in = [0; M^-1 K_I R^-1]
    av1 = gain * (a11 * grad[2] + a12 * grad[3])
    av2 = gain * (a12 * grad[2] + a22 * grad[3])
    bv = grad[0] * w1 + grad[1] * w2 + grad[2] * d3 + grad[3] * d4 + pv[P_GAMMA] * h - pv[P_ETA]
    norm2 = av1 * av1 + av2 * av2
    u[0] = ud1
    u[1] = ud2
    margin = av1 * ud1 + av2 * ud2 + bv
    if norm2 <= 1e-30:
        return margin < 0.0
    s = -margin * pv[P_SIGMA]
    if s > 30.0:
        sp = s
    else:
        sp = math.log1p(math.exp(s))
    corr = sp / pv[P_SIGMA] / norm2
    u[0] += corr * av1
    u[1] += corr * av2
    return False


@njit(**_JIT)
def slow_field(pv, t, w1, w2, i1, i2, out):
    """Mechanical dynamics driven by motor currents ``(i1, i2)``."""
    m11, m12, m22 = mass(pv, t[3])
    a11, a12, a22 = inv2(m11, m12, m22)
    cw1, cw2 = coriolis_omega(pv, t[2], w1, w2)
    g1, g2 = gravity(pv, t[0], t[4])
    b, ki = pv[P_B], pv[P_KI]
    t1 = ki * i1 - b * w1 - cw1 - g1
    t2 = ki * i2 - b * w2 - cw2 - g2
    out[0] = w1
    out[1] = w2
    out[2] = a11 * t1 + a12 * t2
    out[3] = a12 * t1 + a22 * t2


@njit(**_JIT)
def _scratch(obs):
    n = 4 + obs.shape[0]
    return np.empty(n), np.empty((n, 2)), np.empty((n, 2, 2)), np.empty(n), np.empty(TRIG)


@njit(**_JIT)
def point_policy(pv, obs, x, u, grad, hb, gb, Hb, hj, t):
    """Filtered voltage at ``x`` into ``u``; returns ``(h, infeasible)``."""
    trig(x[0], x[1], t)
    margins(pv, obs, x[0], x[1], t, hb, gb, Hb)
    h = aggregate(pv, x[2], x[3], hb, gb, Hb, hj, grad)
    bad = filtered_input(pv, x[0], x[1], x[2], x[3], t, h, grad, u)
    return h, bad


# ---- batched wrappers (rows are independent points) -------------------------

@njit(**_JIT)
def barrier_batch(pv, obs, X, H, G):
    hb, gb, Hb, hj, t = _scratch(obs)
    for k in range(X.shape[0]):
        trig(X[k, 0], X[k, 1], t)
        margins(pv, obs, X[k, 0], X[k, 1], t, hb, gb, Hb)
        H[k] = aggregate(pv, X[k, 2], X[k, 3], hb, gb, Hb, hj, G[k])


@njit(**_JIT)
def components_batch(pv, obs, X, HJ):
    """Per-constraint lifted values, shape ``(N, 4 + K)``."""
    hb, gb, Hb, _, t = _scratch(obs)
    gamma = pv[P_GAMMA]
    for k in range(X.shape[0]):
        trig(X[k, 0], X[k, 1], t)
        margins(pv, obs, X[k, 0], X[k, 1], t, hb, gb, Hb)
        for j in range(hb.shape[0]):
            HJ[k, j] = gb[j, 0] * X[k, 2] + gb[j, 1] * X[k, 3] + gamma * hb[j]


@njit(**_JIT)
def policy_batch(pv, obs, X, U, BAD):
    hb, gb, Hb, hj, t = _scratch(obs)
    grad = np.empty(4)
    for k in range(X.shape[0]):
        _, BAD[k] = point_policy(pv, obs, X[k], U[k], grad, hb, gb, Hb, hj, t)


@njit(**_JIT)
def f_batch(pv, X, Z, OUT):
    t = np.empty(TRIG)
    for k in range(X.shape[0]):
        trig(X[k, 0], X[k, 1], t)
        slow_field(pv, t, X[k, 2], X[k, 3], Z[k, 0], Z[k, 1], OUT[k])


@njit(**_JIT)
def g_batch(pv, Z, X, U, OUT):
    R, kw, lt = pv[P_R], pv[P_KW], pv[P_LT]
    for k in range(X.shape[0]):
        OUT[k, 0] = (U[k, 0] - R * Z[k, 0] - kw * X[k, 2]) / lt
        OUT[k, 1] = (U[k, 1] - R * Z[k, 1] - kw * X[k, 3]) / lt


@njit(**_JIT)
def closed_loop_batch(pv, obs, X, Z, inv_eps, DX, DZ, U, BAD):
    """Stacked closed-loop field with the policy evaluated at each row."""
    hb, gb, Hb, hj, t = _scratch(obs)
    grad = np.empty(4)
    R, kw, lt = pv[P_R], pv[P_KW], pv[P_LT]
    for k in range(X.shape[0]):
        x = X[k]
        _, BAD[k] = point_policy(pv, obs, x, U[k], grad, hb, gb, Hb, hj, t)
        slow_field(pv, t, x[2], x[3], Z[k, 0], Z[k, 1], DX[k])
        DZ[k, 0] = (U[k, 0] - R * Z[k, 0] - kw * x[2]) / lt * inv_eps
        DZ[k, 1] = (U[k, 1] - R * Z[k, 1] - kw * x[3]) / lt * inv_eps


# ---- fused pointwise bounds for constant estimation -------------------------

@njit(**_JIT)
def sym_eig_max(A, n):
    """Largest eigenvalue of the symmetric leading ``n x n`` block (cyclic Jacobi)."""
    for _ in range(30):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if off < 1e-30:
            break
        for p in range(n):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                tt = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(tt * tt + 1.0)
                s = tt * c
                for k in range(n):
                    akp, akq = A[k, p], A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = A[p, k], A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
    best = A[0, 0]
    for p in range(1, n):
        if A[p, p] > best:
            best = A[p, p]
    return best


@njit(**_JIT)
def opnorm(J, rows, cols, gram):
    """Spectral norm of the leading ``rows x cols`` block of ``J``."""
    if rows <= cols:
        for i in range(rows):
            for j in range(rows):
                acc = 0.0
                for k in range(cols):
                    acc += J[i, k] * J[j, k]
                gram[i, j] = acc
        lam = sym_eig_max(gram, rows)
    else:
        for i in range(cols):
            for j in range(cols):
                acc = 0.0
                for k in range(rows):
                    acc += J[k, i] * J[k, j]
                gram[i, j] = acc
        lam = sym_eig_max(gram, cols)
    return math.sqrt(max(lam, 0.0))


N_BOUNDS = 7  # h, |grad h|, |f_rs|, |grad z_eq_pi|, |J_f|, |J_g|, |grad pi|


@njit(**_JIT)
def bounds_batch(pv, obs, X, xstep, OUT):
    """Per-point ingredients of the constant set (central differences).

    Mirrors the generic numpy route: policy Jacobian with per-axis step
    ``xstep``; Jacobians of f and g w.r.t. (x, z, u) at the closed-loop
    point with x-steps ``xstep`` and z/u steps ``1e-5 max(1, |.|)``.
    Points with h < 0 only get their h column filled.
    """
    hb, gb, Hb, hj, t = _scratch(obs)
    tp = np.empty(TRIG)
    grad = np.empty(4)
    gtmp = np.empty(4)
    u = np.empty(2)
    up = np.empty(2)
    um = np.empty(2)
    Jpi = np.empty((2, 4))
    Jf = np.empty((4, 8))
    Jg = np.empty((2, 8))
    Jz = np.empty((2, 4))
    gram = np.empty((4, 4))
    fo_p = np.empty(4)
    fo_m = np.empty(4)
    base = np.empty(8)
    v = np.empty(8)
    R, kw, lt = pv[P_R], pv[P_KW], pv[P_LT]
    for k in range(X.shape[0]):
        q1, q2, w1, w2 = X[k, 0], X[k, 1], X[k, 2], X[k, 3]
        trig(q1, q2, t)
        margins(pv, obs, q1, q2, t, hb, gb, Hb)
        h = aggregate(pv, w1, w2, hb, gb, Hb, hj, grad)
        OUT[k, 0] = h
        if not h >= 0.0:
            for c in range(1, N_BOUNDS):
                OUT[k, c] = np.nan
            continue
        OUT[k, 1] = math.sqrt(grad[0] ** 2 + grad[1] ** 2 + grad[2] ** 2 + grad[3] ** 2)
        filtered_input(pv, q1, q2, w1, w2, t, h, grad, u)
        i1 = (u[0] - kw * w1) / R
        i2 = (u[1] - kw * w2) / R
        slow_field(pv, t, w1, w2, i1, i2, fo_p)
        OUT[k, 2] = math.sqrt(fo_p[0] ** 2 + fo_p[1] ** 2 + fo_p[2] ** 2 + fo_p[3] ** 2)
        # policy Jacobian: angles via shifted trig, rates reuse margins
        for ax in range(4):
            d = xstep[ax]
            for sgn in range(2):
                dd = d if sgn == 0 else -d
                out = up if sgn == 0 else um
                if ax < 2:
                    shift_trig(t, ax, math.sin(dd), math.cos(dd), tp)
                    a1 = q1 + (dd if ax == 0 else 0.0)
                    a2 = q2 + (dd if ax == 1 else 0.0)
                    margins(pv, obs, a1, a2, tp, hb, gb, Hb)
                    hh = aggregate(pv, w1, w2, hb, gb, Hb, hj, gtmp)
                    filtered_input(pv, a1, a2, w1, w2, tp, hh, gtmp, out)
                else:
                    b1 = w1 + (dd if ax == 2 else 0.0)
                    b2 = w2 + (dd if ax == 3 else 0.0)
                    hh = aggregate(pv, b1, b2, hb, gb, Hb, hj, gtmp)
                    filtered_input(pv, q1, q2, b1, b2, t, hh, gtmp, out)
            if ax < 2:
                margins(pv, obs, q1, q2, t, hb, gb, Hb)
            Jpi[0, ax] = (up[0] - um[0]) / (2.0 * d)
            Jpi[1, ax] = (up[1] - um[1]) / (2.0 * d)
        # grad z_eq_pi = dz/dx + dz/du grad pi, z_eq = R^-1 (u - K_w omega)
        for i in range(2):
            for j in range(4):
                Jz[i, j] = Jpi[i, j] / R
        Jz[0, 2] -= kw / R
        Jz[1, 3] -= kw / R
        OUT[k, 3] = opnorm(Jz, 2, 4, gram)
        OUT[k, 6] = opnorm(Jpi, 2, 4, gram)
        # Jacobians of f and g over (q1, q2, w1, w2, i1, i2, v1, v2)
        base[0], base[1], base[2], base[3] = q1, q2, w1, w2
        base[4], base[5], base[6], base[7] = i1, i2, u[0], u[1]
        gp0 = gp1 = gm0 = gm1 = 0.0
        for ax in range(8):
            if ax < 4:
                d = xstep[ax]
            else:
                d = 1e-5 * max(1.0, abs(base[ax]))
            for sgn in range(2):
                dd = d if sgn == 0 else -d
                fo = fo_p if sgn == 0 else fo_m
                for i in range(8):
                    v[i] = base[i]
                v[ax] += dd
                if ax < 2:
                    shift_trig(t, ax, math.sin(dd), math.cos(dd), tp)
                    slow_field(pv, tp, v[2], v[3], v[4], v[5], fo)
                else:
                    slow_field(pv, t, v[2], v[3], v[4], v[5], fo)
                gz0 = (v[6] - R * v[4] - kw * v[2]) / lt
                gz1 = (v[7] - R * v[5] - kw * v[3]) / lt
                if sgn == 0:
                    gp0, gp1 = gz0, gz1
                else:
                    gm0, gm1 = gz0, gz1
            for i in range(4):
                Jf[i, ax] = (fo_p[i] - fo_m[i]) / (2.0 * d)
            Jg[0, ax] = (gp0 - gm0) / (2.0 * d)
            Jg[1, ax] = (gp1 - gm1) / (2.0 * d)
        OUT[k, 4] = opnorm(Jf, 4, 8, gram)
        OUT[k, 5] = opnorm(Jg, 2, 8, gram)
