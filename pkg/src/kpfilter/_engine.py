"""Compiled batch kernels for the particle filters.

Everything here is a flat-array mirror of the public ``riccati`` and
``kalman`` modules, specialized to state dimensions 1 and 2 and vectorized
over particles.  The Kalman update uses the information form: with
``G = H'H``, ``M = I + P G / h`` and posterior covariance ``C = M^{-1} P``,
the innovation log-density needs only per-step scalars ``y'y``, ``H'y`` and
``H0'y``, never the full innovation covariance.

The ``fastmath`` flag set deliberately excludes ``nnan`` and ``ninf``:
divergent particles are flagged through non-finite checks, which must not be
optimized away.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

LOG_2PI = 1.8378770664093453
_FASTMATH = {"nsz", "arcp", "contract", "afn", "reassoc"}
SERIES_SWITCH = 1e-8
NEG_EIG_TOL = -1e-10


@njit(cache=True, fastmath=_FASTMATH)
def _taylor_coeffs(aq, use_aq, alq, use_alq, b, c, Beta, gamma, u, C, D, order):
    """Fill C (order+1,) and D (order+1, d) with Taylor coefficients at u."""
    d = u.shape[0]
    for i in range(d):
        D[0, i] = u[i]
    quad_phi = 0.0
    if use_aq:
        for i in range(d):
            ti = 0.0
            for j in range(d):
                ti += aq[i, j] * u[j]
            quad_phi += u[i] * ti
    lin_phi = 0.0
    for i in range(d):
        lin_phi += b[i] * u[i]
    C[0] = 0.0
    C[1] = 0.5 * quad_phi + lin_phi - c
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += Beta[i, j] * u[j]
        D[1, i] = acc - gamma[i]
    if use_alq:
        quad_psi = 0.0
        for i in range(d):
            ti = 0.0
            for j in range(d):
                ti += alq[i, j] * u[j]
            quad_psi += u[i] * ti
        D[1, 0] += 0.5 * quad_psi
    for k in range(1, order):
        # Quadratic coefficients are symmetric, so convolution terms pair up
        # around k/2 and only half of them need evaluating.
        conv_a = 0.0
        conv_q = 0.0
        half = (k + 1) >> 1
        for n in range(half):
            if use_aq:
                s = 0.0
                for i in range(d):
                    ti = 0.0
                    for j in range(d):
                        ti += aq[i, j] * D[k - n, j]
                    s += D[n, i] * ti
                conv_a += s
            if use_alq:
                s = 0.0
                for i in range(d):
                    ti = 0.0
                    for j in range(d):
                        ti += alq[i, j] * D[k - n, j]
                    s += D[n, i] * ti
                conv_q += s
        conv_a += conv_a
        conv_q += conv_q
        if (k & 1) == 0:
            mid = k >> 1
            if use_aq:
                s = 0.0
                for i in range(d):
                    ti = 0.0
                    for j in range(d):
                        ti += aq[i, j] * D[mid, j]
                    s += D[mid, i] * ti
                conv_a += s
            if use_alq:
                s = 0.0
                for i in range(d):
                    ti = 0.0
                    for j in range(d):
                        ti += alq[i, j] * D[mid, j]
                    s += D[mid, i] * ti
                conv_q += s
        inv = 1.0 / (k + 1)
        lc = 0.0
        for i in range(d):
            lc += b[i] * D[k, i]
        C[k + 1] = (0.5 * conv_a + lc) * inv
        for i in range(d):
            li = 0.0
            for j in range(d):
                li += Beta[i, j] * D[k, j]
            D[k + 1, i] = li * inv
        if use_alq:
            D[k + 1, 0] += 0.5 * conv_q * inv


@njit(cache=True, fastmath=_FASTMATH)
def _sweep_one(
    aq, use_aq, alq, use_alq, b, c, Beta, gamma,
    taus, order, tol, dt_min, dt_max, blowup, phis_row, psis_row,
):
    """Adaptive Taylor sweep for one particle; returns False on blow-up."""
    d = b.shape[0]
    n_tau = taus.shape[0]
    C = np.empty(order + 1)
    D = np.empty((order + 1, d))
    u = np.zeros(d)
    phi = 0.0
    t = 0.0
    inv_order = 1.0 / order
    for l in range(n_tau):
        target = taus[l]
        while target - t > 1e-12:
            remaining = target - t
            _taylor_coeffs(aq, use_aq, alq, use_alq, b, c, Beta, gamma, u, C, D, order)
            tail = abs(C[order])
            for i in range(d):
                mag = abs(D[order, i])
                if mag > tail:
                    tail = mag
            if not np.isfinite(tail) or tail > blowup:
                return False
            if tail > 0.0:
                dt = (tol / tail) ** inv_order
                if dt < dt_min:
                    dt = dt_min
                elif dt > dt_max:
                    dt = dt_max
            else:
                dt = dt_max
            if dt >= remaining * (1.0 - 1e-12):
                dt = remaining
                t = target
            else:
                t += dt
            inc = 0.0
            for k in range(order, 0, -1):
                inc = (inc + C[k]) * dt
            phi += inc
            for i in range(d):
                acc = 0.0
                for k in range(order, 0, -1):
                    acc = (acc + D[k, i]) * dt
                u[i] = acc + D[0, i]
            for i in range(d):
                if not np.isfinite(u[i]) or abs(u[i]) > blowup:
                    return False
        phis_row[l] = phi
        for i in range(d):
            psis_row[l, i] = u[i]
    return True


@njit(cache=True, fastmath=_FASTMATH)
def _sweep_d1_lockstep(
    aq, use_aq, alq, use_alq, b, c, beta, gamma,
    taus, order, tol, dt_min, dt_max, blowup, phis, psis, ok,
):
    """March all one-factor particles together on a shared substep grid.

    The shared substep is the minimum of the per-particle step rules, so no
    particle ever takes a longer step than its own tolerance allows.  Arrays
    are coefficient-major so the particle axis vectorizes.
    """
    n = b.shape[0]
    n_tau = taus.shape[0]
    C = np.empty((order + 1, n))
    D = np.empty((order + 1, n))
    conv = np.empty(n)
    inc = np.empty(n)
    acc = np.empty(n)
    haq = np.zeros(n)
    halq = np.zeros(n)
    if use_aq:
        for p in range(n):
            haq[p] = 0.5 * aq[p]
    if use_alq:
        for p in range(n):
            halq[p] = 0.5 * alq[p]
    u = np.zeros(n)
    phi = np.zeros(n)
    t = 0.0
    inv_order = 1.0 / order
    n_alive = n
    for l in range(n_tau):
        target = taus[l]
        while target - t > 1e-12 and n_alive > 0:
            remaining = target - t
            for p in range(n):
                D[0, p] = u[p]
                C[1, p] = haq[p] * u[p] * u[p] + b[p] * u[p] - c
                D[1, p] = halq[p] * u[p] * u[p] + beta[p] * u[p] - gamma
            for k in range(1, order):
                half = (k + 1) >> 1
                inv = 1.0 / (k + 1)
                for p in range(n):
                    conv[p] = 0.0
                for m in range(half):
                    for p in range(n):
                        conv[p] += D[m, p] * D[k - m, p]
                for p in range(n):
                    conv[p] += conv[p]
                if (k & 1) == 0:
                    mid = k >> 1
                    for p in range(n):
                        conv[p] += D[mid, p] * D[mid, p]
                for p in range(n):
                    C[k + 1, p] = (haq[p] * conv[p] + b[p] * D[k, p]) * inv
                    D[k + 1, p] = (halq[p] * conv[p] + beta[p] * D[k, p]) * inv
            dt = dt_max
            for p in range(n):
                if not ok[p]:
                    continue
                tail = abs(C[order, p])
                mag = abs(D[order, p])
                if mag > tail:
                    tail = mag
                if not np.isfinite(tail) or tail > blowup:
                    ok[p] = False
                    n_alive -= 1
                    continue
                if tail > 0.0:
                    dtp = (tol / tail) ** inv_order
                    if dtp < dt:
                        dt = dtp
            if n_alive == 0:
                break
            if dt < dt_min:
                dt = dt_min
            if dt >= remaining * (1.0 - 1e-12):
                dt = remaining
                t = target
            else:
                t += dt
            for p in range(n):
                inc[p] = 0.0
                acc[p] = 0.0
            for k in range(order, 0, -1):
                for p in range(n):
                    inc[p] = (inc[p] + C[k, p]) * dt
                    acc[p] = (acc[p] + D[k, p]) * dt
            for p in range(n):
                phi[p] += inc[p]
                u[p] = acc[p] + D[0, p]
            for p in range(n):
                if ok[p] and (not np.isfinite(u[p]) or abs(u[p]) > blowup):
                    ok[p] = False
                    n_alive -= 1
        for p in range(n):
            phis[p, l] = phi[p]
            psis[p, l, 0] = u[p]
    for p in range(n):
        if not ok[p]:
            for l in range(n_tau):
                phis[p, l] = np.nan
                psis[p, l, 0] = np.nan


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def riccati_sweep_batch(
    aq, use_aq, alq, use_alq, b, c, Beta, gamma,
    taus, order, tol, dt_min, dt_max, blowup,
):
    """Solve the bond-exponent system for every particle at every maturity.

    Parameters are batches with leading particle dimension: ``aq``/``alq``
    are ``(n, d, d)`` quadratic coefficient matrices for the ``phi`` equation
    and the first ``psi`` equation (each gated by its flag), ``b`` is
    ``(n, d)``, ``Beta`` is ``(n, d, d)`` and ``gamma`` ``(d,)`` shared.
    Returns ``(phis (n, L), psis (n, L, d), ok (n,))``; rows that blow up are
    NaN with ``ok`` False.

    One-factor batches advance in vectorized lockstep at the most demanding
    particle's step size; richer dimensions sweep independently per particle.
    """
    n = b.shape[0]
    d = b.shape[1]
    n_tau = taus.shape[0]
    phis = np.empty((n, n_tau))
    psis = np.empty((n, n_tau, d))
    ok = np.ones(n, dtype=np.bool_)
    if d == 1:
        _sweep_d1_lockstep(
            aq[:, 0, 0], use_aq, alq[:, 0, 0], use_alq,
            np.ascontiguousarray(b[:, 0]), c,
            np.ascontiguousarray(Beta[:, 0, 0]), gamma[0],
            taus, order, tol, dt_min, dt_max, blowup, phis, psis, ok,
        )
        return phis, psis, ok
    for p in prange(n):
        good = _sweep_one(
            aq[p], use_aq, alq[p], use_alq, b[p], c, Beta[p], gamma,
            taus, order, tol, dt_min, dt_max, blowup, phis[p], psis[p],
        )
        if not good:
            ok[p] = False
            for l in range(n_tau):
                phis[p, l] = np.nan
                for i in range(d):
                    psis[p, l, i] = np.nan
    return phis, psis, ok


@njit(cache=True, fastmath=_FASTMATH)
def _step_one(
    al, be, gm, scaled, B, Pc, G, HtH0, H0sq,
    Hty, H0ty, ysq, h, log_h, dt, n_obs, want_ll,
):
    """One predict/update on a single particle's (B, Pc), mutated in place.

    Returns ``(loglik, ok)``; the log-likelihood is only meaningful when
    ``want_ll`` is True (the replay loop skips it on interior steps).
    """
    d = B.shape[0]
    if d == 1:
        a0 = al[0]
        f0 = np.exp(-a0 * dt)
        s = 2.0 * a0
        if abs(s) * dt < SERIES_SWITCH:
            g00 = dt
        else:
            g00 = -np.expm1(-s * dt) / s
        scale = 1.0
        if scaled:
            scale = B[0] if B[0] > 0.0 else 0.0
        q00 = gm[0, 0] * g00 * scale
        am = f0 * B[0] + (1.0 - f0) * be[0]
        pm = f0 * f0 * Pc[0, 0] + q00
        if not np.isfinite(pm) or pm < NEG_EIG_TOL:
            return -np.inf, False
        if pm < 0.0:
            pm = 0.0
        g = G[0, 0]
        m = 1.0 + pm * g / h
        if not np.isfinite(m) or m <= 0.0:
            return -np.inf, False
        cpost = pm / m
        z = Hty[0] - g * am - HtH0[0]
        B[0] = am + cpost * z / h
        Pc[0, 0] = cpost
        if not np.isfinite(B[0]):
            return -np.inf, False
        if not want_ll:
            return 0.0, True
        quad = (
            ysq - 2.0 * Hty[0] * am - 2.0 * H0ty
            + g * am * am + 2.0 * HtH0[0] * am + H0sq
        )
        if quad < 0.0:
            quad = 0.0
        sq = (quad - cpost * z * z / h) / h
        if sq < 0.0:
            sq = 0.0
        ll = -0.5 * (n_obs * (LOG_2PI + log_h) + np.log(m) + sq)
        if not np.isfinite(ll):
            return -np.inf, False
        return ll, True

    # d == 2
    f0 = np.exp(-al[0] * dt)
    f1 = np.exp(-al[1] * dt)
    s00 = 2.0 * al[0]
    s01 = al[0] + al[1]
    s11 = 2.0 * al[1]
    g00 = dt if abs(s00) * dt < SERIES_SWITCH else -np.expm1(-s00 * dt) / s00
    g01 = dt if abs(s01) * dt < SERIES_SWITCH else -np.expm1(-s01 * dt) / s01
    g11 = dt if abs(s11) * dt < SERIES_SWITCH else -np.expm1(-s11 * dt) / s11
    scale = 1.0
    if scaled:
        scale = B[0] if B[0] > 0.0 else 0.0
    q00 = gm[0, 0] * g00 * scale
    q01 = gm[0, 1] * g01 * scale
    q11 = gm[1, 1] * g11 * scale
    am0 = f0 * B[0] + (1.0 - f0) * be[0]
    am1 = f1 * B[1] + (1.0 - f1) * be[1]
    p01 = 0.5 * (Pc[0, 1] + Pc[1, 0])
    pm00 = f0 * f0 * Pc[0, 0] + q00
    pm01 = f0 * f1 * p01 + q01
    pm11 = f1 * f1 * Pc[1, 1] + q11
    if not (np.isfinite(pm00) and np.isfinite(pm01) and np.isfinite(pm11)):
        return -np.inf, False
    ga = G[0, 0]
    gb = G[0, 1]
    gc = G[1, 1]
    t00 = (pm00 * ga + pm01 * gb) / h
    t01 = (pm00 * gb + pm01 * gc) / h
    t10 = (pm01 * ga + pm11 * gb) / h
    t11 = (pm01 * gb + pm11 * gc) / h
    m00 = 1.0 + t00
    m01 = t01
    m10 = t10
    m11 = 1.0 + t11
    detm = m00 * m11 - m01 * m10
    if not np.isfinite(detm) or detm <= 0.0:
        return -np.inf, False
    c00 = (m11 * pm00 - m01 * pm01) / detm
    c01 = (m11 * pm01 - m01 * pm11) / detm
    c10 = (m00 * pm01 - m10 * pm00) / detm
    c11 = (m00 * pm11 - m10 * pm01) / detm
    cs = 0.5 * (c01 + c10)
    half_tr = 0.5 * (c00 + c11)
    rad = np.sqrt(0.25 * (c00 - c11) * (c00 - c11) + cs * cs)
    lmin = half_tr - rad
    lmax = half_tr + rad
    if not np.isfinite(lmin) or lmin < NEG_EIG_TOL:
        return -np.inf, False
    if lmin < 0.0:
        if lmax <= 0.0:
            c00 = 0.0
            cs = 0.0
            c11 = 0.0
        else:
            vx = cs
            vy = lmax - c00
            nrm = vx * vx + vy * vy
            if nrm > 0.0:
                c00 = lmax * vx * vx / nrm
                cs = lmax * vx * vy / nrm
                c11 = lmax * vy * vy / nrm
            else:
                c00 = c00 if c00 > 0.0 else 0.0
                c11 = c11 if c11 > 0.0 else 0.0
                cs = 0.0
    z0 = Hty[0] - (ga * am0 + gb * am1) - HtH0[0]
    z1 = Hty[1] - (gb * am0 + gc * am1) - HtH0[1]
    B[0] = am0 + (c00 * z0 + cs * z1) / h
    B[1] = am1 + (cs * z0 + c11 * z1) / h
    Pc[0, 0] = c00
    Pc[0, 1] = cs
    Pc[1, 0] = cs
    Pc[1, 1] = c11
    if not (np.isfinite(B[0]) and np.isfinite(B[1])):
        return -np.inf, False
    if not want_ll:
        return 0.0, True
    quad = (
        ysq - 2.0 * (Hty[0] * am0 + Hty[1] * am1) - 2.0 * H0ty
        + (ga * am0 * am0 + 2.0 * gb * am0 * am1 + gc * am1 * am1)
        + 2.0 * (HtH0[0] * am0 + HtH0[1] * am1) + H0sq
    )
    if quad < 0.0:
        quad = 0.0
    czz = c00 * z0 * z0 + 2.0 * cs * z0 * z1 + c11 * z1 * z1
    sq = (quad - czz / h) / h
    if sq < 0.0:
        sq = 0.0
    ll = -0.5 * (n_obs * (LOG_2PI + log_h) + np.log(detm) + sq)
    if not np.isfinite(ll):
        return -np.inf, False
    return ll, True


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def kalman_replay_batch(
    al, be, gm, scaled, B0, P0, G, HtH0, H0sq, Hty, H0ty, ysq, h, dt, n_obs,
):
    """Replay the filter from the segment prior over a whole window per particle.

    ``Hty`` is ``(n, K, d)`` with one precomputed ``H'y_k`` per step, ``ysq``
    is ``(K,)``, and the step length ``dt`` is common to the window.  Only the
    final step's conditional log-likelihood is returned, along with the final
    state pair.
    """
    n = al.shape[0]
    d = al.shape[1]
    n_steps = ysq.shape[0]
    log_h = np.log(h)
    Bout = np.empty((n, d))
    Pout = np.empty((n, d, d))
    ll = np.full(n, -np.inf)
    ok = np.ones(n, dtype=np.bool_)
    for p in prange(n):
        B = np.empty(d)
        Pc = np.empty((d, d))
        for i in range(d):
            B[i] = B0[i]
            for j in range(d):
                Pc[i, j] = P0[i, j]
        good = True
        llp = -np.inf
        for k in range(n_steps):
            last = k == n_steps - 1
            llp, good = _step_one(
                al[p], be[p], gm[p], scaled, B, Pc, G[p], HtH0[p], H0sq[p],
                Hty[p, k], H0ty[p, k], ysq[k], h, log_h, dt, n_obs, last,
            )
            if not good:
                break
        ok[p] = good
        ll[p] = llp if good else -np.inf
        for i in range(d):
            Bout[p, i] = B[i]
            for j in range(d):
                Pout[p, i, j] = Pc[i, j]
    return Bout, Pout, ll, ok


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def kalman_step_batch(
    al, be, gm, scaled, Bin, Pin, G, HtH0, H0sq, Hty_k, H0ty_k, ysq_k, h, dt, n_obs,
):
    """Advance every particle's carried (B, P) through one predict/update."""
    n = al.shape[0]
    d = al.shape[1]
    log_h = np.log(h)
    Bout = Bin.copy()
    Pout = Pin.copy()
    ll = np.full(n, -np.inf)
    ok = np.ones(n, dtype=np.bool_)
    for p in prange(n):
        llp, good = _step_one(
            al[p], be[p], gm[p], scaled, Bout[p], Pout[p], G[p], HtH0[p], H0sq[p],
            Hty_k[p], H0ty_k[p], ysq_k, h, log_h, dt, n_obs, True,
        )
        ok[p] = good
        ll[p] = llp if good else -np.inf
    return Bout, Pout, ll, ok


def warmup(dims=(1, 2)):
    """Compile the kernels on tiny inputs so later timings exclude compilation."""
    taus = np.array([0.5, 1.0])
    for d in dims:
        n = 2
        aq = np.zeros((n, d, d))
        alq = np.tile(np.eye(d) * 1e-4, (n, 1, 1))
        b = np.full((n, d), 0.1)
        Beta = np.tile(-0.3 * np.eye(d), (n, 1, 1))
        gamma = -np.ones(d)
        riccati_sweep_batch(
            aq, d == 2, alq, d == 1, b, 0.0, Beta, gamma,
            taus, 10, 1e-12, 1e-6, 0.5, 1e12,
        )
        al = np.full((n, d), 0.3)
        be = np.full((n, d), 0.01)
        gm = np.tile(np.eye(d) * 1e-4, (n, 1, 1))
        G = np.tile(np.eye(d), (n, 1, 1))
        HtH0 = np.zeros((n, d))
        H0sq = np.zeros(n)
        K = 3
        Hty = np.zeros((n, K, d))
        H0ty = np.zeros((n, K))
        ysq = np.full(K, 1e-4)
        B0 = np.zeros(d)
        P0 = np.eye(d) * 0.01
        Bc, Pc, _, _ = kalman_replay_batch(
            al, be, gm, True, B0, P0, G, HtH0, H0sq, Hty, H0ty, ysq, 1e-4, 0.1, d
        )
        kalman_step_batch(
            al, be, gm, False, Bc, Pc, G, HtH0, H0sq, Hty[:, 0], H0ty[:, 0],
            float(ysq[0]), 1e-4, 0.1, d,
        )
