"""Hot numeric kernels.

Everything here is numba-compatible numpy. ``_accel.jit`` compiles the
functions when numba is available; with ``NCSFSP_DISABLE_NUMBA=1`` they run
unchanged as pure numpy/Python (slow, but bit-for-bit the same algorithm).
"""

from __future__ import annotations

import numpy as np

from ._accel import jit, prange

# Higham (2005) backward-error thresholds for the [m/m] Pade approximants.
_THETA3 = 1.495585217958292e-2
_THETA5 = 2.539398330063230e-1
_THETA7 = 9.504178996162932e-1
_THETA9 = 2.097847961257068e0
_THETA13 = 5.371920351148152e0

_B3 = np.array([120.0, 60.0, 12.0, 1.0])
_B5 = np.array([30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0])
_B7 = np.array([17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0])
_B9 = np.array(
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
     2162160.0, 110880.0, 3960.0, 90.0, 1.0]
)
_B13 = np.array(
    [64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
     1187353796428800.0, 129060195264000.0, 10559470521600.0,
     670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
     960960.0, 16380.0, 182.0, 1.0]
)


@jit
def _onenorm(M):
    return np.max(np.sum(np.abs(M), axis=0))


@jit
def _pade_low(M, b):
    # [m/m] Pade for m in {3, 5, 7, 9}: b has m + 1 coefficients
    n = M.shape[0]
    ident = np.eye(n)
    M2 = M @ M
    U = b[1] * ident
    V = b[0] * ident
    P = ident.copy()
    m = b.shape[0] - 1
    for k in range(1, m // 2 + 1):
        P = P @ M2
        U = U + b[2 * k + 1] * P
        V = V + b[2 * k] * P
    U = M @ U
    return np.ascontiguousarray(np.linalg.solve(V - U, V + U))


@jit
def _pade13(M):
    n = M.shape[0]
    ident = np.eye(n)
    b = _B13
    M2 = M @ M
    M4 = M2 @ M2
    M6 = M2 @ M4
    U = M @ (M6 @ (b[13] * M6 + b[11] * M4 + b[9] * M2)
             + b[7] * M6 + b[5] * M4 + b[3] * M2 + b[1] * ident)
    V = (M6 @ (b[12] * M6 + b[10] * M4 + b[8] * M2)
         + b[6] * M6 + b[4] * M4 + b[2] * M2 + b[0] * ident)
    return np.ascontiguousarray(np.linalg.solve(V - U, V + U))


@jit
def expm(M):
    """Matrix exponential by scaling and squaring with Pade approximants."""
    M = np.ascontiguousarray(M)
    nrm = _onenorm(M)
    if nrm <= _THETA3:
        return _pade_low(M, _B3)
    if nrm <= _THETA5:
        return _pade_low(M, _B5)
    if nrm <= _THETA7:
        return _pade_low(M, _B7)
    if nrm <= _THETA9:
        return _pade_low(M, _B9)
    s = int(np.ceil(np.log2(nrm / _THETA13)))
    if s < 0:
        s = 0
    R = np.ascontiguousarray(_pade13(M / (2.0 ** s)))
    for _ in range(s):
        R = R @ R
    return R


@jit
def propagate_pair(A, V, h):
    """Return (exp(A h), int_0^h exp(A s) ds @ V) from one augmented exponential."""
    n = A.shape[0]
    m = V.shape[1]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A * h
    M[:n, n:] = V * h
    E = expm(M)
    return np.ascontiguousarray(E[:n, :n]), np.ascontiguousarray(E[:n, n:])


@jit
def step_matrices_batch(A, B, Bw, dt, s):
    """Per-interval stochastic discretization for a batch of draws.

    dt[m] is the actuation interval, s[m, j] the intra-interval offset of
    actuator j.  Returns A_k, B_k, B^J_k and the held-disturbance matrix.
    """
    n = A.shape[0]
    na = B.shape[1]
    nw = Bw.shape[1]
    M = dt.shape[0]
    Ak = np.empty((M, n, n))
    Bk = np.empty((M, n, na))
    BJk = np.zeros((M, n, na))
    Bwk = np.empty((M, n, nw))
    BB = np.empty((n, na + nw))
    BB[:, :na] = B
    BB[:, na:] = Bw
    for m in range(M):
        E, G = propagate_pair(A, BB, dt[m])
        Ak[m] = E
        Bk[m] = G[:, :na]
        Bwk[m] = G[:, na:]
        for j in range(na):
            sj = s[m, j]
            if sj > 0.0:
                col = np.ascontiguousarray(B[:, j:j + 1])
                _, g = propagate_pair(A, col, sj)
                tail = expm(A * (dt[m] - sj))
                BJk[m, :, j] = -(tail @ g)[:, 0]
    return Ak, Bk, BJk, Bwk


@jit
def fractional_batch(A, B, d, s):
    """Fractional-delay propagator and input gains for a batch of draws.

    d[m] is the time advancement inside the interval, s[m, j] the offset of
    actuator j in that same interval.  Returns exp(A d), Gamma^- and Gamma^+.
    """
    n = A.shape[0]
    na = B.shape[1]
    M = d.shape[0]
    E = np.empty((M, n, n))
    Gm = np.zeros((M, n, na))
    Gp = np.zeros((M, n, na))
    for m in range(M):
        dm = d[m]
        Ed, G = propagate_pair(A, B, dm)
        E[m] = Ed
        for j in range(na):
            sj = s[m, j]
            if dm < sj:
                Gm[m, :, j] = G[:, j]
            elif dm > 0.0:
                col = np.ascontiguousarray(B[:, j:j + 1])
                _, g_pre = propagate_pair(A, col, sj)
                Gm[m, :, j] = (expm(A * (dm - sj)) @ g_pre)[:, 0]
                _, g_post = propagate_pair(A, col, dm - sj)
                Gp[m, :, j] = g_post[:, 0]
    return E, Gm, Gp


@jit
def _advance(A, x, v, h):
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A * h
    M[:n, n] = v * h
    E = expm(M)
    return E[:n, :n] @ x + E[:n, n]


@jit
def _simulate_one(A, B, Bw, t, aj, r_seq, w_time, w_amp, x0,
                  Af, Bf, Cf, Df, xs, us, ms, hs, zs, record_z):
    K, ns = t.shape
    na = aj.shape[1]
    n = A.shape[0]
    nr = r_seq.shape[1]
    nz = Af.shape[0]

    n_ev = K * (ns + na)
    times = np.empty(n_ev)
    kind = np.empty(n_ev, dtype=np.int64)
    kidx = np.empty(n_ev, dtype=np.int64)
    cidx = np.empty(n_ev, dtype=np.int64)
    e = 0
    for k in range(K):
        for i in range(ns):
            times[e] = t[k, i]
            kind[e] = 0
            kidx[e] = k
            cidx[e] = i
            e += 1
    for k in range(K):
        for j in range(na):
            times[e] = aj[k, j]
            kind[e] = 1
            kidx[e] = k
            cidx[e] = j
            e += 1
    order = np.argsort(times, kind="mergesort")

    # first actuator of each step (ties broken by index)
    first = np.empty(K, dtype=np.int64)
    for k in range(K):
        best = 0
        for j in range(1, na):
            if aj[k, j] < aj[k, best]:
                best = j
        first[k] = best

    x = x0.copy()
    u_app = np.zeros(na)
    z = np.zeros(nz)
    inp = np.zeros(nr + n)
    seen = np.zeros(K, dtype=np.int64)
    done = np.zeros(K, dtype=np.bool_)
    cur = times[order[0]]
    w_on = w_time <= cur
    status = 0  # 0 ok, 1 diverged, 2 causality violation
    for q in range(n_ev):
        ev = order[q]
        te = times[ev]
        if (not w_on) and w_time <= te:
            if w_time > cur:
                v = B @ u_app
                x = _advance(A, x, v, w_time - cur)
                cur = w_time
            w_on = True
        h = te - cur
        if h > 0.0:
            v = B @ u_app
            if w_on:
                v = v + Bw @ w_amp
            x = _advance(A, x, v, h)
            cur = te
        k = kidx[ev]
        c = cidx[ev]
        if kind[ev] == 0:
            ms[k, c] = x[c]
            seen[k] += 1
        else:
            if not done[k]:
                if seen[k] != ns or (k > 0 and not done[k - 1]):
                    status = 2
                    break
                for p in range(nr):
                    inp[p] = r_seq[k, p]
                for p in range(n):
                    inp[nr + p] = ms[k, p]
                if record_z:
                    zs[k] = z
                out = Cf @ z + Df @ inp
                z = Af @ z + Bf @ inp
                for p in range(na):
                    us[k, p] = out[p]
                for p in range(n):
                    hs[k, p] = out[na + p]
                done[k] = True
            if c == first[k]:
                xs[k] = x
            u_app[c] = us[k, c]
        nrm = 0.0
        for p in range(n):
            nrm += x[p] * x[p]
        if not np.isfinite(nrm) or nrm > 1e24:
            status = 1
            break
    return status


@jit(parallel=True)
def simulate_batch(A, B, Bw, t, aj, r_seq, w_time, w_amp, x0,
                   Af, Bf, Cf, Df, record_z):
    """Event-driven exact simulation of R independent replicas.

    The plant is integrated exactly between consecutive events (sensor
    samples, actuator switches, disturbance onset).  Step k of the feedback
    law fires at the first actuation instant of step k, consuming the k-th
    samples of every sensor.
    """
    R, K, ns = t.shape
    n = A.shape[0]
    na = aj.shape[2]
    nz = Af.shape[0]
    xs = np.full((R, K, n), np.nan)
    us = np.full((R, K, na), np.nan)
    ms = np.full((R, K, n), np.nan)
    hs = np.full((R, K, n), np.nan)
    if record_z:
        zs = np.full((R, K, nz), np.nan)
    else:
        zs = np.full((R, 1, nz), np.nan)
    status = np.zeros(R, dtype=np.int64)
    for rep in prange(R):
        status[rep] = _simulate_one(
            A, B, Bw, t[rep], aj[rep], r_seq, w_time, w_amp, x0[rep],
            Af, Bf, Cf, Df, xs[rep], us[rep], ms[rep], hs[rep], zs[rep], record_z,
        )
    return xs, us, ms, hs, zs, status


@jit
def kron_second_moment(samples):
    """Mean of kron(A_m, A_m) accumulated entry by entry (reference kernel)."""
    M, n, _ = samples.shape
    out = np.zeros((n * n, n * n))
    for m in range(M):
        Am = samples[m]
        for i in range(n):
            for j in range(n):
                a = Am[i, j]
                if a == 0.0:
                    continue
                for k in range(n):
                    for l in range(n):
                        out[i * n + k, j * n + l] += a * Am[k, l]
    return out / M
