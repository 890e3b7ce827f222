"""Pure-numpy kernels (vectorised over particles)."""
from __future__ import annotations

import numpy as np

from .grid import CellGrid
from .tableau import A, B5, E

ALIVE, ESCAPED, NONFINITE = 0, 1, 2
_BISECT_ITERS = 40


def potential_grad(q, pp):
    """Gradient of k2.q^2/2 + k4|q|^gamma for rows of ``q``."""
    k4, gamma, k2 = pp[0], pp[1], pp[2:]
    g = q * k2
    if k4 != 0.0:
        r2 = np.einsum("ij,ij->i", q, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(r2 > 0.0, k4 * gamma * r2 ** (0.5 * (gamma - 2.0)),
                           0.0 if gamma > 2.0 else k4 * gamma)
        g = g + fac[:, None] * q
    return g


def potential_value(q, pp):
    k4, gamma, k2 = pp[0], pp[1], pp[2:]
    r = np.sqrt(np.einsum("ij,ij->i", q, q))
    return 0.5 * np.einsum("ij,ij->i", q * k2, q) + k4 * r**gamma


def _pairs(x, grid: CellGrid):
    """Candidate (query, particle) index pairs from the 3**d neighbouring cells."""
    m = x.shape[0]
    n = grid.n
    if n == 0 or m == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if grid.brute:
        return np.repeat(np.arange(m), n), np.tile(np.arange(n), m)
    cq = np.floor((x - grid.origin) / grid.cell)
    # far-away queries have no neighbours; keep the cast in range
    np.clip(cq, -2, grid.shape + 1, out=cq)
    cq = cq.astype(np.int64)
    qi_parts, pj_parts = [], []
    for off in grid.offsets:
        nb = cq + off
        ok = np.all((nb >= 0) & (nb < grid.shape), axis=1)
        if not ok.any():
            continue
        rows = np.nonzero(ok)[0]
        key = nb[rows] @ grid.strides
        lo = np.searchsorted(grid.keys, key, side="left")
        hi = np.searchsorted(grid.keys, key, side="right")
        cnt = hi - lo
        tot = int(cnt.sum())
        if tot == 0:
            continue
        qi = np.repeat(rows, cnt)
        start = np.repeat(lo - np.cumsum(cnt) + cnt, cnt)
        pj = start + np.arange(tot)
        qi_parts.append(qi)
        pj_parts.append(pj)
    if not qi_parts:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(qi_parts), np.concatenate(pj_parts)


def field_query(x, grid: CellGrid, kind: int, kp):
    """Return (W*mu(x), grad W*mu(x)) for query rows ``x`` (M, d)."""
    x = np.asarray(x, dtype=np.float64)
    m, d = x.shape
    wout = np.zeros(m)
    gout = np.zeros((m, d))
    if kind == 0 or grid.n == 0:
        return wout, gout
    a, c = kp[0], kp[1]
    qi, pj = _pairs(x, grid)
    if qi.size == 0:
        return wout, gout
    z = x[qi] - grid.q[pj]
    r2 = np.einsum("ij,ij->i", z, z)
    near = r2 < a * a
    qi, z, r2, wj = qi[near], z[near], r2[near], grid.w[pj[near]]
    t = 1.0 - r2 / (a * a)
    wout = np.bincount(qi, weights=wj * c * t**3, minlength=m)
    gfac = wj * (-6.0 * c / (a * a)) * t * t
    for j in range(d):
        gout[:, j] = np.bincount(qi, weights=gfac * z[:, j], minlength=m)
    return wout, gout


def brute_field(x, q, w, kind: int, kp):
    """All-pairs reference summation (no grid)."""
    x = np.asarray(x, dtype=np.float64)
    m, d = x.shape
    if kind == 0 or q.shape[0] == 0:
        return np.zeros(m), np.zeros((m, d))
    a, c = kp[0], kp[1]
    z = x[:, None, :] - q[None, :, :]
    r2 = np.einsum("mnj,mnj->mn", z, z)
    t = np.where(r2 < a * a, 1.0 - r2 / (a * a), 0.0)
    wv = (w[None, :] * c * t**3).sum(axis=1)
    g = ((w[None, :] * (-6.0 * c / (a * a)) * t * t)[:, :, None] * z).sum(axis=1)
    return wv, g


def _rhs(p, q, grid, kind, kp, pp):
    _, gf = field_query(q, grid, kind, kp)
    dp = -potential_grad(q, pp) - gf
    speed = np.sqrt(np.einsum("ij,ij->i", dp, dp) + np.einsum("ij,ij->i", p, p))
    return dp, p.copy(), speed


def _dp_step(p, q, s, k1, h, grid, kind, kp, pp):
    """One Dormand-Prince step from (p, q, s) with first stage ``k1``.

    Returns the 5th-order state, the embedded error vector and the final
    stage (reused as the next first stage).
    """
    kps, kqs, kss = [k1[0]], [k1[1]], [k1[2]]
    hh = h[:, None]
    for i in range(1, 7):
        dp_ = sum(A[i][j] * kps[j] for j in range(i) if A[i][j] != 0.0)
        dq_ = sum(A[i][j] * kqs[j] for j in range(i) if A[i][j] != 0.0)
        pi = p + hh * dp_
        qi = q + hh * dq_
        kp_, kq_, ks_ = _rhs(pi, qi, grid, kind, kp, pp)
        kps.append(kp_)
        kqs.append(kq_)
        kss.append(ks_)
    # the 7th stage is evaluated at the 5th-order solution (FSAL)
    p5 = p + hh * sum(B5[j] * kps[j] for j in range(7) if B5[j] != 0.0)
    q5 = q + hh * sum(B5[j] * kqs[j] for j in range(7) if B5[j] != 0.0)
    s5 = s + h * sum(B5[j] * kss[j] for j in range(7) if B5[j] != 0.0)
    ep = hh * sum(E[j] * kps[j] for j in range(7))
    eq = hh * sum(E[j] * kqs[j] for j in range(7))
    es = h * sum(E[j] * kss[j] for j in range(7))
    return (p5, q5, s5), (ep, eq, es), (kps[6], kqs[6], kss[6])


def _err_norm(y0, y1, e, tol):
    p0, q0, s0 = y0
    p1, q1, s1 = y1
    ep, eq, es = e
    with np.errstate(invalid="ignore", over="ignore"):
        sp = np.max(np.abs(ep) / (tol * (1.0 + np.maximum(np.abs(p0), np.abs(p1)))), axis=1)
        sq = np.max(np.abs(eq) / (tol * (1.0 + np.maximum(np.abs(q0), np.abs(q1)))), axis=1)
        ss = np.abs(es) / (tol * (1.0 + np.maximum(np.abs(s0), np.abs(s1))))
        err = np.maximum(np.maximum(sp, sq), ss)
    return np.where(np.isfinite(err), err, np.inf)


def advance(P, Q, S, active, dt, tol, xmax, hmin, hinit, grid, kind, kp, pp):
    """Advance every active particle by ``dt`` under a frozen field.

    Returns (P1, Q1, S1, status, t_event, h_last); ``t_event`` is the time
    within the step at which an escape was declared (NaN otherwise).
    """
    P = np.array(P, dtype=np.float64)
    Q = np.array(Q, dtype=np.float64)
    S = np.array(S, dtype=np.float64)
    n = P.shape[0]
    status = np.zeros(n, np.int8)
    t_event = np.full(n, np.nan)
    hlast = np.array(hinit, dtype=np.float64)
    t = np.zeros(n)
    h = np.minimum(hlast, dt)
    run = np.array(active, dtype=bool).copy()
    if not run.any():
        return P, Q, S, status, t_event, hlast

    idx = np.nonzero(run)[0]
    k1 = _rhs(P[idx], Q[idx], grid, kind, kp, pp)
    bad = ~(np.all(np.isfinite(k1[0]), axis=1) & np.isfinite(k1[2]))
    K1p = np.zeros_like(P)
    K1q = np.zeros_like(Q)
    K1s = np.zeros(n)
    K1p[idx], K1q[idx], K1s[idx] = k1
    if bad.any():
        status[idx[bad]] = NONFINITE
        run[idx[bad]] = False
    grow_ok = np.ones(n, dtype=bool)

    while True:
        idx = np.nonzero(run)[0]
        if idx.size == 0:
            break
        remaining = dt - t[idx]
        last = h[idx] >= remaining
        hi = np.where(last, remaining, h[idx])
        y0 = (P[idx], Q[idx], S[idx])
        with np.errstate(over="ignore", invalid="ignore"):
            y1, e, k7 = _dp_step(*y0, (K1p[idx], K1q[idx], K1s[idx]), hi, grid, kind, kp, pp)
        err = _err_norm(y0, y1, e, tol)
        acc = err <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(err > 0.0, 0.9 * err ** -0.2, 5.0)
        fac = np.clip(fac, 0.2, 5.0)
        # no growth right after a rejection
        fac = np.where(acc & ~grow_ok[idx], np.minimum(fac, 1.0), fac)

        if acc.any():
            ia = idx[acc]
            P[ia], Q[ia], S[ia] = y1[0][acc], y1[1][acc], y1[2][acc]
            K1p[ia], K1q[ia], K1s[ia] = k7[0][acc], k7[1][acc], k7[2][acc]
            r = np.sqrt(np.einsum("ij,ij->i", P[ia], P[ia]) + np.einsum("ij,ij->i", Q[ia], Q[ia]))
            out = r >= xmax
            if out.any():
                sel = np.nonzero(acc)[0][out]
                te = _bisect_crossing((y0[0][sel], y0[1][sel], y0[2][sel]), hi[sel], xmax,
                                      grid, kind, kp, pp)
                ie = idx[sel]
                t_event[ie] = t[ie] + te
                status[ie] = ESCAPED
                run[ie] = False
            t[ia] = np.where(last[acc], dt, t[ia] + hi[acc])
            grow_ok[ia] = True
            if not np.all(last[acc]):
                mid = ia[~last[acc]]
                h[mid] = hi[acc][~last[acc]] * fac[acc][~last[acc]]
                hlast[mid] = h[mid]
            run[ia[last[acc]]] = False

        if (~acc).any():
            ir = idx[~acc]
            hr = hi[~acc] * fac[~acc]
            grow_ok[ir] = False
            h[ir] = hr
            hlast[ir] = hr
            collapse = hr < hmin
            if collapse.any():
                ic = ir[collapse]
                status[ic] = ESCAPED
                t_event[ic] = t[ic]
                run[ic] = False

    finite = np.all(np.isfinite(P), axis=1) & np.all(np.isfinite(Q), axis=1) & np.isfinite(S)
    status[(status == ALIVE) & ~finite] = NONFINITE
    return P, Q, S, status, t_event, hlast


def _bisect_crossing(y0, hstep, xmax, grid, kind, kp, pp):
    """Smallest sub-step length at which a fresh RK step reaches |x| >= xmax."""
    p0, q0, s0 = y0
    k1 = _rhs(p0, q0, grid, kind, kp, pp)
    lo = np.zeros_like(hstep)
    hi = hstep.copy()
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        with np.errstate(over="ignore", invalid="ignore"):
            (pm, qm, _), _, _ = _dp_step(p0, q0, s0, k1, mid, grid, kind, kp, pp)
            r = np.sqrt(np.einsum("ij,ij->i", pm, pm) + np.einsum("ij,ij->i", qm, qm))
        beyond = ~(r < xmax)
        hi = np.where(beyond, mid, hi)
        lo = np.where(beyond, lo, mid)
    return hi
