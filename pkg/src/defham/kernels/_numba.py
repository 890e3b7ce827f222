"""numba kernels: one particle per loop iteration, ``prange`` over particles."""
from __future__ import annotations

import warnings

import numpy as np
from numba import njit, prange
from numba.core.errors import NumbaWarning

from .grid import CellGrid
from .tableau import A, B5, E

ALIVE, ESCAPED, NONFINITE = 0, 1, 2

# the fallback threading layer is fine for us
warnings.filterwarnings("ignore", message="The TBB threading layer", category=NumbaWarning)
_BISECT_ITERS = 40

_A = np.zeros((7, 7))
for _i, _row in enumerate(A):
    _A[_i, : len(_row)] = _row
_B5 = np.array(B5)
_E = np.array(E)


@njit(cache=True, nogil=True)
def _potential_grad(q, pp, out):
    d = q.shape[0]
    k4 = pp[0]
    gamma = pp[1]
    r2 = 0.0
    for j in range(d):
        r2 += q[j] * q[j]
    fac = 0.0
    if k4 != 0.0:
        if r2 > 0.0:
            fac = k4 * gamma * r2 ** (0.5 * (gamma - 2.0))
        elif gamma == 2.0:
            fac = k4 * gamma
    for j in range(d):
        out[j] = pp[2 + j] * q[j] + fac * q[j]


@njit(cache=True, nogil=True)
def _field_at(x, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c, gout):
    d = x.shape[0]
    for j in range(d):
        gout[j] = 0.0
    wsum = 0.0
    n = gq.shape[0]
    if kind == 0 or n == 0:
        return wsum
    a2 = a * a
    gcoef = -6.0 * c / a2
    if brute:
        for i in range(n):
            r2 = 0.0
            for j in range(d):
                z = x[j] - gq[i, j]
                r2 += z * z
            if r2 < a2:
                t = 1.0 - r2 / a2
                wsum += gw[i] * c * t * t * t
                f = gw[i] * gcoef * t * t
                for j in range(d):
                    gout[j] += f * (x[j] - gq[i, j])
        return wsum
    cq = np.empty(d, np.int64)
    for j in range(d):
        v = np.floor((x[j] - origin[j]) / cell)
        if v < -2.0:
            v = -2.0
        elif v > shape[j] + 1.0:
            v = shape[j] + 1.0
        cq[j] = np.int64(v)
    for o in range(offsets.shape[0]):
        key = 0
        ok = True
        for j in range(d):
            nb = cq[j] + offsets[o, j]
            if nb < 0 or nb >= shape[j]:
                ok = False
                break
            key += nb * strides[j]
        if not ok:
            continue
        lo = np.searchsorted(gkeys, key, side="left")
        hi = np.searchsorted(gkeys, key, side="right")
        for i in range(lo, hi):
            r2 = 0.0
            for j in range(d):
                z = x[j] - gq[i, j]
                r2 += z * z
            if r2 < a2:
                t = 1.0 - r2 / a2
                wsum += gw[i] * c * t * t * t
                f = gw[i] * gcoef * t * t
                for j in range(d):
                    gout[j] += f * (x[j] - gq[i, j])
    return wsum


@njit(parallel=True, cache=True, nogil=True)
def _field_query(x, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c):
    m, d = x.shape
    wout = np.zeros(m)
    gout = np.zeros((m, d))
    for i in prange(m):
        g = np.empty(d)
        wout[i] = _field_at(x[i], gq, gw, gkeys, origin, shape, strides, offsets, cell, brute,
                            kind, a, c, g)
        for j in range(d):
            gout[i, j] = g[j]
    return wout, gout


@njit(cache=True, nogil=True)
def _rhs(y, d, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c, pp,
         kout, gbuf, pbuf):
    # y = (p[0:d], q[d:2d], s); kout gets (dp, dq, ds)
    q = y[d:2 * d]
    _field_at(q, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c, gbuf)
    _potential_grad(q, pp, pbuf)
    sp = 0.0
    for j in range(d):
        dp = -pbuf[j] - gbuf[j]
        kout[j] = dp
        kout[d + j] = y[j]
        sp += dp * dp + y[j] * y[j]
    kout[2 * d] = np.sqrt(sp)


@njit(cache=True, nogil=True)
def _dp_step(y0, k, h, d, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind,
             a, c, pp, ytmp, y5, err, gbuf, pbuf):
    # k[0] must hold the first stage on entry; k[6] holds the FSAL stage on exit
    m = y0.shape[0]
    for i in range(1, 7):
        for l in range(m):
            acc = 0.0
            for j in range(i):
                acc += _A[i, j] * k[j, l]
            ytmp[l] = y0[l] + h * acc
        _rhs(ytmp, d, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c,
             pp, k[i], gbuf, pbuf)
    for l in range(m):
        acc5 = 0.0
        acce = 0.0
        for j in range(7):
            acc5 += _B5[j] * k[j, l]
            acce += _E[j] * k[j, l]
        y5[l] = y0[l] + h * acc5
        err[l] = h * acce


@njit(cache=True, nogil=True)
def _err_norm(y0, y1, e, tol):
    worst = 0.0
    for l in range(y0.shape[0]):
        sc = tol * (1.0 + max(abs(y0[l]), abs(y1[l])))
        v = abs(e[l]) / sc
        if not np.isfinite(v):
            return np.inf
        if v > worst:
            worst = v
    return worst


@njit(cache=True, nogil=True)
def _phase_norm(y, d):
    r2 = 0.0
    for j in range(2 * d):
        r2 += y[j] * y[j]
    return np.sqrt(r2)


@njit(parallel=True, cache=True, nogil=True)
def _advance(P, Q, S, active, dt, tol, xmax, hmin, hinit, gq, gw, gkeys, origin, shape,
             strides, offsets, cell, brute, kind, a, c, pp):
    n, d = P.shape
    m = 2 * d + 1
    P1 = P.copy()
    Q1 = Q.copy()
    S1 = S.copy()
    status = np.zeros(n, np.int8)
    t_event = np.full(n, np.nan)
    hlast = hinit.copy()
    for i in prange(n):
        if not active[i]:
            continue
        y = np.empty(m)
        for j in range(d):
            y[j] = P[i, j]
            y[d + j] = Q[i, j]
        y[2 * d] = S[i]
        k = np.zeros((7, m))
        ytmp = np.empty(m)
        y5 = np.empty(m)
        e = np.empty(m)
        gbuf = np.empty(d)
        pbuf = np.empty(d)
        _rhs(y, d, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute, kind, a, c, pp,
             k[0], gbuf, pbuf)
        bad = False
        for l in range(m):
            if not np.isfinite(k[0, l]):
                bad = True
        if bad:
            status[i] = NONFINITE
            continue
        t = 0.0
        h = min(hinit[i], dt)
        grow_ok = True
        while True:
            remaining = dt - t
            last = h >= remaining
            hs = remaining if last else h
            _dp_step(y, k, hs, d, gq, gw, gkeys, origin, shape, strides, offsets, cell, brute,
                     kind, a, c, pp, ytmp, y5, e, gbuf, pbuf)
            err = _err_norm(y, y5, e, tol)
            if err > 0.0:
                fac = 0.9 * err ** -0.2
            else:
                fac = 5.0
            fac = min(5.0, max(0.2, fac))
            if err <= 1.0:
                if not grow_ok:
                    fac = min(fac, 1.0)
                if _phase_norm(y5, d) >= xmax:
                    # bisect the sub-step length of a fresh step from y
                    k0 = k[0].copy()
                    lo = 0.0
                    hi = hs
                    kk = np.zeros((7, m))
                    for _ in range(_BISECT_ITERS):
                        mid = 0.5 * (lo + hi)
                        kk[0, :] = k0
                        _dp_step(y, kk, mid, d, gq, gw, gkeys, origin, shape, strides, offsets,
                                 cell, brute, kind, a, c, pp, ytmp, y5, e, gbuf, pbuf)
                        if not (_phase_norm(y5, d) < xmax):
                            hi = mid
                        else:
                            lo = mid
                    status[i] = ESCAPED
                    t_event[i] = t + hi
                    break
                for l in range(m):
                    y[l] = y5[l]
                    k[0, l] = k[6, l]
                grow_ok = True
                if last:
                    break
                t += hs
                h = hs * fac
                hlast[i] = h
            else:
                grow_ok = False
                h = hs * fac
                hlast[i] = h
                if h < hmin:
                    status[i] = ESCAPED
                    t_event[i] = t
                    break
        for j in range(d):
            P1[i, j] = y[j]
            Q1[i, j] = y[d + j]
        S1[i] = y[2 * d]
        if status[i] == ALIVE:
            for l in range(m):
                if not np.isfinite(y[l]):
                    status[i] = NONFINITE
    return P1, Q1, S1, status, t_event, hlast


def _grid_args(grid: CellGrid):
    return (grid.q, grid.w, grid.keys, grid.origin.astype(np.float64), grid.shape, grid.strides,
            grid.offsets, float(grid.cell), bool(grid.brute))


def field_query(x, grid: CellGrid, kind: int, kp):
    x = np.ascontiguousarray(x, dtype=np.float64)
    a, c = (float(kp[0]), float(kp[1])) if kind else (1.0, 0.0)
    return _field_query(x, *_grid_args(grid), int(kind), a, c)


def advance(P, Q, S, active, dt, tol, xmax, hmin, hinit, grid, kind, kp, pp):
    a, c = (float(kp[0]), float(kp[1])) if kind else (1.0, 0.0)
    return _advance(
        np.ascontiguousarray(P, dtype=np.float64), np.ascontiguousarray(Q, dtype=np.float64),
        np.ascontiguousarray(S, dtype=np.float64), np.ascontiguousarray(active, dtype=np.bool_),
        float(dt), float(tol), float(xmax), float(hmin),
        np.ascontiguousarray(hinit, dtype=np.float64), *_grid_args(grid), int(kind), a, c,
        np.ascontiguousarray(pp, dtype=np.float64),
    )
