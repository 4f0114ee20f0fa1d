"""Compiled inner loops.  One trajectory at a time, fixed summation order."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _mv(M, x, out):
    for i in range(M.shape[0]):
        acc = 0.0
        for j in range(M.shape[1]):
            acc += M[i, j] * x[j]
        out[i] = acc


@njit(cache=True, nogil=True)
def filter_chunk(r0, r1, ell, Z, sq, dt, k, half_sdt, C, P0, P1, K0, K1, c0, c1,
                 lo, hi, step0, done, tau, ell_hit, rec_col, rec_out):
    """Advance every live trajectory by ``Z.shape[1]`` steps.

    Filter j updates as ``r_j <- P_j r_j + K_j dy + c_j`` with the shared
    increment ``dy = C r_k dt + dw``; the step matrices are given per step
    (stride-0 views when constant).  Crossing ``(-lo, hi)`` marks the row
    done and stores the interpolated time; ``rec_col[s] >= 0`` records the
    LLR after step ``s``.
    """
    n, K, m = Z.shape
    dim = r0.shape[1]
    Cr0 = np.empty(m)
    Cr1 = np.empty(m)
    dw = np.empty(m)
    dy = np.empty(m)
    tmp = np.empty(dim)
    tmp2 = np.empty(dim)
    for i in range(n):
        if done[i]:
            continue
        x0 = r0[i]
        x1 = r1[i]
        e = ell[i]
        for s in range(K):
            for c in range(m):
                dw[c] = Z[i, s, c] * sq
            _mv(C, x0, Cr0)
            _mv(C, x1, Cr1)
            vv = 0.0
            vdw = 0.0
            for c in range(m):
                v = Cr1[c] - Cr0[c]
                vv += v * v
                vdw += v * dw[c]
                dy[c] = (Cr1[c] if k == 1 else Cr0[c]) * dt + dw[c]
            e_new = e + (half_sdt * vv + vdw)
            _mv(P0[s], x0, tmp)
            _mv(K0[s], dy, tmp2)
            for c in range(dim):
                x0[c] = tmp[c] + tmp2[c] + c0[s, c]
            _mv(P1[s], x1, tmp)
            _mv(K1[s], dy, tmp2)
            for c in range(dim):
                x1[c] = tmp[c] + tmp2[c] + c1[s, c]
            if rec_col[s] >= 0:
                rec_out[i, rec_col[s]] = e_new
            if e_new >= hi or e_new <= -lo:
                bound = hi if e_new >= hi else -lo
                tau[i] = (step0 + s + (bound - e) / (e_new - e)) * dt
                ell_hit[i] = e_new
                done[i] = True
                e = e_new
                break
            if not np.isfinite(e_new):
                e = e_new
                break
            e = e_new
        ell[i] = e


@njit(cache=True, nogil=True)
def gaussian_chunk(ell, Z, sgn, dI, sd, step0, lo, hi, dt, done, tau, ell_hit, rec_col, rec_out):
    n, K, _ = Z.shape
    for i in range(n):
        if done[i]:
            continue
        e = ell[i]
        for s in range(K):
            g = step0 + s
            e_new = e + (sgn * dI[g] + sd[g] * Z[i, s, 0])
            if rec_col[s] >= 0:
                rec_out[i, rec_col[s]] = e_new
            if e_new >= hi or e_new <= -lo:
                bound = hi if e_new >= hi else -lo
                tau[i] = (g + (bound - e) / (e_new - e)) * dt
                ell_hit[i] = e_new
                done[i] = True
                e = e_new
                break
            e = e_new
        ell[i] = e


@njit(cache=True, nogil=True)
def record_filter(dy, dt, C, P0, P1, K0, K1, c0, c1):
    """LLR path of both filters driven by measured increments ``dy``."""
    n, m = dy.shape
    dim = P0.shape[1]
    x0 = np.zeros(dim)
    x1 = np.zeros(dim)
    Cr0 = np.empty(m)
    Cr1 = np.empty(m)
    tmp = np.empty(dim)
    tmp2 = np.empty(dim)
    out = np.zeros(n + 1)
    e = 0.0
    for s in range(n):
        _mv(C, x0, Cr0)
        _mv(C, x1, Cr1)
        acc = 0.0
        q = 0.0
        for c in range(m):
            acc += (Cr1[c] - Cr0[c]) * dy[s, c]
            q += Cr1[c] * Cr1[c] - Cr0[c] * Cr0[c]
        e = e + (acc - 0.5 * q * dt)
        out[s + 1] = e
        _mv(P0[s], x0, tmp)
        _mv(K0[s], dy[s], tmp2)
        for c in range(dim):
            x0[c] = tmp[c] + tmp2[c] + c0[s, c]
        _mv(P1[s], x1, tmp)
        _mv(K1[s], dy[s], tmp2)
        for c in range(dim):
            x1[c] = tmp[c] + tmp2[c] + c1[s, c]
    return out
