"""Numba kernels: matching costs, min-projections, dual passes, chain DP.

Conventions used by every kernel here:
  - descriptor fields are (H, W, 64) float64 or (H, W) uint64 bit-packed
  - a displacement label l in [0, D) encodes the offset l - D//2
  - pixel (y, x) with labels (ul, vl) matches (y + vl - D//2, x + ul - D//2)
  - out-of-image matches cost COST_OUTSIDE
  - argmin ties resolve to the smallest label (ascending scan, strict less)

Kernels are deterministic for any thread count: parallel loops write
disjoint slices and no floating-point reductions cross pixels.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

M_BITS = 64
COST_OUTSIDE = float(M_BITS + 1)

_C1 = np.uint64(0x5555555555555555)
_C2 = np.uint64(0x3333333333333333)
_C4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_CM = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@njit(cache=True, inline="always")
def popcount64(x):
    x = x - ((x >> _S1) & _C1)
    x = (x & _C2) + ((x >> _S2) & _C2)
    x = (x + (x >> _S4)) & _C4
    return np.int64((x * _CM) >> _S56)


@njit(cache=True, inline="always")
def _qcost(bits1, bits2, y, x, ty, tx, height, width):
    if 0 <= ty < height and 0 <= tx < width:
        return 2.0 * popcount64(bits1[y, x] ^ bits2[ty, tx]) - 64.0
    return COST_OUTSIDE


@njit(cache=True, inline="always")
def _fcost(f1, f2, y, x, ty, tx, height, width):
    if 0 <= ty < height and 0 <= tx < width:
        acc = 0.0
        for k in range(M_BITS):
            acc += f1[y, x, k] * f2[ty, tx, k]
        return -acc
    return COST_OUTSIDE


@njit(cache=True, parallel=True)
def minproj_q(bits1, bits2, d, c_u, c_v, arg_v, arg_u):
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for ul in range(d):
                c_u[y, x, ul] = np.inf
                arg_v[y, x, ul] = 0
            for vl in range(d):
                c_v[y, x, vl] = np.inf
                arg_u[y, x, vl] = 0
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width)
                    if c < c_u[y, x, ul]:
                        c_u[y, x, ul] = c
                        arg_v[y, x, ul] = vl
                    if c < c_v[y, x, vl]:
                        c_v[y, x, vl] = c
                        arg_u[y, x, vl] = ul


@njit(cache=True, parallel=True)
def minproj_f(f1, f2, d, c_u, c_v, arg_v, arg_u):
    height, width = f1.shape[:2]
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for ul in range(d):
                c_u[y, x, ul] = np.inf
                arg_v[y, x, ul] = 0
            for vl in range(d):
                c_v[y, x, vl] = np.inf
                arg_u[y, x, vl] = 0
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _fcost(f1, f2, y, x, ty, tx, height, width)
                    if c < c_u[y, x, ul]:
                        c_u[y, x, ul] = c
                        arg_v[y, x, ul] = vl
                    if c < c_v[y, x, vl]:
                        c_v[y, x, vl] = c
                        arg_u[y, x, vl] = ul


@njit(cache=True, parallel=True)
def minproj_fq(f1, f2, bits1, bits2, d, c_u, c_v, arg_v, arg_u):
    # inner argmin on the quantized cost, outer value on the full cost
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for ul in range(d):
                tx = x + ul - r
                best = np.inf
                bestv = 0
                for vl in range(d):
                    ty = y + vl - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width)
                    if c < best:
                        best = c
                        bestv = vl
                arg_v[y, x, ul] = bestv
                c_u[y, x, ul] = _fcost(f1, f2, y, x, y + bestv - r, tx, height, width)
            for vl in range(d):
                ty = y + vl - r
                best = np.inf
                bestu = 0
                for ul in range(d):
                    tx = x + ul - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width)
                    if c < best:
                        best = c
                        bestu = ul
                arg_u[y, x, vl] = bestu
                c_v[y, x, vl] = _fcost(f1, f2, y, x, ty, x + bestu - r, height, width)


@njit(cache=True, parallel=True)
def pass_vu_q(bits1, bits2, lam3, lam4, d):
    # lam3[y,x,ul] += min_vl [ cost(ul,vl) - lam4[y,x,vl] ]
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for ul in range(d):
                tx = x + ul - r
                best = np.inf
                for vl in range(d):
                    ty = y + vl - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width) - lam4[y, x, vl]
                    if c < best:
                        best = c
                lam3[y, x, ul] += best


@njit(cache=True, parallel=True)
def pass_vu_f(f1, f2, lam3, lam4, d):
    height, width = f1.shape[:2]
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for ul in range(d):
                tx = x + ul - r
                best = np.inf
                for vl in range(d):
                    ty = y + vl - r
                    c = _fcost(f1, f2, y, x, ty, tx, height, width) - lam4[y, x, vl]
                    if c < best:
                        best = c
                lam3[y, x, ul] += best


@njit(cache=True, parallel=True)
def pass_uv_q(bits1, bits2, lam3, lam4, d):
    # lam4[y,x,vl] += min_ul [ cost(ul,vl) - lam3[y,x,ul] ]
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for vl in range(d):
                ty = y + vl - r
                best = np.inf
                for ul in range(d):
                    tx = x + ul - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width) - lam3[y, x, ul]
                    if c < best:
                        best = c
                lam4[y, x, vl] += best


@njit(cache=True, parallel=True)
def pass_uv_f(f1, f2, lam3, lam4, d):
    height, width = f1.shape[:2]
    r = d // 2
    for y in prange(height):
        for x in range(width):
            for vl in range(d):
                ty = y + vl - r
                best = np.inf
                for ul in range(d):
                    tx = x + ul - r
                    c = _fcost(f1, f2, y, x, ty, tx, height, width) - lam3[y, x, ul]
                    if c < best:
                        best = c
                lam4[y, x, vl] += best


@njit(cache=True, parallel=True)
def crossterm_q(bits1, bits2, lam3, lam4, d, out):
    # out[y,x] = min_{ul,vl} [ cost - lam3(ul) - lam4(vl) ]
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            best = np.inf
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width) - lam3[y, x, ul] - lam4[y, x, vl]
                    if c < best:
                        best = c
            out[y, x] = best


@njit(cache=True, parallel=True)
def crossterm_f(f1, f2, lam3, lam4, d, out):
    height, width = f1.shape[:2]
    r = d // 2
    for y in prange(height):
        for x in range(width):
            best = np.inf
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _fcost(f1, f2, y, x, ty, tx, height, width) - lam3[y, x, ul] - lam4[y, x, vl]
                    if c < best:
                        best = c
            out[y, x] = best


@njit(cache=True, parallel=True)
def decode_q(bits1, bits2, lam3, lam4, d, out_u, out_v):
    height, width = bits1.shape
    r = d // 2
    for y in prange(height):
        for x in range(width):
            best = np.inf
            bu = 0
            bv = 0
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _qcost(bits1, bits2, y, x, ty, tx, height, width) - lam3[y, x, ul] - lam4[y, x, vl]
                    if c < best:
                        best = c
                        bu = ul
                        bv = vl
            out_u[y, x] = bu
            out_v[y, x] = bv


@njit(cache=True, parallel=True)
def decode_f(f1, f2, lam3, lam4, d, out_u, out_v):
    height, width = f1.shape[:2]
    r = d // 2
    for y in prange(height):
        for x in range(width):
            best = np.inf
            bu = 0
            bv = 0
            for ul in range(d):
                tx = x + ul - r
                for vl in range(d):
                    ty = y + vl - r
                    c = _fcost(f1, f2, y, x, ty, tx, height, width) - lam3[y, x, ul] - lam4[y, x, vl]
                    if c < best:
                        best = c
                        bu = ul
                        bv = vl
            out_u[y, x] = bu
            out_v[y, x] = bv


@njit(cache=True)
def dt_message_into(h, w, tau1, tau2, out):
    """out[t] = min_s h[s] + w * min(tau1*|t-s|, tau2), evaluated exactly.

    Same-slope envelope tracking makes this O(D); the truncation floor
    recovers every source whose penalty saturates.
    """
    d = h.shape[0]
    # ascending envelope (sources s <= t)
    bi = 0
    for t in range(d):
        if t == 0:
            out[0] = h[0]
        else:
            vin = h[bi] + w * min(tau1 * (t - bi), tau2)
            if h[t] < vin:
                bi = t
                out[t] = h[t]
            else:
                out[t] = vin
    # descending envelope (sources s >= t)
    bi = d - 1
    for t in range(d - 1, -1, -1):
        if t == d - 1:
            v = h[t]
        else:
            vin = h[bi] + w * min(tau1 * (bi - t), tau2)
            if h[t] < vin:
                bi = t
                v = h[t]
            else:
                v = vin
        if v < out[t]:
            out[t] = v
    # truncation floor
    hmin = h[0]
    for s in range(1, d):
        if h[s] < hmin:
            hmin = h[s]
    floor = hmin + w * tau2
    for t in range(d):
        if floor < out[t]:
            out[t] = floor


@njit(cache=True)
def _chain_bound(h, w, tau1, tau2, msg, acc):
    # exact optimum of a chain: unaries h (n, D), edge weights w (n-1,)
    n, d = h.shape
    for t in range(d):
        acc[t] = h[0, t]
    for i in range(1, n):
        dt_message_into(acc, w[i - 1], tau1, tau2, msg)
        for t in range(d):
            acc[t] = h[i, t] + msg[t]
    best = acc[0]
    for t in range(1, d):
        if acc[t] < best:
            best = acc[t]
    return best


@njit(cache=True, parallel=True)
def chain_bounds_rows(h, w, tau1, tau2, out):
    height, width, d = h.shape
    for y in prange(height):
        msg = np.empty(d, np.float64)
        acc = np.empty(d, np.float64)
        out[y] = _chain_bound(h[y], w[y], tau1, tau2, msg, acc)


@njit(cache=True, parallel=True)
def chain_bounds_cols(h, w, tau1, tau2, out):
    height, width, d = h.shape
    for x in prange(width):
        msg = np.empty(d, np.float64)
        acc = np.empty(d, np.float64)
        hc = np.empty((height, d), np.float64)
        wc = np.empty(max(height - 1, 1), np.float64)
        for i in range(height):
            for t in range(d):
                hc[i, t] = h[i, x, t]
        for i in range(height - 1):
            wc[i] = w[i, x]
        out[x] = _chain_bound(hc[:height], wc[: max(height - 1, 1)], tau1, tau2, msg, acc)


@njit(cache=True)
def _extract_chain(h, w, tau1, tau2, reverse, q, carry, msg, t_buf):
    """Tight modular minorant of a chain, written into q.

    Sequential scan with a carry capped at the message saturation level
    w * min(tau2, tau1*(D-1)); the cap never alters distance-transform
    outputs, so sum_i min_t q_i(t) equals the exact chain optimum while
    each pixel keeps a label-dependent share of the cost structure.
    """
    n, d = h.shape
    for j in range(n):
        i = n - 1 - j if reverse else j
        if j == 0:
            for t in range(d):
                t_buf[t] = h[i, t]
        else:
            iprev = n - j if reverse else j - 1
            we = w[min(i, iprev)]
            dt_message_into(carry, we, tau1, tau2, msg)
            for t in range(d):
                t_buf[t] = h[i, t] + msg[t]
        if j < n - 1:
            inext = n - 2 - j if reverse else j + 1
            cap = w[min(i, inext)] * min(tau2, tau1 * (d - 1))
            tmin = t_buf[0]
            for t in range(1, d):
                if t_buf[t] < tmin:
                    tmin = t_buf[t]
            for t in range(d):
                qv = t_buf[t] - cap
                if qv < tmin:
                    qv = tmin
                q[i, t] = qv
                carry[t] = t_buf[t] - qv
        else:
            for t in range(d):
                q[i, t] = t_buf[t]


@njit(cache=True, parallel=True)
def extract_rows(h, w, tau1, tau2, reverse, q):
    height, width, d = h.shape
    for y in prange(height):
        carry = np.empty(d, np.float64)
        msg = np.empty(d, np.float64)
        t_buf = np.empty(d, np.float64)
        _extract_chain(h[y], w[y], tau1, tau2, reverse, q[y], carry, msg, t_buf)


@njit(cache=True, parallel=True)
def extract_cols(h, w, tau1, tau2, reverse, q):
    height, width, d = h.shape
    for x in prange(width):
        carry = np.empty(d, np.float64)
        msg = np.empty(d, np.float64)
        t_buf = np.empty(d, np.float64)
        hc = np.empty((height, d), np.float64)
        qc = np.empty((height, d), np.float64)
        wc = np.empty(max(height - 1, 1), np.float64)
        for i in range(height):
            for t in range(d):
                hc[i, t] = h[i, x, t]
        for i in range(height - 1):
            wc[i] = w[i, x]
        _extract_chain(hc, wc, tau1, tau2, reverse, qc, carry, msg, t_buf)
        for i in range(height):
            for t in range(d):
                q[i, x, t] = qc[i, t]
