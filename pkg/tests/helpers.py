"""Independent oracles shared across the test suite.

Everything here is deliberately written as plain loops or exhaustive
enumeration so it cannot share a failure mode with the library kernels.
"""

import itertools

import numpy as np


def translation_pair(rng, h, w, du, dv, noise=0.0):
    """Image pair where content truly translates by (du, dv), no wrap."""
    pad = max(abs(du), abs(dv)) + 1
    big = rng.uniform(0, 1, (h + 2 * pad, w + 2 * pad, 3))
    img1 = big[pad : pad + h, pad : pad + w].copy()
    img2 = big[pad - dv : pad - dv + h, pad - du : pad - du + w].copy()
    if noise:
        img2 = np.clip(img2 + rng.normal(0, noise, img2.shape), 0, 1)
    return img1, img2


def brute_cost_4d(D, mode, phi1=None, phi2=None, bits1=None, bits2=None):
    """Full 4D cost table by scalar loops: c4[y, x, ul, vl]."""
    if mode == "F":
        h, w = phi1.shape[:2]
    else:
        h, w = bits1.shape
    r = D // 2
    c4 = np.empty((h, w, D, D))
    for y in range(h):
        for x in range(w):
            for ul in range(D):
                for vl in range(D):
                    ty, tx = y + vl - r, x + ul - r
                    if 0 <= ty < h and 0 <= tx < w:
                        if mode == "F":
                            acc = 0.0
                            for k in range(phi1.shape[2]):
                                acc += phi1[y, x, k] * phi2[ty, tx, k]
                            c4[y, x, ul, vl] = -acc
                        else:
                            c4[y, x, ul, vl] = 2 * bin(int(bits1[y, x]) ^ int(bits2[ty, tx])).count("1") - 64
                    else:
                        c4[y, x, ul, vl] = 65.0
    return c4


def dt_oracle(h, w, tau1, tau2):
    """O(D^2) message: out[t] = min_s h[s] + w * min(tau1*|t-s|, tau2)."""
    D = len(h)
    out = np.empty(D)
    for t in range(D):
        best = np.inf
        for s in range(D):
            v = h[s] + w * min(tau1 * abs(t - s), tau2)
            if v < best:
                best = v
        out[t] = best
    return out


def labeling_energy(c4, ul, vl, weights, p):
    """Primal energy of integer label grids against the 4D table."""
    h, w = ul.shape
    e = 0.0
    for y in range(h):
        for x in range(w):
            e += c4[y, x, ul[y, x], vl[y, x]]
    for comp in (ul, vl):
        for y in range(h):
            for x in range(w - 1):
                e += weights.w_h[y, x] * min(p.tau1 * abs(int(comp[y, x + 1]) - int(comp[y, x])), p.tau2)
        for y in range(h - 1):
            for x in range(w):
                e += weights.w_v[y, x] * min(p.tau1 * abs(int(comp[y + 1, x]) - int(comp[y, x])), p.tau2)
    return e


def exhaustive_minimum(c4, weights, p):
    """Exact primal optimum by enumerating all labelings (tiny grids only)."""
    h, w, D, _ = c4.shape
    best = np.inf
    for labs in itertools.product(range(D * D), repeat=h * w):
        ul = np.array([l // D for l in labs]).reshape(h, w)
        vl = np.array([l % D for l in labs]).reshape(h, w)
        best = min(best, labeling_energy(c4, ul, vl, weights, p))
    return best


def chain_energy(h, w_edges, tau1, tau2, labels):
    e = sum(h[i, labels[i]] for i in range(len(labels)))
    for i in range(len(labels) - 1):
        e += w_edges[i] * min(tau1 * abs(int(labels[i + 1]) - int(labels[i])), tau2)
    return e


def epe_scalar(u, v, gu, gv, mask=None):
    """Per-pixel loop endpoint error oracle."""
    h, w = u.shape
    tot_all = 0.0
    tot_noc = 0.0
    n_noc = 0
    for y in range(h):
        for x in range(w):
            e = ((u[y, x] - gu[y, x]) ** 2 + (v[y, x] - gv[y, x]) ** 2) ** 0.5
            tot_all += e
            if mask is None or mask[y, x]:
                tot_noc += e
                n_noc += 1
    return tot_all / (h * w), (tot_noc / n_noc if n_noc else tot_all / (h * w))
