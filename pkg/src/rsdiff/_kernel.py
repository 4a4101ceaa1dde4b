"""Compiled Euler-Maruyama / thinning loop for builtin-family models.

The kernel consumes pre-drawn standard normals ``xi`` (one row per step) and
uniform pairs ``u`` so that it walks exactly the same random streams as the
pure-Python reference loop in :mod:`rsdiff.simulator`.
"""
import math

import numpy as np
from numba import njit

OK, EXPLODED, BOUND_VIOLATED = 0, 1, 2
SCHEME_THINNING, SCHEME_BERNOULLI = 0, 1
BOUND_RTOL = 1e-12


@njit(cache=True, nogil=True)
def _rate(qbase, qtheta, s0, c0, i, j):
    if i < j:
        return qbase[i, j] * (1.0 + qtheta * s0)
    return qbase[i, j] * (1.0 + qtheta * c0)


@njit(cache=True, nogil=True)
def _select(qbase, qtheta, x0, k, offset, scale):
    """Locate ``z = row_start_k + offset * scale`` in the row-``k`` intervals.

    Returns ``(target, z, q_k)``; ``target == -1`` when the mark misses the row.
    """
    n = qbase.shape[0]
    s0 = math.sin(x0)
    c0 = math.cos(x0)
    cursor = 0.0
    for i in range(k):
        for j in range(n):
            if j != i:
                cursor = cursor + _rate(qbase, qtheta, s0, c0, i, j)
    row_start = cursor
    z = row_start + offset * scale
    target = -1
    for j in range(n):
        if j == k:
            continue
        lo = cursor
        cursor = cursor + _rate(qbase, qtheta, s0, c0, k, j)
        if target < 0 and lo <= z and z < cursor:
            target = j
    return target, z, cursor - row_start


@njit(cache=True, nogil=True)
def run_chunk(
    x, kstate, step0, n_steps, dt, xi, u,
    G, B, e, gkind, sig2,
    qbase, qtheta, c_q, p_prop, scheme, radius,
    has_w, wA, wc, wkind, acc,
    stride, out_x, out_k, out_lw,
    ev_step, ev_z, ev_from, ev_to, ev_acc, record_rejected,
):
    """Advance ``n_steps`` steps in place.

    Returns ``(steps_done, status, n_events)``.
    """
    d = x.shape[0]
    sq = math.sqrt(dt)
    k = kstate[0]
    gx = np.empty(d)
    xn = np.empty(d)
    zw = np.empty(d)
    n_ev = 0
    for s in range(n_steps):
        # weight increment uses the left-endpoint state and this step's noise
        if has_w:
            for c in range(d):
                gx[c] = x[c] if wkind[k] == 0 else math.tanh(x[c])
            quad = 0.0
            stoch = 0.0
            for r in range(d):
                zr = wc[k, r]
                for c in range(d):
                    zr += wA[k, r, c] * gx[c]
                zw[r] = zr
                stoch += zr * (sq * xi[s, r])
                quad += zr * zr
            acc[0] += stoch
            acc[1] += 0.5 * quad * dt
        for c in range(d):
            gx[c] = x[c] if gkind[k] == 0 else math.tanh(x[c])
        norm2 = 0.0
        for r in range(d):
            b = e[k, r]
            for c in range(d):
                b += -G[k, r, c] * x[c] + B[k, r, c] * gx[c]
            noise = 0.0
            for c in range(d):
                noise += sig2[k, r, c] * (sq * xi[s, c])
            xn[r] = x[r] + b * dt + noise
            norm2 += xn[r] * xn[r]
        # switching with rates frozen at the left endpoint
        newk = k
        if qbase.shape[0] > 1:
            if scheme == SCHEME_THINNING:
                if u[s, 0] < p_prop:
                    target, z, q_k = _select(qbase, qtheta, x[0], k, u[s, 1], c_q)
                    if q_k > c_q * (1.0 + BOUND_RTOL):
                        kstate[0] = k
                        return s, BOUND_VIOLATED, n_ev
                    if target >= 0 or record_rejected:
                        ev_step[n_ev] = step0 + s + 1
                        ev_z[n_ev] = z
                        ev_from[n_ev] = k
                        ev_to[n_ev] = target if target >= 0 else k
                        ev_acc[n_ev] = target >= 0
                        n_ev += 1
                    if target >= 0:
                        newk = target
            else:
                target, z, q_k = _select(qbase, qtheta, x[0], k, u[s, 0], 1.0 / dt)
                if target >= 0:
                    ev_step[n_ev] = step0 + s + 1
                    ev_z[n_ev] = z
                    ev_from[n_ev] = k
                    ev_to[n_ev] = target
                    ev_acc[n_ev] = True
                    n_ev += 1
                    newk = target
        for r in range(d):
            x[r] = xn[r]
        k = newk
        g = step0 + s + 1
        if g % stride == 0:
            idx = g // stride
            for r in range(d):
                out_x[idx, r] = x[r]
            out_k[idx] = k
            if has_w:
                out_lw[idx] = acc[0] - acc[1]
        if not (norm2 < radius * radius):
            kstate[0] = k
            return s + 1, EXPLODED, n_ev
    kstate[0] = k
    return n_steps, OK, n_ev
