"""Compiled recurrence kernels for the linear mixers.

Inputs are flattened to (N, T, d) with N = batch * heads. Forward kernels
also materialize the per-step states (N, T, d_k, d_v) consumed by the
matching backward kernel, which replays the recurrence in reverse with a
running dL/dS accumulator.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def gla_fwd(q, k, v, a, states, out):
    n, t, dk = q.shape
    dv = v.shape[2]
    for bi in range(n):
        s = np.zeros((dk, dv))
        for ti in range(t):
            for x in range(dk):
                ax = a[bi, ti, x]
                kx = k[bi, ti, x]
                for y in range(dv):
                    s[x, y] = ax * s[x, y] + kx * v[bi, ti, y]
                    states[bi, ti, x, y] = s[x, y]
            for y in range(dv):
                acc = 0.0
                for x in range(dk):
                    acc += q[bi, ti, x] * s[x, y]
                out[bi, ti, y] = acc


@numba.njit(cache=True)
def gla_bwd(q, k, v, a, states, go, dq, dk_, dv_, da):
    n, t, dk = q.shape
    dv = v.shape[2]
    for bi in range(n):
        g = np.zeros((dk, dv))
        for ti in range(t - 1, -1, -1):
            for x in range(dk):
                accq = 0.0
                qg = q[bi, ti, x]
                for y in range(dv):
                    accq += states[bi, ti, x, y] * go[bi, ti, y]
                    g[x, y] += qg * go[bi, ti, y]
                dq[bi, ti, x] = accq
            for x in range(dk):
                acck = 0.0
                acca = 0.0
                for y in range(dv):
                    acck += g[x, y] * v[bi, ti, y]
                    if ti > 0:
                        acca += g[x, y] * states[bi, ti - 1, x, y]
                dk_[bi, ti, x] = acck
                da[bi, ti, x] = acca
            for y in range(dv):
                accv = 0.0
                for x in range(dk):
                    accv += g[x, y] * k[bi, ti, x]
                dv_[bi, ti, y] = accv
            for x in range(dk):
                ax = a[bi, ti, x]
                for y in range(dv):
                    g[x, y] *= ax


@numba.njit(cache=True)
def gdn_fwd(q, k, v, a, b, beta_on_additive, states, out):
    n, t, dk = q.shape
    dv = v.shape[2]
    u = np.empty(dv)
    for bi in range(n):
        s = np.zeros((dk, dv))
        for ti in range(t):
            at = a[bi, ti]
            bt = b[bi, ti]
            ct = bt if beta_on_additive else 1.0
            for y in range(dv):
                acc = 0.0
                for x in range(dk):
                    acc += k[bi, ti, x] * s[x, y]
                u[y] = acc
            for x in range(dk):
                kx = k[bi, ti, x]
                for y in range(dv):
                    s[x, y] = at * (s[x, y] - bt * kx * u[y]) + ct * kx * v[bi, ti, y]
                    states[bi, ti, x, y] = s[x, y]
            for y in range(dv):
                acc = 0.0
                for x in range(dk):
                    acc += q[bi, ti, x] * s[x, y]
                out[bi, ti, y] = acc


@numba.njit(cache=True)
def gdn_bwd(q, k, v, a, b, beta_on_additive, states, go, dq, dk_, dv_, da, db):
    n, t, dk = q.shape
    dv = v.shape[2]
    u = np.empty(dv)
    kg = np.empty(dv)
    for bi in range(n):
        g = np.zeros((dk, dv))
        for ti in range(t - 1, -1, -1):
            at = a[bi, ti]
            bt = b[bi, ti]
            for x in range(dk):
                accq = 0.0
                for y in range(dv):
                    accq += states[bi, ti, x, y] * go[bi, ti, y]
                dq[bi, ti, x] = accq
            for x in range(dk):
                qg = q[bi, ti, x]
                for y in range(dv):
                    g[x, y] += qg * go[bi, ti, y]
            # u_t = k_t^T S_{t-1}; kg = k_t^T G
            for y in range(dv):
                accu = 0.0
                acckg = 0.0
                for x in range(dk):
                    if ti > 0:
                        accu += k[bi, ti, x] * states[bi, ti - 1, x, y]
                    acckg += k[bi, ti, x] * g[x, y]
                u[y] = accu
                kg[y] = acckg
            kg_u = 0.0
            kg_v = 0.0
            gs = 0.0
            for y in range(dv):
                kg_u += kg[y] * u[y]
                kg_v += kg[y] * v[bi, ti, y]
            if ti > 0:
                for x in range(dk):
                    for y in range(dv):
                        gs += g[x, y] * states[bi, ti - 1, x, y]
            da[bi, ti] = gs - bt * kg_u
            if beta_on_additive:
                db[bi, ti] = -at * kg_u + kg_v
            else:
                db[bi, ti] = -at * kg_u
            for y in range(dv):
                dv_[bi, ti, y] = (bt if beta_on_additive else 1.0) * kg[y]
            for x in range(dk):
                gu = 0.0
                skg = 0.0
                gv = 0.0
                for y in range(dv):
                    gu += g[x, y] * u[y]
                    if ti > 0:
                        skg += states[bi, ti - 1, x, y] * kg[y]
                    gv += g[x, y] * v[bi, ti, y]
                cv = bt * gv if beta_on_additive else gv
                dk_[bi, ti, x] = -(at * bt) * (gu + skg) + cv
            for x in range(dk):
                kx = k[bi, ti, x]
                for y in range(dv):
                    g[x, y] = at * (g[x, y] - bt * kx * kg[y])
