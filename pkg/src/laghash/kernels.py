"""Compiled per-level gather/scatter loops.

Every loop walks points in order and corners/Gaussians in index order, so
results are independent of batch size and reproducible run to run.
Accumulation happens in double precision regardless of the table dtype.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def eulerian_forward(rows, alphas, table):
    m, v = rows.shape
    f = table.shape[1]
    out = np.zeros((m, f), dtype=table.dtype)
    for i in range(m):
        for j in range(f):
            acc = 0.0
            for c in range(v):
                acc += alphas[i, c] * table[rows[i, c], j]
            out[i, j] = acc
    return out


@njit(cache=True)
def eulerian_backward(grad_out, rows, alphas, grad_table):
    m, v = rows.shape
    f = grad_table.shape[1]
    for i in range(m):
        for c in range(v):
            r = rows[i, c]
            a = alphas[i, c]
            for j in range(f):
                grad_table[r, j] += a * grad_out[i, j]


@njit(cache=True)
def lagrangian_forward(x, rows, alphas, means, feats, sigma, floor):
    m, v = rows.shape
    k, d = means.shape[1], means.shape[2]
    f = feats.shape[2]
    out = np.zeros((m, f), dtype=feats.dtype)
    diff = np.empty((m, v, k, d), dtype=means.dtype)
    pdf = np.empty((m, v, k), dtype=means.dtype)
    live = np.empty((m, v, k), dtype=np.bool_)
    inv_two_var = 1.0 / (2.0 * sigma * sigma)
    norm = _INV_SQRT_2PI / sigma
    acc = np.zeros(f)
    for i in range(m):
        acc[:] = 0.0
        for c in range(v):
            r = rows[i, c]
            a = alphas[i, c]
            for kk in range(k):
                sq = 0.0
                for j in range(d):
                    t = x[i, j] - means[r, kk, j]
                    diff[i, c, kk, j] = t
                    sq += t * t
                e = -sq * inv_two_var
                ok = e > floor
                if not ok:
                    e = floor
                p = math.exp(e) * norm
                pdf[i, c, kk] = p
                live[i, c, kk] = ok
                w = a * p
                for j in range(f):
                    acc[j] += w * feats[r, kk, j]
        for j in range(f):
            out[i, j] = acc[j]
    return out, diff, pdf, live


@njit(cache=True)
def lagrangian_backward(grad_out, rows, alphas, diff, pdf, live, feats, sigma, grad_means, grad_feats):
    m, v = rows.shape
    k, d = diff.shape[2], diff.shape[3]
    f = feats.shape[2]
    inv_var = 1.0 / (sigma * sigma)
    for i in range(m):
        for c in range(v):
            r = rows[i, c]
            a = alphas[i, c]
            for kk in range(k):
                w = a * pdf[i, c, kk]
                gp = 0.0
                for j in range(f):
                    grad_feats[r, kk, j] += w * grad_out[i, j]
                    gp += feats[r, kk, j] * grad_out[i, j]
                if live[i, c, kk]:
                    coef = w * gp * inv_var
                    for j in range(d):
                        grad_means[r, kk, j] += coef * diff[i, c, kk, j]


@njit(cache=True)
def guidance_argmin(alphas, diff, sigma):
    """Cheapest (corner, gaussian) per point of -log(alpha) + |x - mu|^2 / (2 sigma^2)."""
    m, v, k, d = diff.shape
    inv_two_var = 1.0 / (2.0 * sigma * sigma)
    cost = np.empty(m)
    corner = np.empty(m, dtype=np.int64)
    gauss = np.empty(m, dtype=np.int64)
    for i in range(m):
        best = np.inf
        bc = -1
        bk = -1
        for c in range(v):
            a = alphas[i, c]
            if a <= 0.0:
                continue
            nl = -math.log(a)
            for kk in range(k):
                sq = 0.0
                for j in range(d):
                    t = float(diff[i, c, kk, j])
                    sq += t * t
                val = nl + sq * inv_two_var
                if val < best:
                    best = val
                    bc = c
                    bk = kk
        cost[i] = best
        corner[i] = bc
        gauss[i] = bk
    return cost, corner, gauss


@njit(cache=True)
def guidance_backward(scale, rows, corner, gauss, diff, sigma, grad_means):
    inv_var = 1.0 / (sigma * sigma)
    for i in range(rows.shape[0]):
        s = scale[i]
        if s == 0.0:
            continue
        c = corner[i]
        kk = gauss[i]
        r = rows[i, c]
        for j in range(diff.shape[3]):
            grad_means[r, kk, j] -= s * inv_var * diff[i, c, kk, j]


@njit(cache=True)
def dense_forward(h, wt, b):
    # out[i] depends on row i alone, summed over inputs in index order
    m, n = h.shape
    k = wt.shape[1]
    out = np.empty((m, k), dtype=h.dtype)
    for i in range(m):
        for o in range(k):
            out[i, o] = b[o]
        for j in range(n):
            hij = h[i, j]
            for o in range(k):
                out[i, o] += hij * wt[j, o]
    return out
