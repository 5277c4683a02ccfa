"""Numba-jitted quantization kernels.

Same contracts as :mod:`upq.kernels.reference` and bit-identical output: the
jitted loops run in float64 with left-to-right accumulation and results are
cast back to the input dtype by the thin wrappers below.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import reference


@njit(cache=True)
def _rhaz(x: float) -> float:
    # round half away from zero
    if x > 0.0:
        return np.floor(x + 0.5)
    if x < 0.0:
        return -np.floor(-x + 0.5)
    return 0.0


@njit(cache=True)
def _seq_forward64(W, d, eps):
    m, n = W.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        di = d[i]
        for j in range(n):
            z = W[i, j] / di
            if z < -1.0 + eps:
                z = -1.0 + eps
            elif z > 1.0 - eps:
                z = 1.0 - eps
            out[i, j] = (di / 2.0) * (_rhaz(2.0 * z - 0.5) + 0.5)
    return out


@njit(cache=True)
def _seq_backward64(W, d, eps, g):
    m, n = W.shape
    gw = np.empty((m, n), dtype=np.float64)
    gd = np.empty(m, dtype=np.float64)
    for i in range(m):
        di = d[i]
        acc = 0.0
        for j in range(n):
            u = W[i, j] / di
            z = min(max(u, -1.0 + eps), 1.0 - eps)
            wq = (di / 2.0) * (_rhaz(2.0 * z - 0.5) + 0.5)
            if abs(u) <= 1.0 - eps:
                gw[i, j] = g[i, j]
                acc += g[i, j] * ((wq - W[i, j]) / di)
            else:
                gw[i, j] = 0.0
                acc += g[i, j] * (wq / di)
        gd[i] = acc
    return gw, gd


@njit(cache=True)
def _int4_code(u: float) -> float:
    c = 2.0 * _rhaz(u + 0.5) - 1.0
    if c > 15.0:
        return 15.0
    if c < -15.0:
        return -15.0
    return c


@njit(cache=True)
def _flexround_forward64(W, d, S, s):
    m, n = W.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        di = d[i]
        si = s[i]
        for j in range(n):
            c = _int4_code(W[i, j] / (di * S[i, j] * si))
            out[i, j] = (di / 2.0) * c
    return out


@njit(cache=True)
def _flexround_backward64(W, d, S, s, g):
    m, n = W.shape
    gw = np.empty((m, n), dtype=np.float64)
    gd = np.empty(m, dtype=np.float64)
    gS = np.empty((m, n), dtype=np.float64)
    gs = np.empty(m, dtype=np.float64)
    for i in range(m):
        di = d[i]
        si = s[i]
        acc_d = 0.0
        acc_s = 0.0
        for j in range(n):
            u = W[i, j] / (di * S[i, j] * si)
            c = 2.0 * _rhaz(u + 0.5) - 1.0
            inside = 1.0 if abs(c) <= 15.0 else 0.0
            if c > 15.0:
                c = 15.0
            elif c < -15.0:
                c = -15.0
            gw[i, j] = g[i, j] * inside / (S[i, j] * si)
            acc_d += g[i, j] * (c / 2.0 - u * inside)
            gS[i, j] = g[i, j] * (-di * u * inside / S[i, j])
            acc_s += g[i, j] * (-di * u * inside / si)
        gd[i] = acc_d
        gs[i] = acc_s
    return gw, gd, gS, gs


@njit(cache=True)
def _int4_forward64(W, d):
    m, n = W.shape
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        di = d[i]
        for j in range(n):
            out[i, j] = (di / 2.0) * _int4_code(W[i, j] / di)
    return out


@njit(cache=True)
def _int4_backward64(W, d, g):
    m, n = W.shape
    gw = np.empty((m, n), dtype=np.float64)
    gd = np.empty(m, dtype=np.float64)
    for i in range(m):
        di = d[i]
        acc = 0.0
        for j in range(n):
            u = W[i, j] / di
            c = 2.0 * _rhaz(u + 0.5) - 1.0
            inside = 1.0 if abs(c) <= 15.0 else 0.0
            if c > 15.0:
                c = 15.0
            elif c < -15.0:
                c = -15.0
            gw[i, j] = g[i, j] * inside
            acc += g[i, j] * (c / 2.0 - u * inside)
        gd[i] = acc
    return gw, gd


@njit(cache=True)
def _bin_count_int2_f32(Wq, d):
    m, n = Wq.shape
    counts = np.zeros(4, dtype=np.int64)
    bad = -1
    for i in range(m):
        di = float(d[i])
        for j in range(n):
            hit = -1
            for k in range(4):
                lvl = np.float32((di / 2.0) * ((k - 2.0) + 0.5))
                if Wq[i, j] == lvl:
                    hit = k
                    break
            if hit >= 0:
                counts[hit] += 1
            elif bad < 0:
                bad = i * n + j
    return counts, bad


def seq_forward(W, delta, eps):
    return _seq_forward64(W.astype(np.float64), delta.astype(np.float64), eps).astype(
        W.dtype
    )


def seq_backward(W, delta, eps, upstream):
    gw, gd = _seq_backward64(
        W.astype(np.float64), delta.astype(np.float64), eps, upstream.astype(np.float64)
    )
    return gw.astype(W.dtype), gd.astype(W.dtype)


def flexround_forward(W, delta, S, s):
    return _flexround_forward64(
        W.astype(np.float64),
        delta.astype(np.float64),
        S.astype(np.float64),
        s.astype(np.float64),
    ).astype(W.dtype)


def flexround_backward(W, delta, S, s, upstream):
    gw, gd, gS, gs = _flexround_backward64(
        W.astype(np.float64),
        delta.astype(np.float64),
        S.astype(np.float64),
        s.astype(np.float64),
        upstream.astype(np.float64),
    )
    return (
        gw.astype(W.dtype),
        gd.astype(W.dtype),
        gS.astype(W.dtype),
        gs.astype(W.dtype),
    )


def int4_forward(W, delta):
    return _int4_forward64(W.astype(np.float64), delta.astype(np.float64)).astype(
        W.dtype
    )


def int4_backward(W, delta, upstream):
    gw, gd = _int4_backward64(
        W.astype(np.float64), delta.astype(np.float64), upstream.astype(np.float64)
    )
    return gw.astype(W.dtype), gd.astype(W.dtype)


def bin_count_int2(Wq, delta):
    if Wq.dtype == np.float32:
        counts, bad = _bin_count_int2_f32(Wq, delta.astype(np.float64))
        return counts, int(bad)
    return reference.bin_count_int2(Wq, delta)
