"""Pure-numpy quantization kernels.

All kernels take raw ndarrays (validation lives in :mod:`upq.quant`), compute in
float64 and cast the result back to the input dtype, so the numba backend can
reproduce them bit-for-bit.  Row reductions accumulate in float64 in strict
left-to-right order (np.cumsum is a sequential scan), matching both the numba
loops and the brute-force test oracles.

Shapes: W, S, upstream are (m, n); delta, s, gamma, beta are (m,).
"""

from __future__ import annotations

import numpy as np


def _round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _row_sum_seq(contrib: np.ndarray) -> np.ndarray:
    """Left-to-right float64 row sum."""
    return np.cumsum(contrib, axis=1)[:, -1]


def seq_forward(W: np.ndarray, delta: np.ndarray, eps: float) -> np.ndarray:
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    z = np.clip(W64 / d64, -1.0 + eps, 1.0 - eps)
    r = _round_half_away(2.0 * z - 0.5)
    return ((d64 / 2.0) * (r + 0.5)).astype(W.dtype)


def seq_backward(
    W: np.ndarray, delta: np.ndarray, eps: float, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    g64 = upstream.astype(np.float64)
    z = np.clip(W64 / d64, -1.0 + eps, 1.0 - eps)
    r = _round_half_away(2.0 * z - 0.5)
    Wq = (d64 / 2.0) * (r + 0.5)
    unsat = np.abs(W64 / d64) <= 1.0 - eps
    grad_w = np.where(unsat, g64, 0.0)
    contrib = g64 * np.where(unsat, (Wq - W64) / d64, Wq / d64)
    grad_delta = _row_sum_seq(contrib)
    return grad_w.astype(W.dtype), grad_delta.astype(W.dtype)


def _int4_round(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shared balanced-INT4 rounding: u -> (clipped odd code, unclipped mask)."""
    c = 2.0 * _round_half_away(u + 0.5) - 1.0
    unclipped = np.abs(c) <= 15.0
    return np.clip(c, -15.0, 15.0), unclipped


def flexround_forward(
    W: np.ndarray, delta: np.ndarray, S: np.ndarray, s: np.ndarray
) -> np.ndarray:
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    div = d64 * S.astype(np.float64) * s.astype(np.float64)[:, None]
    c, _ = _int4_round(W64 / div)
    return ((d64 / 2.0) * c).astype(W.dtype)


def flexround_backward(
    W: np.ndarray,
    delta: np.ndarray,
    S: np.ndarray,
    s: np.ndarray,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """STE gradients w.r.t. (W, delta, S, s): round passed through as identity,
    clip saturation blocks the gradient of everything inside the clip."""
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    S64 = S.astype(np.float64)
    s64 = s.astype(np.float64)[:, None]
    g64 = upstream.astype(np.float64)
    u = W64 / (d64 * S64 * s64)
    c, unclipped = _int4_round(u)
    inside = np.where(unclipped, 1.0, 0.0)
    grad_w = g64 * inside / (S64 * s64)
    grad_delta = _row_sum_seq(g64 * (c / 2.0 - u * inside))
    grad_S = g64 * (-d64 * u * inside / S64)
    grad_s = _row_sum_seq(g64 * (-d64 * u * inside / s64))
    return (
        grad_w.astype(W.dtype),
        grad_delta.astype(W.dtype),
        grad_S.astype(W.dtype),
        grad_s.astype(W.dtype),
    )


def int4_forward(W: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Round-to-nearest onto the balanced INT4 grid delta/2 * {odd -15..15}."""
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    c, _ = _int4_round(W64 / d64)
    return ((d64 / 2.0) * c).astype(W.dtype)


def int4_backward(
    W: np.ndarray, delta: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """STE gradients of :func:`int4_forward` w.r.t. (W, delta)."""
    W64 = W.astype(np.float64)
    d64 = delta.astype(np.float64)[:, None]
    g64 = upstream.astype(np.float64)
    u = W64 / d64
    c, unclipped = _int4_round(u)
    inside = np.where(unclipped, 1.0, 0.0)
    grad_w = g64 * inside
    grad_delta = _row_sum_seq(g64 * (c / 2.0 - u * inside))
    return grad_w.astype(W.dtype), grad_delta.astype(W.dtype)


def bin_count_int2(Wq: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, int]:
    """Count INT2 grid hits per level {-3,-1,1,3}.

    Returns (counts[4], first off-grid flat index or -1).  Membership is exact:
    an entry is on-grid iff it bit-matches the level value produced by the
    defining arithmetic (delta/2)*(r+0.5) in the array dtype.
    """
    d64 = delta.astype(np.float64)[:, None]
    levels = np.stack(
        [((d64 / 2.0) * (r + 0.5)).astype(Wq.dtype) for r in (-2.0, -1.0, 0.0, 1.0)],
        axis=-1,
    )  # (m, 1, 4)
    hits = Wq[:, :, None] == levels  # (m, n, 4)
    on_grid = hits.any(axis=-1)
    if not on_grid.all():
        bad = int(np.flatnonzero(~on_grid)[0])
    else:
        bad = -1
    counts = hits.sum(axis=(0, 1)).astype(np.int64)
    return counts, bad
