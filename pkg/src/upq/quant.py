"""Low-bit quantization maps and their straight-through gradients.

Two grids, both balanced and zero-excluding:

* INT2: ``delta/4 * {-3, -1, 1, 3}`` per output channel (stretched elastic
  quantization, also used to re-quantize INT4 weights to INT2);
* INT4: ``delta/2 * {odd -15..15}``, reached either by flexible rounding
  (learnable per-element divisor) or by learnable clipping of the row range.

Ties in rounding go half away from zero everywhere; note this sends W=0 to
``-delta/4`` under the INT2 map (the pre-round value -0.5 is a tie).

Plain functions validate and dispatch to :mod:`upq.kernels`; the ``*_ste``
custom ops expose the same kernels to the autodiff tape with closed-form
piecewise backward rules (exact for the INT2 map; identity-through-round and
zero-through-saturation for the INT4 maps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff, kernels
from .autodiff import CustomGradOp, register_custom
from .errors import ContractViolation, DegenerateRowError

INT2_CODES = (-3, -1, 1, 3)
INT4_CODES = tuple(range(-15, 16, 2))


@dataclass(frozen=True)
class QuantGrid:
    """A balanced, zero-excluding level set."""

    bitwidth: int
    codes: tuple[int, ...]

    @staticmethod
    def for_bits(bitwidth: int) -> "QuantGrid":
        if bitwidth == 2:
            return QuantGrid(2, INT2_CODES)
        if bitwidth == 4:
            return QuantGrid(4, INT4_CODES)
        raise ContractViolation(f"unsupported bitwidth {bitwidth}")

    def levels(self, delta: np.ndarray) -> np.ndarray:
        """Per-row level values, shape (m, len(codes))."""
        d = _scale_1d(delta)
        unit = d[:, None] / (4.0 if self.bitwidth == 2 else 2.0)
        return unit * np.asarray(self.codes, dtype=d.dtype)


@dataclass(frozen=True)
class SeqConfig:
    """INT2 stretched-elastic quantizer settings."""

    epsilon: float = 0.01
    tie_rule: str = field(default="half-away-from-zero")

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ContractViolation(f"epsilon must be in (0, 0.5), got {self.epsilon}")
        if self.tie_rule != "half-away-from-zero":
            raise ContractViolation("only half-away-from-zero ties are supported")


def _scale_1d(delta, rows: int | None = None) -> np.ndarray:
    """Accept a (m,), (m,1) array or ChannelScale; return validated (m,)."""
    if isinstance(delta, ChannelScale):
        delta = delta.values
    d = np.asarray(delta)
    if d.ndim == 2 and d.shape[1] == 1:
        d = d[:, 0]
    if d.ndim != 1:
        raise ContractViolation(f"per-channel scale must be (m,) or (m,1), got {d.shape}")
    if rows is not None and d.shape[0] != rows:
        raise ContractViolation(f"scale rows {d.shape[0]} != weight rows {rows}")
    if (d <= 0).any():
        row = int(np.flatnonzero(d <= 0)[0])
        raise DegenerateRowError(row, f"nonpositive scale {d[row]}")
    return d


@dataclass
class ChannelScale:
    """One strictly positive step size per output channel (m x 1)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] != 1:
            raise ContractViolation(f"ChannelScale must be (m, 1), got {v.shape}")
        if (v <= 0).any():
            row = int(np.flatnonzero(v[:, 0] <= 0)[0])
            raise DegenerateRowError(row, f"nonpositive scale {v[row, 0]}")
        self.values = v


def init_seq_scale(W: np.ndarray) -> ChannelScale:
    """Per-row max absolute value: the INT2 scale initialization."""
    W = np.asarray(W)
    m = np.abs(W).max(axis=1)
    if (m == 0).any():
        row = int(np.flatnonzero(m == 0)[0])
        raise DegenerateRowError(row, "all-zero row has no quantization scale")
    return ChannelScale(m[:, None].astype(W.dtype))


@dataclass
class FlexRoundParams:
    """Learnable flexible-rounding parameters, stored as logarithms so the
    positivity invariant on (delta, S, s) holds by construction."""

    log_delta: np.ndarray  # (m, 1)
    log_S: np.ndarray      # (m, n)
    log_s: np.ndarray      # (m, 1)

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.log_S)

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)

    @staticmethod
    def init(W: np.ndarray) -> "FlexRoundParams":
        """Identity start: delta spans the row (max|W|/7.5), S = s = 1, so step
        zero equals plain round-to-nearest on the balanced INT4 grid."""
        W = np.asarray(W)
        base = init_seq_scale(W).values / 7.5
        return FlexRoundParams(
            log_delta=np.log(base).astype(W.dtype),
            log_S=np.zeros_like(W),
            log_s=np.zeros((W.shape[0], 1), dtype=W.dtype),
        )


@dataclass
class OmniQuantParams:
    """Learnable clipping fractions in [0, 1], stored as sigmoid logits."""

    raw_gamma: np.ndarray  # (m, 1)
    raw_beta: np.ndarray   # (m, 1)

    @property
    def gamma(self) -> np.ndarray:
        return _sigmoid(self.raw_gamma)

    @property
    def beta_clip(self) -> np.ndarray:
        return _sigmoid(self.raw_beta)

    @staticmethod
    def init(W: np.ndarray) -> "OmniQuantParams":
        # full-range start; sigmoid(8) ~ 0.99966 is the closest the
        # reparameterization gets to exactly 1
        W = np.asarray(W)
        shape = (W.shape[0], 1)
        return OmniQuantParams(
            raw_gamma=np.full(shape, 8.0, dtype=W.dtype),
            raw_beta=np.full(shape, 8.0, dtype=W.dtype),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _check_2d(W, name="W") -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {W.shape}")
    return W


# ---------------------------------------------------------------------------
# Plain (stateless) quantization maps


def seq_int2_forward(W, delta, cfg: SeqConfig = SeqConfig()) -> np.ndarray:
    W = _check_2d(W)
    d = _scale_1d(delta, W.shape[0])
    return kernels.seq_forward(W, d, cfg.epsilon)


def seq_int2_backward(W, delta, cfg: SeqConfig, upstream) -> tuple[np.ndarray, np.ndarray]:
    W = _check_2d(W)
    d = _scale_1d(delta, W.shape[0])
    upstream = np.asarray(upstream)
    if upstream.shape != W.shape:
        raise ContractViolation("upstream gradient shape must match W")
    gw, gd = kernels.seq_backward(W, d, cfg.epsilon, upstream)
    return gw, gd[:, None]


def flexround_int4_forward(W, p: FlexRoundParams) -> np.ndarray:
    W = _check_2d(W)
    if p.log_S.shape != W.shape:
        raise ContractViolation(f"S shape {p.log_S.shape} does not match W {W.shape}")
    d = _scale_1d(p.delta, W.shape[0])
    s = _scale_1d(p.s, W.shape[0])
    return kernels.flexround_forward(W, d, p.S, s)


def omniquant_delta(W, p: OmniQuantParams) -> np.ndarray:
    """Row step sizes (gamma*max(W_row) - beta*min(W_row)) / 30, shape (m,)."""
    W = _check_2d(W)
    gamma = np.asarray(p.gamma).reshape(-1)
    beta = np.asarray(p.beta_clip).reshape(-1)
    if gamma.shape[0] != W.shape[0] or beta.shape[0] != W.shape[0]:
        raise ContractViolation("gamma/beta rows must match W rows")
    d = (gamma * W.max(axis=1) - beta * W.min(axis=1)) / 30.0
    if (d <= 0).any():
        row = int(np.flatnonzero(d <= 0)[0])
        raise DegenerateRowError(row, f"computed step size {d[row]} is not positive")
    return d.astype(W.dtype)


def omniquant_int4_forward(W, p: OmniQuantParams) -> np.ndarray:
    W = _check_2d(W)
    return kernels.int4_forward(W, omniquant_delta(W, p))


def int4_round_nearest(W, delta) -> np.ndarray:
    """Round-to-nearest onto the balanced INT4 grid with a given row scale."""
    W = _check_2d(W)
    return kernels.int4_forward(W, _scale_1d(delta, W.shape[0]))


def search_int4_scale(W, num_candidates: int = 200) -> np.ndarray:
    """Per-row scale minimizing the round-to-nearest INT4 error, by dense
    search over fractions of max|row| (mimics what learned clipping finds)."""
    W = _check_2d(W).astype(np.float64)
    absmax = np.abs(W).max(axis=1)
    fracs = np.linspace(0.3, 1.0, num_candidates)
    best = np.empty(W.shape[0])
    best_err = np.full(W.shape[0], np.inf)
    for f in fracs:
        d = np.maximum(absmax * f / 7.5, 1e-30)
        err = ((W - kernels.int4_forward(W, d)) ** 2).sum(axis=1)
        better = err < best_err
        best[better] = d[better]
        best_err[better] = err[better]
    return best


def quant_error_norm(W, Wq) -> float:
    """Frobenius norm of W - Wq."""
    W, Wq = np.asarray(W), np.asarray(Wq)
    if W.shape != Wq.shape:
        raise ContractViolation("quant_error_norm: shapes differ")
    return float(np.linalg.norm(W.astype(np.float64) - Wq.astype(np.float64)))


def bin_utilization(Wq, delta) -> np.ndarray:
    """Fraction of entries on each INT2 level {-3,-1,1,3}; errors on any entry
    that is not exactly on its row's grid."""
    Wq = _check_2d(Wq, "Wq")
    d = _scale_1d(delta, Wq.shape[0])
    counts, bad = kernels.bin_count_int2(Wq, d)
    if bad >= 0:
        i, j = divmod(bad, Wq.shape[1])
        raise ContractViolation(
            f"entry ({i}, {j}) = {Wq[i, j]!r} is not on the INT2 grid of row {i}"
        )
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Straight-through autodiff ops


def make_seq_ste(cfg: SeqConfig = SeqConfig(), name: str = "seq_int2") -> CustomGradOp:
    """SEQ INT2 as a tape op over (W (m,n), delta (m,1)) with the closed-form
    piecewise backward (weight: 1 inside the clip range else 0; scale: Wq/delta
    when saturated else (Wq-W)/delta, row-summed)."""

    def forward(W, delta):
        d = _scale_1d(delta, W.shape[0])
        return kernels.seq_forward(W, d, cfg.epsilon), (W, d)

    def bwd(ctx, upstream):
        W, d = ctx
        gw, gd = kernels.seq_backward(W, d, cfg.epsilon, upstream)
        return gw, gd[:, None]

    return register_custom(CustomGradOp(name, 2, forward, bwd))


def make_flexround_ste(name: str = "flexround_int4") -> CustomGradOp:
    """Flexible-rounding INT4 as a tape op over (W, log_delta, log_S, log_s);
    gradients reach the log-parameters through their exponentials."""

    def forward(W, log_delta, log_S, log_s):
        d = np.exp(log_delta[:, 0])
        S = np.exp(log_S)
        s = np.exp(log_s[:, 0])
        return kernels.flexround_forward(W, d, S, s), (W, d, S, s)

    def bwd(ctx, upstream):
        W, d, S, s = ctx
        gw, gd, gS, gs = kernels.flexround_backward(W, d, S, s, upstream)
        # d(exp(p))/dp chain
        return gw, (gd * d)[:, None], gS * S, (gs * s)[:, None]

    return register_custom(CustomGradOp(name, 4, forward, bwd))


def make_omniquant_ste(name: str = "omniquant_int4") -> CustomGradOp:
    """Learnable-clipping INT4 as a tape op over (W, raw_gamma, raw_beta);
    gradients reach the logits through the sigmoid reparameterization."""

    def forward(W, raw_gamma, raw_beta):
        gamma = _sigmoid(raw_gamma[:, 0])
        beta = _sigmoid(raw_beta[:, 0])
        d = ((gamma * W.max(axis=1) - beta * W.min(axis=1)) / 30.0).astype(W.dtype)
        if (d <= 0).any():
            row = int(np.flatnonzero(d <= 0)[0])
            raise DegenerateRowError(row, f"computed step size {d[row]} is not positive")
        return kernels.int4_forward(W, d), (W, d, gamma, beta)

    def bwd(ctx, upstream):
        W, d, gamma, beta = ctx
        gw, gd = kernels.int4_backward(W, d, upstream)
        g_gamma = gd * (W.max(axis=1) / 30.0) * gamma * (1.0 - gamma)
        g_beta = gd * (-W.min(axis=1) / 30.0) * beta * (1.0 - beta)
        return gw, g_gamma[:, None].astype(W.dtype), g_beta[:, None].astype(W.dtype)

    return register_custom(CustomGradOp(name, 3, forward, bwd))


SEQ_STE = make_seq_ste()
FLEXROUND_STE = make_flexround_ste()
OMNIQUANT_STE = make_omniquant_ste()

_STE_BY_SCHEME = {"seq": SEQ_STE, "flexround": FLEXROUND_STE, "omniquant": OMNIQUANT_STE}


def ste_wrap(scheme: str) -> CustomGradOp:
    """The registered straight-through op for a quantization scheme."""
    try:
        return _STE_BY_SCHEME[scheme]
    except KeyError:
        raise ContractViolation(f"unknown quantization scheme {scheme!r}") from None


def apply_ste(scheme: str, *inputs) -> autodiff.Tensor:
    return autodiff.apply_custom(ste_wrap(scheme), *inputs)
