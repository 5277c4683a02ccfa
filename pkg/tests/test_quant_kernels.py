"""Quantizer kernels: grid membership, hand-worked values, symmetries, and
the closed-form straight-through gradients against an entrywise oracle."""

import numpy as np
import pytest

from upq import quant
from upq.errors import ContractViolation, DegenerateRowError
from upq.kernels import accel, reference

from conftest import random_weights

EPS = 0.01


def _oracle_seq_entry(w, d, eps):
    z = min(max(w / d, -1.0 + eps), 1.0 - eps)
    t = 2.0 * z - 0.5
    r = np.floor(t + 0.5) if t > 0 else (-np.floor(-t + 0.5) if t < 0 else 0.0)
    return (d / 2.0) * (r + 0.5)


def _oracle_seq_grads(W, d, eps, g):
    """Entrywise piecewise formulas: weight passes inside the clip range and is
    blocked when saturated; scale gets Wq/d saturated else (Wq-W)/d, row-summed."""
    m, n = W.shape
    gw = np.zeros((m, n))
    gd = np.zeros(m)
    for i in range(m):
        for j in range(n):
            w = float(W[i, j])
            wq = _oracle_seq_entry(w, float(d[i]), eps)
            if abs(w / d[i]) <= 1.0 - eps:
                gw[i, j] = g[i, j]
                gd[i] += g[i, j] * (wq - w) / d[i]
            else:
                gd[i] += g[i, j] * wq / d[i]
    return gw, gd


@pytest.mark.parametrize("backend", [reference, accel])
class TestGrids:
    def test_seq_levels_exact(self, backend, rng):
        W, d = random_weights(rng, 32, 48, scale=0.5)
        wq = backend.seq_forward(W, d, EPS)
        levels = (d[:, None] / 4.0) * np.array([-3.0, -1.0, 1.0, 3.0])
        on_grid = (wq[:, :, None] == levels.astype(W.dtype)[:, None, :]).any(axis=-1)
        assert on_grid.all()

    def test_flexround_levels_exact(self, backend, rng):
        W, _ = random_weights(rng, 16, 32, scale=0.3)
        p = quant.FlexRoundParams.init(W)
        wq = backend.flexround_forward(W, p.delta[:, 0], p.S, p.s[:, 0])
        codes = np.array(quant.INT4_CODES, dtype=np.float64)
        levels = ((p.delta[:, 0].astype(np.float64)[:, None] / 2.0) * codes).astype(W.dtype)
        assert (wq[:, :, None] == levels[:, None, :]).any(axis=-1).all()

    def test_omniquant_levels_exact(self, backend, rng):
        W, _ = random_weights(rng, 16, 32, scale=0.3)
        p = quant.OmniQuantParams.init(W)
        d = quant.omniquant_delta(W, p)
        wq = backend.int4_forward(W, d)
        codes = np.array(quant.INT4_CODES, dtype=np.float64)
        levels = ((d.astype(np.float64)[:, None] / 2.0) * codes).astype(W.dtype)
        assert (wq[:, :, None] == levels[:, None, :]).any(axis=-1).all()


@pytest.mark.parametrize("backend", [reference, accel])
class TestHandValues:
    def test_seq_examples(self, backend):
        W = np.array([[0.6, -2.0, 0.1, 0.0]], dtype=np.float64)
        d = np.array([1.0])
        wq = backend.seq_forward(W, d, EPS)
        # 0 is a tie between -0.25 and 0.25; half-away-from-zero on the shifted
        # code breaks it downward
        assert wq.tolist() == [[0.75, -0.75, 0.25, -0.25]]

    def test_flexround_examples(self, backend):
        W = np.array([[0.3, 9.8, -0.3, 0.0]], dtype=np.float64)
        d, S, s = np.array([1.0]), np.ones((1, 4)), np.array([1.0])
        wq = backend.flexround_forward(W, d, S, s)
        assert wq.tolist() == [[0.5, 7.5, -0.5, 0.5]]

    def test_omniquant_example(self, backend):
        W = np.array([[0.5, -3.0, 3.0, 1.0]], dtype=np.float64)
        d = np.array([(3.0 + 3.0) / 30.0])  # gamma = beta = 1
        wq = backend.int4_forward(W, d)
        assert wq[0, 0] == 0.5 and wq[0, 1] == -1.5 and wq[0, 2] == 1.5


@pytest.mark.parametrize("backend", [reference, accel])
class TestProperties:
    def test_scale_equivariance(self, backend, rng):
        # powers of two keep float scaling exact
        W, d = random_weights(rng, 8, 16, dtype=np.float64)
        for c in (0.25, 2.0, 8.0):
            assert np.array_equal(
                backend.seq_forward(c * W, c * d, EPS),
                c * backend.seq_forward(W, d, EPS),
            )

    def test_sign_symmetry_off_ties(self, backend, rng):
        W = rng.normal(0, 0.3, size=(8, 16))
        d = np.abs(W).max(axis=1) + 0.01
        # keep away from rounding boundaries z in {-0.25, 0.25} * d and 0
        u = W / d[:, None]
        W = np.where(np.abs(np.abs(u) - 0.5) < 0.02, W + 0.05, W)
        W = np.where(np.abs(u) < 0.02, W + 0.05, W)
        assert np.array_equal(
            backend.seq_forward(-W, d, EPS), -backend.seq_forward(W, d, EPS)
        )

    def test_monotone_in_weight(self, backend):
        w = np.linspace(-2.0, 2.0, 401)[None, :]
        d = np.array([1.0])
        wq = backend.seq_forward(w, d, EPS)[0]
        assert (np.diff(wq) >= 0).all()

    def test_idempotent(self, backend, rng):
        W, d = random_weights(rng, 8, 16, dtype=np.float64)
        wq = backend.seq_forward(W, d, EPS)
        assert np.array_equal(backend.seq_forward(wq, d, EPS), wq)

    def test_int4_step_zero_is_rtn(self, backend, rng):
        # identity-initialized learnable rounding == plain round-to-nearest
        W, _ = random_weights(rng, 8, 16)
        p = quant.FlexRoundParams.init(W)
        # compare at the stored (log-roundtripped) step size: S = s = 1 makes
        # the learnable rounding collapse to plain round-to-nearest
        rtn = quant.int4_round_nearest(W, p.delta[:, 0])
        assert np.array_equal(quant.flexround_int4_forward(W, p), rtn)


class TestBackendsAgree:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_all_kernels_bit_identical(self, rng, dtype):
        W, d = random_weights(rng, 24, 40, scale=0.2, dtype=dtype)
        g = rng.normal(size=W.shape).astype(dtype)
        S = np.exp(rng.normal(0, 0.1, W.shape)).astype(dtype)
        s = np.exp(rng.normal(0, 0.1, W.shape[0])).astype(dtype)
        d4 = (d / 7.5).astype(dtype)
        pairs = [
            ("seq_forward", (W, d, EPS)),
            ("seq_backward", (W, d, EPS, g)),
            ("flexround_forward", (W, d, S, s)),
            ("flexround_backward", (W, d, S, s, g)),
            ("int4_forward", (W, d4)),
            ("int4_backward", (W, d4, g)),
        ]
        for name, args in pairs:
            out_r = getattr(reference, name)(*args)
            out_a = getattr(accel, name)(*args)
            if not isinstance(out_r, tuple):
                out_r, out_a = (out_r,), (out_a,)
            for a, b in zip(out_r, out_a):
                assert np.array_equal(a, b), name

    def test_bin_count_agrees(self, rng):
        W, d = random_weights(rng, 16, 32)
        wq = reference.seq_forward(W, d, EPS)
        assert np.array_equal(
            reference.bin_count_int2(wq, d)[0], accel.bin_count_int2(wq, d)[0]
        )


class TestGradientOracle:
    def test_seq_backward_matches_entrywise_oracle(self, rng):
        # 10^4 (w, delta) pairs against the piecewise closed forms
        W = rng.normal(0, 1.0, size=(100, 100))
        d = np.abs(W).max(axis=1) * rng.uniform(0.3, 1.2, 100)
        g = rng.normal(size=W.shape)
        gw, gd = reference.seq_backward(W, d, EPS, g)
        ow, od = _oracle_seq_grads(W, d, EPS, g)
        assert np.array_equal(gw, ow)
        assert np.allclose(gd, od, rtol=0, atol=1e-12)

    def test_seq_scale_grad_matches_fd_when_saturated(self):
        # every entry saturated -> wq is exactly (delta/2)(+-1.5), genuinely
        # differentiable in delta with derivative wq/delta
        W = np.array([[3.0, -4.0, 5.0, -2.5]])
        d = np.array([1.0])
        g = np.ones_like(W)
        _, gd = reference.seq_backward(W, d, EPS, g)
        h = 1e-6
        fd = (reference.seq_forward(W, d + h, EPS).sum()
              - reference.seq_forward(W, d - h, EPS).sum()) / (2 * h)
        assert gd[0] == pytest.approx(fd, rel=1e-6)

    def test_seq_weight_grad_zero_when_saturated_matches_fd(self):
        W = np.array([[3.0, -4.0]])
        d = np.array([1.0])
        gw, _ = reference.seq_backward(W, d, EPS, np.ones_like(W))
        h = 1e-6
        fd = (reference.seq_forward(W + h, d, EPS)
              - reference.seq_forward(W - h, d, EPS)) / (2 * h)
        assert np.array_equal(gw, np.zeros_like(W))
        assert np.array_equal(fd, np.zeros_like(W))


class TestDiagnostics:
    def test_bin_utilization_sums_to_one(self, rng):
        W, d = random_weights(rng, 16, 32)
        wq = quant.seq_int2_forward(W, d)
        frac = quant.bin_utilization(wq, d)
        assert frac.shape == (4,)
        assert frac.sum() == pytest.approx(1.0)

    def test_bin_utilization_rejects_off_grid(self, rng):
        W, d = random_weights(rng, 4, 8)
        wq = quant.seq_int2_forward(W, d)
        wq[1, 2] += np.float32(0.1 * d[1])
        with pytest.raises(ContractViolation, match=r"\(1, 2\)"):
            quant.bin_utilization(wq, d)

    def test_zero_row_rejected(self):
        W = np.zeros((2, 4), dtype=np.float32)
        W[0] = 1.0
        with pytest.raises(DegenerateRowError):
            quant.init_seq_scale(W)

    def test_omniquant_degenerate_row(self):
        W = np.full((1, 4), 2.0, dtype=np.float32)  # max == min > 0
        p = quant.OmniQuantParams.init(W)
        p.raw_beta[:] = 20.0  # beta ~ 1 pushes the step size negative
        with pytest.raises(DegenerateRowError):
            quant.omniquant_delta(W, p)

    def test_search_scale_never_worse_than_full_range(self, rng):
        W = rng.normal(0, 1, size=(8, 64))
        naive = np.abs(W).max(axis=1) / 7.5
        best = quant.search_int4_scale(W)
        err = lambda d: ((W - reference.int4_forward(W, d)) ** 2).sum(axis=1)
        assert (err(best) <= err(naive) + 1e-12).all()
