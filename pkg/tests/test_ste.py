"""Straight-through ops on the tape: forwards match the stateless maps and
backwards match the closed-form kernel gradients, including the chain into the
positivity reparameterizations."""

import numpy as np
import pytest

from upq import autodiff as ad
from upq import quant
from upq.kernels import reference

from conftest import random_weights


def _tensors(*arrays):
    return [ad.Tensor(a, requires_grad=True) for a in arrays]


class TestSeqSte:
    def test_forward_matches_stateless(self, rng):
        W, d = random_weights(rng)
        (tW, td) = _tensors(W, d[:, None])
        out = quant.apply_ste("seq", tW, td)
        assert np.array_equal(out.data, quant.seq_int2_forward(W, d))

    def test_backward_matches_kernel(self, rng):
        W, d = random_weights(rng)
        g = rng.normal(size=W.shape).astype(np.float32)
        (tW, td) = _tensors(W, d[:, None])
        out = quant.apply_ste("seq", tW, td)
        ad.sum_all(ad.mul(out, g)).backward()
        gw, gd = reference.seq_backward(W, d, quant.SeqConfig().epsilon, g)
        assert np.array_equal(tW.grad, gw)
        assert np.array_equal(td.grad, gd[:, None])

    def test_hand_worked_gradients(self):
        # one row, delta = 1: entries at 0.3 (inside), 2.0 (saturated), -0.6 (inside)
        W = np.array([[0.3, 2.0, -0.6]])
        d = np.array([[1.0]])
        (tW, td) = _tensors(W, d)
        out = quant.apply_ste("seq", tW, td)
        ad.sum_all(out).backward()
        assert tW.grad.tolist() == [[1.0, 0.0, 1.0]]
        # scale: (0.25-0.3) + 0.75 + (-0.75+0.6) = 0.55
        assert td.grad[0, 0] == pytest.approx(0.55, abs=1e-12)


class TestFlexRoundSte:
    def test_forward_matches_stateless(self, rng):
        W, _ = random_weights(rng)
        p = quant.FlexRoundParams.init(W)
        ts = _tensors(W, p.log_delta, p.log_S, p.log_s)
        out = quant.apply_ste("flexround", *ts)
        assert np.array_equal(out.data, quant.flexround_int4_forward(W, p))

    def test_log_param_chain_rule(self, rng):
        W, _ = random_weights(rng)
        p = quant.FlexRoundParams.init(W)
        g = rng.normal(size=W.shape).astype(np.float32)
        tW, tld, tlS, tls = _tensors(W, p.log_delta, p.log_S, p.log_s)
        out = quant.apply_ste("flexround", tW, tld, tlS, tls)
        ad.sum_all(ad.mul(out, g)).backward()
        d, S, s = p.delta[:, 0], p.S, p.s[:, 0]
        gw, gd, gS, gs = reference.flexround_backward(W, d, S, s, g)
        assert np.array_equal(tW.grad, gw)
        assert np.array_equal(tld.grad, (gd * d)[:, None])
        assert np.array_equal(tlS.grad, gS * S)
        assert np.array_equal(tls.grad, (gs * s)[:, None])


class TestOmniQuantSte:
    def test_forward_matches_stateless(self, rng):
        W, _ = random_weights(rng)
        p = quant.OmniQuantParams.init(W)
        ts = _tensors(W, p.raw_gamma, p.raw_beta)
        out = quant.apply_ste("omniquant", *ts)
        assert np.array_equal(out.data, quant.omniquant_int4_forward(W, p))

    def test_sigmoid_chain_rule(self, rng):
        W, _ = random_weights(rng)
        p = quant.OmniQuantParams.init(W)
        g = rng.normal(size=W.shape).astype(np.float32)
        tW, tg, tb = _tensors(W, p.raw_gamma, p.raw_beta)
        out = quant.apply_ste("omniquant", tW, tg, tb)
        ad.sum_all(ad.mul(out, g)).backward()
        gamma, beta = p.gamma[:, 0], p.beta_clip[:, 0]
        d = ((gamma * W.max(axis=1) - beta * W.min(axis=1)) / 30.0).astype(W.dtype)
        gw, gd = reference.int4_backward(W, d, g)
        assert np.array_equal(tW.grad, gw)
        expected_g = (gd * (W.max(axis=1) / 30.0) * gamma * (1 - gamma))[:, None]
        expected_b = (gd * (-W.min(axis=1) / 30.0) * beta * (1 - beta))[:, None]
        assert np.allclose(tg.grad, expected_g, rtol=0, atol=1e-7)
        assert np.allclose(tb.grad, expected_b, rtol=0, atol=1e-7)


def test_unknown_scheme_rejected():
    with pytest.raises(Exception):
        quant.ste_wrap("int8")


def test_ste_gradient_flows_through_matmul(rng):
    # the QAT composition: x @ quantize(W)^T
    W, d = random_weights(rng, 8, 8)
    x = rng.normal(size=(4, 8)).astype(np.float32)
    tW, td = _tensors(W, d[:, None])
    wq = quant.apply_ste("seq", tW, td)
    out = ad.matmul(ad.Tensor(x), ad.transpose_last2(wq))
    ad.sum_all(out).backward()
    g_up = np.ones((4, 8), dtype=np.float32).T @ x  # upstream reaching Wq
    gw, gd = reference.seq_backward(W, d, quant.SeqConfig().epsilon,
                                    g_up.astype(np.float32))
    assert np.allclose(tW.grad, gw, rtol=1e-5, atol=1e-6)
    assert np.allclose(td.grad[:, 0], gd, rtol=1e-5, atol=1e-6)
