"""Training objectives: generalized Jensen-Shannon divergence for distillation
and next-token-prediction negative log-likelihood.

Both losses average over valid (non-padding) token positions and are built on
the autodiff tape, so gradients flow to the student logits; teacher logits are
plain arrays and never receive gradient.  Mixtures get a 1e-12 probability
floor before logs; everything else stays in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


@dataclass(frozen=True)
class JsdConfig:
    beta: float = 0.5
    prob_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractViolation(f"beta must be in [0, 1], got {self.beta}")
        if self.prob_floor <= 0:
            raise ContractViolation("probability floor must be positive")


@dataclass
class LogitsBatch:
    """Teacher/student logits (batch x seq x vocab) plus a valid-token mask."""

    teacher_logits: np.ndarray
    student_logits: "ad.Tensor | np.ndarray"
    mask: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.teacher_logits)
        s_shape = (
            self.student_logits.shape
            if isinstance(self.student_logits, ad.Tensor)
            else np.asarray(self.student_logits).shape
        )
        if t.shape != tuple(s_shape):
            raise ContractViolation(
                f"teacher shape {t.shape} != student shape {tuple(s_shape)}"
            )
        if self.mask is not None and np.asarray(self.mask).shape != t.shape[:-1]:
            raise ContractViolation("mask must cover batch x seq positions")


def _valid_mask(mask, pos_shape, dtype):
    if mask is None:
        m = np.ones(pos_shape, dtype=dtype)
    else:
        m = np.asarray(mask).astype(dtype)
    n_valid = float(m.sum())
    if n_valid == 0:
        raise ContractViolation("mask leaves no valid positions")
    return m[..., None], n_valid


def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def generalized_jsd(batch: LogitsBatch, cfg: JsdConfig = JsdConfig()) -> ad.Tensor:
    """beta * KL(P || M) + (1-beta) * KL(Q || M) with M = beta*P + (1-beta)*Q,
    P the (frozen) teacher softmax and Q the student softmax, token-averaged
    over valid positions."""
    beta = cfg.beta
    teacher = np.asarray(batch.teacher_logits)
    student = (
        batch.student_logits
        if isinstance(batch.student_logits, ad.Tensor)
        else ad.Tensor(batch.student_logits)
    )
    dtype = student.dtype
    mask, n_valid = _valid_mask(batch.mask, teacher.shape[:-1], dtype)

    log_p = _np_log_softmax(teacher.astype(np.float64))
    p = np.exp(log_p)
    # teacher-only entropy term, a constant w.r.t. the student
    p_log_p = float((mask[..., 0] * (p * log_p).sum(axis=-1)).sum())

    log_q = ad.log_softmax(student)
    q = ad.exp(log_q)
    p_const = p.astype(dtype)
    mixture = ad.add(
        ad.scale(q, 1.0 - beta),
        ad.Tensor(beta * p_const, _check=False),
    )
    log_m = ad.log(ad.clip(mixture, cfg.prob_floor, np.inf))

    # beta * sum P (log P - log M)
    cross_pm = ad.sum_all(ad.mul(ad.mul(log_m, p_const), mask))
    kl_p_m = ad.add(ad.scale(cross_pm, -1.0), float(p_log_p))
    # (1-beta) * sum Q (log Q - log M)
    kl_q_m = ad.sum_all(ad.mul(ad.mul(q, ad.sub(log_q, log_m)), mask))

    loss = ad.add(ad.scale(kl_p_m, beta / n_valid), ad.scale(kl_q_m, (1.0 - beta) / n_valid))
    return loss


def ntp_loss(student_logits, targets: np.ndarray, mask: np.ndarray | None = None) -> ad.Tensor:
    """Mean negative log-likelihood of the target token ids over valid
    positions (the minimized form of the next-token objective)."""
    student = (
        student_logits
        if isinstance(student_logits, ad.Tensor)
        else ad.Tensor(student_logits)
    )
    targets = np.asarray(targets)
    if targets.shape != student.shape[:-1]:
        raise ContractViolation(
            f"targets shape {targets.shape} != positions {student.shape[:-1]}"
        )
    mask_arr, n_valid = _valid_mask(mask, targets.shape, student.dtype)
    log_probs = ad.log_softmax(student)
    picked = ad.pick_last_axis(log_probs, targets)
    total = ad.sum_all(ad.mul(picked, ad.Tensor(mask_arr[..., 0])))
    return ad.scale(total, -1.0 / n_valid)


def kl_divergence(log_p: np.ndarray, log_q: np.ndarray) -> float:
    """KL(P || Q) from log-space distributions over the last axis."""
    log_p = np.asarray(log_p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_p.shape != log_q.shape:
        raise ContractViolation("kl_divergence: shapes differ")
    p = np.exp(log_p)
    q = np.exp(log_q)
    for name, dist in (("P", p), ("Q", q)):
        if np.abs(dist.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ContractViolation(f"kl_divergence: {name} is not normalized")
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return float(terms.sum())
