"""Pixel-wise decoupled distillation and the plain cross-entropy baseline.

Each pixel's class distribution is collapsed to a binary pair: the
probability of the ground-truth class and the summed mass of every other
class.  The student's pair is pulled towards the average of the teacher's
pair and the one-hot label pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax, mul, plogpq, softmax, tsum

IGNORE_INDEX = 255


class LabelError(ValueError):
    """Label map holds a class index outside 0..K-1 (other than ignore)."""


@dataclass
class DecoupledMaps:
    s_t: Tensor
    s_nt: Tensor
    valid: np.ndarray


def _one_hot(y: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    valid = y != IGNORE_INDEX
    bad = valid & ((y < 0) | (y >= K))
    if bad.any():
        raise LabelError(f"label values {sorted(set(np.unique(y[bad]).tolist()))} outside 0..{K - 1}")
    idx = np.where(valid, y, 0).astype(np.int64)
    oh = np.zeros((y.shape[0], K) + y.shape[1:])
    np.put_along_axis(oh, idx[:, None], 1.0, axis=1)
    oh *= valid[:, None]
    return oh, valid


def decouple(S: Tensor, y) -> DecoupledMaps:
    """Target / non-target probability maps [B,H,W] from logits [B,K,H,W].
    Ignore pixels get (0, 0) and are flagged invalid."""
    K = S.shape[1]
    oh, valid = _one_hot(y, K)
    probs = softmax(S, axis=1)
    s_t = tsum(mul(probs, Tensor(oh)), axis=1)
    s_nt = tsum(mul(probs, Tensor((1.0 - oh) * valid[:, None])), axis=1)
    return DecoupledMaps(s_t, s_nt, valid)


def _empty_warning(name: str) -> None:
    warnings.warn(f"{name}: every pixel is ignored, loss defined as 0", RuntimeWarning, stacklevel=3)


def pdd_loss(S_V: Tensor, S_C: Tensor, y, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """Binary target / non-target KL of the student against the renormalized
    teacher-plus-label pair, averaged over non-ignore pixels."""
    if S_V.shape != S_C.shape:
        raise ValueError(f"pdd_loss: student {S_V.shape} vs teacher {S_C.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError(f"pdd_loss: alpha={alpha}, beta={beta} must be non-negative")
    student = decouple(S_V, y)
    teacher = decouple(S_C.detach(), y)
    valid = student.valid
    n_valid = int(valid.sum())
    if n_valid == 0:
        _empty_warning("pdd_loss")
        return Tensor(0.0)
    mask = valid.astype(np.float64)
    # label pair is (1, 0) on valid pixels; the mixture sums to 2
    q_t = Tensor((teacher.s_t.data + mask) / 2.0 + (1.0 - mask))
    q_nt = Tensor(teacher.s_nt.data / 2.0 + (1.0 - mask))
    term_t = plogpq(student.s_t, q_t)
    term_nt = plogpq(student.s_nt, q_nt)
    total = tsum(term_t * Tensor(alpha * mask)) + tsum(term_nt * Tensor(beta * mask))
    return total * (1.0 / n_valid)


def ce_loss(S: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of the labelled class over non-ignore
    pixels."""
    K = S.shape[1]
    oh, valid = _one_hot(y, K)
    n_valid = int(valid.sum())
    if n_valid == 0:
        _empty_warning("ce_loss")
        return Tensor(0.0)
    return tsum(mul(log_softmax(S, axis=1), Tensor(oh))) * (-1.0 / n_valid)
