"""Scalar objectives for rationale extraction and its distillation.

Every loss accepts a single sample or a leading batch axis and reduces by
the mean over samples. Teacher-side inputs are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from rekd import tensor as T
from rekd.gumbel import GumbelSample
from rekd.tensor import DomainError, ShapeError, Tensor

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    lambda_select: float = 0.01
    lambda_R: float = 0.5
    alpha: float = 0.3
    p_target: float = 0.15

    def __post_init__(self):
        if self.lambda_select < 0:
            raise DomainError(f"lambda_select must be >= 0, got {self.lambda_select}")
        if self.lambda_R < 0:
            raise DomainError(f"lambda_R must be >= 0, got {self.lambda_R}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.p_target <= 1.0:
            raise DomainError(f"p_target must lie in [0, 1], got {self.p_target}")


@dataclass
class LossBreakdown:
    pred: float
    select: float
    re: float
    kd_r: float = 0.0
    kd_y: float = 0.0
    kd: float = 0.0
    total: float = 0.0

    def consistency_gaps(self, tau: float, w: LossWeights) -> dict[str, float]:
        return {
            "re": abs(self.re - (self.pred + w.lambda_select * self.select)),
            "kd": abs(self.kd - (w.lambda_R * self.kd_r + tau * tau * self.kd_y)),
            "total": abs(self.total - (w.alpha * self.re + (1 - w.alpha) * self.kd)),
        }

    def as_dict(self) -> dict:
        return asdict(self)


def _batched(x: Tensor, ndim: int) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == ndim - 1 else x


def selection_loss(M, L: int, p_target: float) -> Tensor:
    """``(sum(M) - L * p_target) ** 2`` per sample, averaged over the batch."""
    if not 0.0 <= p_target <= 1.0:
        raise DomainError(f"p_target must lie in [0, 1], got {p_target}")
    M = _batched(T.as_tensor(M), 2)
    gap = T.sub(T.sum(M, axis=-1), L * p_target)
    return T.mean(T.square(gap))


def task_ce(Q, y) -> Tensor:
    Q = _batched(T.as_tensor(Q), 2)
    y = np.atleast_1d(np.asarray(y))
    C = Q.shape[-1]
    if y.shape[0] != Q.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {Q.shape[0]} logit rows")
    if np.any(y < 0) or np.any(y >= C) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integers in [0, {C}), got {y}")
    onehot = np.zeros(Q.shape)
    onehot[np.arange(len(y)), y] = 1.0
    logp = T.clamp_min(T.log_softmax(Q), LOG_FLOOR)
    return T.mul(T.mean(T.sum(T.mul(logp, onehot), axis=-1)), -1.0)


def re_loss(pred, select, w: LossWeights) -> Tensor:
    return T.add(pred, T.mul(select, w.lambda_select))


def _teacher_log_terms(S_T) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(S_T, GumbelSample):
        logp = T.log_softmax(S_T.perturbed.detach(), S_T.tau).data
        return np.exp(logp), logp
    p = S_T.data if isinstance(S_T, Tensor) else np.asarray(S_T, dtype=np.float64)
    return p, np.log(np.maximum(p, PROB_FLOOR))


def kd_rationale(S_T, S_S) -> Tensor:
    """Per-feature ``KL(S_T || S_S)`` summed over features, averaged over samples.

    Given :class:`GumbelSample` objects the log-probabilities come from the
    perturbed logits directly, which is exact at any temperature. Plain
    probability tensors are floored at ``1e-12`` before the log.
    """
    pT, logT = _teacher_log_terms(S_T)
    if isinstance(S_S, GumbelSample):
        logS = S_S.log_probs()
    else:
        logS = T.log(T.clamp_min(T.as_tensor(S_S), PROB_FLOOR))
    if pT.shape != logS.shape:
        raise ShapeError(f"teacher {pT.shape} and student {logS.shape} shapes differ")
    pT = pT.reshape((1,) + pT.shape) if pT.ndim == 2 else pT
    logT = logT.reshape(pT.shape)
    logS = _batched(logS, 3)
    entropy_part = np.where(pT > 0, pT * logT, 0.0).sum(axis=(-2, -1))
    cross = T.sum(T.mul(logS, pT), axis=(-2, -1))
    return T.mean(T.sub(entropy_part, cross))


def kd_pred(Q_T, Q_S, tau: float) -> Tensor:
    """``KL(softmax(Q_T / tau) || softmax(Q_S / tau))`` averaged over samples."""
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    qT = Q_T.data if isinstance(Q_T, Tensor) else np.asarray(Q_T, dtype=np.float64)
    Q_S = T.as_tensor(Q_S)
    if qT.shape != Q_S.shape:
        raise ShapeError(f"teacher {qT.shape} and student {Q_S.shape} shapes differ")
    logT = T.log_softmax(Tensor(qT), tau).data
    logT = logT.reshape((1,) + logT.shape) if logT.ndim == 1 else logT
    pT = np.exp(logT)
    logS = _batched(T.log_softmax(Q_S, tau), 2)
    entropy_part = (pT * logT).sum(axis=-1)
    cross = T.sum(T.mul(logS, pT), axis=-1)
    return T.mean(T.sub(entropy_part, cross))


def kd_combined(kd_r, kd_y, tau: float, w: LossWeights) -> Tensor:
    # tau**2 rescales only the prediction term; the Gumbel-Softmax term already
    # carries a 1/tau gradient scale that matches the task loss.
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return T.add(T.mul(kd_r, w.lambda_R), T.mul(kd_y, tau * tau))


def rekd_total(re, kd, w: LossWeights) -> Tensor:
    return T.add(T.mul(re, w.alpha), T.mul(kd, 1.0 - w.alpha))
