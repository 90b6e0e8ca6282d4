"""Classification losses: cross-entropy and focal loss with logit gradients.

Both losses take already-softmaxed probabilities and return the mean loss
over the batch together with the gradient with respect to the logits (the
softmax Jacobian is folded in analytically). Probabilities are floored
before logarithms so a saturated prediction cannot produce an infinite
loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Floor applied to p_t before log(); small enough to be invisible at any
# reported precision.
PROB_FLOOR = 1e-12

GAMMA_MAX = 5.0


def clamp_gamma(gamma: float) -> float:
    """Clamp the focusing parameter into [0, 5]."""
    gamma = float(gamma)
    if math.isnan(gamma):
        raise FloatingPointError("gamma is NaN")
    return min(max(gamma, 0.0), GAMMA_MAX)


@dataclass(frozen=True)
class FocalLossParams:
    """Focusing parameter gamma in [0, 5] and balancing factor beta > 0.

    gamma is per-client and moves during training; beta stays fixed for
    the whole experiment.
    """

    gamma: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if math.isnan(self.gamma) or not 0.0 <= self.gamma <= GAMMA_MAX:
            raise ValueError(f"gamma must be in [0, {GAMMA_MAX}], got {self.gamma}")
        if math.isnan(self.beta) or not self.beta > 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def _true_class_probs(probabilities: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or y.ndim != 1 or p.shape[0] != y.shape[0]:
        raise ValueError("probabilities must be [batch, classes] with one label per row")
    if y.size == 0:
        raise ValueError("empty batch")
    if int(y.min()) < 0 or int(y.max()) >= p.shape[1]:
        raise ValueError(f"label out of range [0, {p.shape[1]})")
    return p, y, p[np.arange(y.shape[0]), y]


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    p, y, p_true = _true_class_probs(probabilities, labels)
    n = y.shape[0]
    loss = float(np.mean(-np.log(np.clip(p_true, PROB_FLOOR, 1.0 - PROB_FLOOR))))
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def focal_loss(probabilities: np.ndarray, labels: np.ndarray,
               params: FocalLossParams) -> tuple[float, np.ndarray]:
    """Focal loss mean(-beta * (1 - p_t)^gamma * log(p_t)) and logit gradient.

    The gradient is the full analytic derivative: both the log term and the
    modulating factor are differentiated through the softmax. With gamma=0
    and beta=1 the result is exactly cross_entropy.
    """
    p, y, p_true = _true_class_probs(probabilities, labels)
    n = y.shape[0]
    p_safe = np.clip(p_true, PROB_FLOOR, 1.0 - PROB_FLOOR)
    one_minus = 1.0 - p_safe
    log_p = np.log(p_safe)
    modulator = one_minus ** params.gamma
    loss = float(np.mean(-params.beta * modulator * log_p))
    # d(loss_i)/d(p_t) * p_t, shared factor of the softmax chain rule
    if params.gamma == 0.0:
        mod_term = np.zeros_like(p_safe)
    else:
        mod_term = params.gamma * p_safe * one_minus ** (params.gamma - 1.0) * log_p
    scale = params.beta * (mod_term - modulator)
    diff = -p.copy()
    diff[np.arange(n), y] += 1.0  # one_hot - p
    grad = scale[:, None] * diff / n
    return loss, grad
