"""Enhancement (weighted L1) and event-denoising (3-class cross-entropy) losses."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor
from .autodiff import tensor as T
from .events import N_CLASSES

ALPHA = 0.5
BETA = 0.5


def _l1(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"L1: prediction {pred.shape} and target {target.shape} differ")
    return T.mean(T.abs_(pred - target))


def enh_loss(high_hat, l_hat, r_hat, high, l_target, r_target, alpha: float = ALPHA, beta: float = BETA) -> Tensor:
    """Mean L1 on the image plus ``alpha``/``beta``-weighted L1 on each branch."""
    return _l1(high_hat, high) + alpha * _l1(l_hat, l_target) + beta * _l1(r_hat, r_target)


def one_hot(classes: np.ndarray) -> np.ndarray:
    """(N, H, W) class ids -> (N, 3, H, W) one-hot."""
    return np.moveaxis(np.eye(N_CLASSES)[classes], -1, 1)


def den_loss(logits, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of softmax(logits) over axis 1.

    The log-sum-exp is shifted by the (constant) per-pixel maximum logit.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    if target.ndim == logits.ndim - 1:
        target = one_hot(target)
    if logits.shape != target.shape:
        raise ShapeError(f"cross-entropy: logits {logits.shape} and target {target.shape} differ")
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = logits - shift
    lse = T.log(T.sum_(T.exp(shifted), axis=1))
    picked = T.sum_(shifted * target, axis=1)
    return T.mean(lse - picked)
