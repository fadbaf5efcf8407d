"""Label smoothing and the smoothed-target cross-entropy."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def smooth_targets(y, num_classes: int, gamma: float) -> np.ndarray:
    """Mix one-hot targets with the uniform distribution.

    Row ``i`` puts ``(1 - gamma) + gamma / c`` on ``y[i]`` and ``gamma / c``
    everywhere else. ``y`` may be a single index or a sequence of indices.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    labels = np.atleast_1d(np.asarray(y))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels}")
    out = np.full((labels.size, num_classes), gamma / num_classes)
    out[np.arange(labels.size), labels] += 1.0 - gamma
    return out[0] if np.ndim(y) == 0 else out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum(targets * log_softmax(logits))``."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    targets = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    per = T.sum(T.mul(T.log_softmax(logits), Tensor(targets, dtype=logits.dtype)))
    return T.mul_scalar(per, -1.0 / logits.shape[0])


def smoothed_ce(gamma: float):
    """Loss callable ``(logits, labels) -> scalar`` with label smoothing ``gamma``."""
    def loss(logits: Tensor, y) -> Tensor:
        return cross_entropy(logits, smooth_targets(np.asarray(y), logits.shape[-1], gamma))
    return loss
