"""L-infinity ball geometry, PGD, and the compressive counter-adversarial attack.

All attacks run with the model in evaluation mode and keep every iterate
inside ``ball ∩ [clamp_lo, clamp_hi]``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .losses import smoothed_ce
from .model import Classifier
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    norm: str = "linf"
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    random_start: bool = True
    margin: float = 0.0

    def __post_init__(self):
        # epsilon = 0 and steps = 0 are allowed as degenerate (identity) attacks
        if self.epsilon < 0 or self.alpha <= 0 or self.steps < 0 or self.margin < 0:
            raise ValueError(f"invalid attack parameters: {self}")
        if self.clamp_lo >= self.clamp_hi:
            raise ValueError("clamp_lo must be below clamp_hi")
        if self.norm != "linf":
            raise ValueError(f"only the L-infinity norm is supported, got {self.norm!r}")

    def with_steps(self, steps: int) -> "AttackSpec":
        return replace(self, steps=steps)


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be non-negative")

    def bounds(self):
        c = np.asarray(self.center)
        r = c.dtype.type(self.radius) if c.dtype.kind == "f" else self.radius
        return c - r, c + r


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=T.default_dtype())


def project(x, ball: Ball, clamp_lo: float = 0.0, clamp_hi: float = 1.0) -> Tensor:
    """Clamp to the ball, then to the valid range."""
    arr = _array(x)
    if arr.shape != np.shape(ball.center):
        raise ShapeError(f"project: point {arr.shape} vs center {np.shape(ball.center)}")
    return Tensor(_project(arr, *ball.bounds(), clamp_lo, clamp_hi), dtype=arr.dtype)


def _project(arr, lo_ball, hi_ball, clamp_lo, clamp_hi):
    dt = arr.dtype.type
    return np.clip(np.clip(arr, lo_ball, hi_ball), dt(clamp_lo), dt(clamp_hi))


@contextlib.contextmanager
def evaluation(model: Classifier):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.training = was_training


def _per_sample_finite(g: np.ndarray) -> np.ndarray:
    return np.isfinite(g.reshape(g.shape[0], -1)).all(axis=1)


def _uniform_start(shape, eps, dtype, seed, sample_ids):
    noise = np.empty(shape, dtype=dtype)
    for row, sid in enumerate(sample_ids):
        rng = np.random.default_rng([int(seed), int(sid)])
        noise[row] = rng.uniform(-eps, eps, size=shape[1:])
    return noise


def _sign_descent(model, start, lo_ball, hi_ball, spec, objective, direction, callback, warn_key):
    """Shared iterate loop: x <- proj(x + direction * alpha * sgn(grad objective))."""
    x = start
    active = np.ones(x.shape[0], dtype=bool)
    alpha = x.dtype.type(spec.alpha)
    for t in range(spec.steps):
        xt = Tensor(x, requires_grad=True, dtype=x.dtype)
        (g,) = T.grad(objective(xt), [xt])
        finite = _per_sample_finite(g) & active
        if not finite.all():
            T.WARNINGS[warn_key] += int((active & ~finite).sum())
            active &= finite
        stepped = x + direction * alpha * np.sign(np.nan_to_num(g)).astype(x.dtype)
        new = _project(stepped, lo_ball, hi_ball, spec.clamp_lo, spec.clamp_hi)
        x = np.where(active.reshape((-1,) + (1,) * (x.ndim - 1)), new, x)
        if callback is not None:
            callback(t + 1, x)
    return x


def pgd(model: Classifier, x, y, spec: AttackSpec, loss: Optional[Callable] = None,
        seed: int = 0, sample_ids=None, callback: Optional[Callable] = None) -> Tensor:
    """Projected sign-gradient ascent on ``loss`` inside the epsilon-ball around ``x``.

    ``loss(logits, y)`` defaults to plain cross-entropy. The random start of
    sample ``i`` is drawn from a stream keyed on ``(seed, sample_ids[i])`` so
    results do not depend on how a dataset is batched. ``callback(t, x_t)``
    sees every iterate, including the start (``t = 0``).
    """
    loss = loss or smoothed_ce(0.0)
    x0 = _array(x)
    y = np.asarray(y)
    lo_ball, hi_ball = Ball(x0, spec.epsilon).bounds()
    start = x0
    if spec.random_start and spec.epsilon > 0:
        ids = np.arange(x0.shape[0]) if sample_ids is None else np.asarray(sample_ids)
        start = x0 + _uniform_start(x0.shape, spec.epsilon, x0.dtype, seed, ids)
    start = _project(start, lo_ball, hi_ball, spec.clamp_lo, spec.clamp_hi)
    if callback is not None:
        callback(0, start)
    with evaluation(model):
        out = _sign_descent(model, start, lo_ball, hi_ball, spec,
                            lambda xt: loss(model.forward(xt), y), 1, callback, "pgd_nonfinite")
    return Tensor(out, dtype=out.dtype)


def compression_loss(model: Classifier, x) -> Tensor:
    """L1 norm of the penultimate activations, summed over the batch."""
    return T.sum(T.abs(model.penultimate(x)))


def compression_per_sample(model: Classifier, x) -> np.ndarray:
    with T.no_grad():
        return np.abs(model.penultimate(x).data).sum(axis=1)


def cca(model: Classifier, x_obs, spec: AttackSpec, center: str = "observed",
        x_clean=None, callback: Optional[Callable] = None) -> Tensor:
    """Compressive counter-adversarial attack.

    Starting at ``x_obs``, take ``spec.steps`` sign-gradient *descent* steps
    on the penultimate L1 norm. With ``center="observed"`` iterates are
    projected onto the epsilon-ball around ``x_obs``; with
    ``center="oracle"`` onto the ball of radius ``epsilon + margin`` around
    ``x_clean`` (training-time only).
    """
    xo = _array(x_obs)
    if center == "observed":
        lo_ball, hi_ball = Ball(xo, spec.epsilon).bounds()
    elif center == "oracle":
        if x_clean is None:
            raise ValueError("cca with center='oracle' needs the clean sample")
        xc = _array(x_clean)
        if xc.shape != xo.shape:
            raise ShapeError(f"cca: clean {xc.shape} vs observed {xo.shape}")
        lo_ball, hi_ball = Ball(xc, spec.epsilon + spec.margin).bounds()
    else:
        raise ValueError(f"center must be 'observed' or 'oracle', got {center!r}")
    if callback is not None:
        callback(0, xo)
    with evaluation(model):
        out = _sign_descent(model, xo, lo_ball, hi_ball, spec,
                            lambda xt: compression_loss(model, xt), -1, callback, "cca_nonfinite")
    return Tensor(out, dtype=out.dtype)
