"""Penultimate-layer consistency, top-k masks and latent diagnostics.

The deviation between a reference and an observed activation vector picks
the ``k`` least consistent features; classification then keeps only the
complement. Every function accepts a single vector (d,) or a batch (B, d).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, cca
from .model import Classifier

SOURCES = ("oracle", "cca_reference", "explicit")


@dataclass(frozen=True)
class LatentMask:
    bits: np.ndarray  # (d,) or (B, d), 0/1
    k: int
    source: str = "explicit"

    def __post_init__(self):
        counts = np.asarray(self.bits).sum(axis=-1)
        if not np.all(counts == self.k):
            raise ValueError(f"mask popcount {counts} differs from k={self.k}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown mask source {self.source!r}")

    @property
    def d(self) -> int:
        return self.bits.shape[-1]


@dataclass(frozen=True)
class ConsistencyProfile:
    sigma: np.ndarray
    beta: float
    consistent: np.ndarray    # indices with sigma <= beta
    inconsistent: np.ndarray  # indices with sigma > beta


def _vec(z) -> np.ndarray:
    return z.data if isinstance(z, T.Tensor) else np.asarray(z)


def deviation(z_ref, z_obs) -> np.ndarray:
    """Elementwise ``|z_obs - z_ref|``."""
    a, b = _vec(z_ref), _vec(z_obs)
    if a.shape != b.shape:
        raise ValueError(f"deviation: shapes {a.shape} and {b.shape} differ")
    return np.abs(b - a)


def top_k_mask(u, k: int, source: str = "explicit") -> LatentMask:
    """Select the ``k`` largest entries of ``u`` per row; ties go to the smaller index."""
    u = _vec(u)
    d = u.shape[-1]
    if not 0 <= k <= d:
        raise ValueError(f"k must lie in [0, {d}], got {k}")
    rows = u.reshape(-1, d)
    # stable sort of -u: descending values, ascending index among equals
    order = np.argsort(-rows, axis=1, kind="stable")[:, :k]
    bits = np.zeros(rows.shape, dtype=np.uint8)
    np.put_along_axis(bits, order, 1, axis=1)
    return LatentMask(bits.reshape(u.shape), k, source)


def keep_vector(mask: LatentMask) -> np.ndarray:
    """``1 - bits``: the features that stay active."""
    return (1 - mask.bits).astype(np.uint8)


def _penultimate(model: Classifier, x) -> np.ndarray:
    with T.no_grad():
        was = model.training
        model.eval()
        try:
            return model.penultimate(x).data
        finally:
            model.training = was


def oracle_mask(model: Classifier, x_clean, x_obs, k: int) -> LatentMask:
    sigma = deviation(_penultimate(model, x_clean), _penultimate(model, x_obs))
    return top_k_mask(sigma, k, "oracle")


def cca_mask(model: Classifier, x_obs, spec: AttackSpec, k: int, x_hat=None) -> LatentMask:
    """Mask from the deviation between ``x_obs`` and its CCA reference.

    ``x_hat`` may be passed when the CCA output is already available.
    """
    if x_hat is None:
        x_hat = cca(model, x_obs, spec, center="observed")
    sigma = deviation(_penultimate(model, x_hat), _penultimate(model, x_obs))
    return top_k_mask(sigma, k, "cca_reference")


def sparsity(z, tol: float = 1e-6):
    """Number of entries with ``|z_i| > tol`` (per row for batches)."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    return (np.abs(_vec(z)) > tol).sum(axis=-1)


def cosine_similarity(a, b):
    """Cosine of the angle between ``a`` and ``b`` (row-wise for batches).

    A zero vector gives 0 and bumps ``WARNINGS['cosine_zero']``.
    """
    a = np.asarray(_vec(a), dtype=np.float64)
    b = np.asarray(_vec(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    zero = denom == 0
    if np.any(zero):
        T.WARNINGS["cosine_zero"] += int(np.sum(zero))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(zero, 0.0, (a * b).sum(axis=-1) / np.where(zero, 1.0, denom))
    cos = np.clip(cos, -1.0, 1.0)
    return float(cos) if cos.ndim == 0 else cos


def default_beta(z_batch) -> float:
    """Diagnostic threshold: a tenth of the mean absolute activation."""
    return 0.1 * float(np.mean(np.abs(_vec(z_batch))))


def consistency_profile(z_ref, z_obs, beta: Optional[float] = None) -> ConsistencyProfile:
    """Split feature indices by ``sigma <= beta`` for a single pair of vectors."""
    sigma = deviation(z_ref, z_obs)
    if sigma.ndim != 1:
        raise ValueError("consistency_profile expects single vectors")
    if beta is None:
        beta = default_beta(np.stack([_vec(z_ref), _vec(z_obs)]))
    idx = np.arange(sigma.size)
    within = sigma <= beta
    return ConsistencyProfile(sigma, float(beta), idx[within], idx[~within])
