"""Adversarial training pipelines and robustness evaluation.

Per batch every method first attacks the clean sample with PGD, then:

* ``sat``: trains on the adversarial sample.
* ``lm_oracle`` / ``lm_cca``: masks the k penultimate features that moved
  most between clean and adversarial input, trains on the masked logits.
* ``lc_cca``: trains on the CCA output of the adversarial sample.
* ``lc_cca_star`` / ``lc_cca_star_delta``: as ``lc_cca`` but CCA is
  projected around the clean sample (radius epsilon, or epsilon + delta).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attacks import cca, pgd
from .config import RunConfig
from .data import Dataset, augment
from .losses import cross_entropy, smooth_targets, smoothed_ce
from .masking import cca_mask, keep_vector, oracle_mask
from .model import Classifier, save_checkpoint

__all__ = [
    "smooth_targets", "cross_entropy", "SGD", "MetricsRecord", "TrainingDiverged",
    "train_epoch", "evaluate", "select_best", "run_training", "EVAL_MODES", "METHOD_EVAL_MODE",
]

log = logging.getLogger(__name__)

EVAL_MODES = ("clean", "pgd", "pgd_with_lm_oracle", "pgd_with_lm_cca", "pgd_with_lc_cca")
METHOD_EVAL_MODE = {
    "sat": "pgd",
    "lm_oracle": "pgd_with_lm_oracle",
    "lm_cca": "pgd_with_lm_cca",
    "lc_cca": "pgd_with_lc_cca",
    "lc_cca_star": "pgd_with_lc_cca",
    "lc_cca_star_delta": "pgd_with_lc_cca",
}
METRICS_HEADER = ("epoch", "method", "gamma", "k", "delta", "seed", "train_loss",
                  "clean_acc", "robust_acc", "lr", "wall_time")


class TrainingDiverged(RuntimeError):
    pass


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * w)``; ``w <- w - lr * v``.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: None for name in params}

    def step(self) -> None:
        for name, p in self.params.items():
            dt = p.data.dtype.type
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + dt(self.weight_decay) * p.data
            v = self.velocity[name]
            v = g if v is None else dt(self.momentum) * v + g
            self.velocity[name] = v
            p.data = p.data - dt(self.lr) * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class MetricsRecord:
    epoch: int
    method: str
    gamma: float
    k: int
    delta: float
    seed: int
    train_loss: float
    clean_acc: Optional[float]
    robust_acc: Optional[float]
    lr: float
    wall_time: float

    def row(self) -> list:
        def num(v, fmt):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, fmt)
        return [str(self.epoch), self.method, repr(float(self.gamma)), str(self.k),
                repr(float(self.delta)), str(self.seed), num(self.train_loss, ".6f"),
                num(self.clean_acc, ".2f"), num(self.robust_acc, ".2f"),
                repr(float(self.lr)), num(self.wall_time, ".3f")]


def _pgd_seed(config: RunConfig, epoch: int) -> int:
    return config.seed * 1_000_003 + epoch


def _batch_logits(model: Classifier, config: RunConfig, x, x_adv, progress: float):
    """Training-mode logits for the method's training input."""
    method = config.method
    if method == "sat":
        return model.forward(x_adv)
    if method in ("lm_oracle", "lm_cca"):
        mask = oracle_mask(model, x, x_adv, config.mask_k_at(progress))
        return model.masked_forward(x_adv, keep_vector(mask))
    spec = config.cca_attack_at(progress)
    if method == "lc_cca":
        x_hat = cca(model, x_adv, spec, center="observed")
    else:  # lc_cca_star, lc_cca_star_delta (margin carried by cca_attack)
        x_hat = cca(model, x_adv, spec, center="oracle", x_clean=x)
    return model.forward(x_hat)


def train_epoch(model: Classifier, optimizer: SGD, data: Dataset, config: RunConfig,
                epoch: int) -> float:
    """One pass over ``data`` in a seeded shuffled order; returns the mean loss."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(data))
    loss_fn = smoothed_ce(config.gamma)
    optimizer.lr = config.lr_at(epoch)
    total, seen = 0.0, 0
    n_batches = max(1, math.ceil(len(order) / config.batch_size))
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start:start + config.batch_size]
        x = data.images[idx]
        if config.augmentation is not None:
            x = augment(x, config.augmentation, np.random.default_rng([config.seed, epoch, start]))
        y = data.labels[idx]
        progress = epoch - 1 + b / n_batches
        x_adv = pgd(model, x, y, config.train_attack_at(progress), loss=loss_fn,
                    seed=_pgd_seed(config, epoch), sample_ids=idx)
        model.train()
        optimizer.zero_grad()
        loss = loss_fn(_batch_logits(model, config, x, x_adv, progress), y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {start // config.batch_size}")
        T.backward(loss)
        optimizer.step()
        total += value * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def _accuracy(logits: T.Tensor, y) -> np.ndarray:
    return np.argmax(logits.data, axis=1) == y


def evaluate(model: Classifier, data: Dataset, config: RunConfig, mode: str,
             steps: Optional[int] = None, batch_size: int = 250, seed: Optional[int] = None):
    """``(clean_acc, robust_acc)`` in percent; ``robust_acc`` is None for mode ``clean``.

    PGD uses plain cross-entropy with a random start and ``steps`` (default
    ``config.eval_steps``) iterations. In the masking modes one mask per
    sample, computed from the adversarial observation, is applied to both
    the clean and the adversarial evaluation.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")
    if len(data) == 0:
        return float("nan"), (None if mode == "clean" else float("nan"))
    spec = config.eval_attack.with_steps(config.eval_steps if steps is None else steps)
    cca_spec = config.cca_attack
    seed = config.seed + 7919 if seed is None else seed
    was_training = model.training
    model.eval()
    clean_hits, robust_hits = 0, 0
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            x, y = data.images[idx], data.labels[idx]
            if mode == "clean":
                with T.no_grad():
                    clean_hits += int(_accuracy(model.forward(x), y).sum())
                continue
            x_adv = pgd(model, x, y, spec, seed=seed, sample_ids=idx).data
            with T.no_grad():
                if mode == "pgd":
                    clean_logits, robust_logits = model.forward(x), model.forward(x_adv)
                elif mode in ("pgd_with_lm_oracle", "pgd_with_lm_cca"):
                    if mode == "pgd_with_lm_oracle":
                        mask = oracle_mask(model, x, x_adv, config.mask_k)
                    else:
                        mask = cca_mask(model, x_adv, cca_spec, config.mask_k)
                    keep = keep_vector(mask)
                    clean_logits = model.masked_forward(x, keep)
                    robust_logits = model.masked_forward(x_adv, keep)
            if mode == "pgd_with_lc_cca":
                x_hat_clean = cca(model, x, cca_spec).data
                x_hat_adv = cca(model, x_adv, cca_spec).data
                with T.no_grad():
                    clean_logits = model.forward(x_hat_clean)
                    robust_logits = model.forward(x_hat_adv)
            clean_hits += int(_accuracy(clean_logits, y).sum())
            robust_hits += int(_accuracy(robust_logits, y).sum())
    finally:
        model.training = was_training
    n = len(data)
    clean = 100.0 * clean_hits / n
    return clean, (None if mode == "clean" else 100.0 * robust_hits / n)


def select_best(history: Sequence) -> int:
    """1-based epoch with the highest validation robust accuracy (earliest on ties).

    ``history`` holds either numbers or :class:`MetricsRecord` rows.
    """
    if not history:
        raise ValueError("select_best needs a non-empty history")
    values = [h.robust_acc if isinstance(h, MetricsRecord) else h for h in history]
    values = [-math.inf if v is None or (isinstance(v, float) and math.isnan(v)) else v for v in values]
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best + 1


def write_metrics_header(path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)


def append_metrics(path: Path, record: MetricsRecord) -> None:
    with open(path, "a", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(record.row())


def run_training(model: Classifier, train: Dataset, validation: Dataset, config: RunConfig,
                 out_dir, record_wall_time: bool = False) -> list:
    """Train for ``config.epochs`` epochs, writing metrics.csv, last.ckpt and best.ckpt.

    Each epoch is scored on ``validation`` with the method's inference
    pipeline under the training attack (PGD with ``train_steps``). The
    wall_time column is 0 unless ``record_wall_time``; real timings always go
    to timing.csv so that metrics.csv stays byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    write_metrics_header(metrics_path)
    with open(out / "timing.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,wall_time\n")
    if config.epochs == 0:
        log.warning("epochs = 0: nothing to train, no checkpoints written")
        return []
    optimizer = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    mode = METHOD_EVAL_MODE[config.method]
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        loss = train_epoch(model, optimizer, train, config, epoch)
        clean, robust = evaluate(model, validation, config, mode, steps=config.train_steps,
                                 seed=_pgd_seed(config, 0))
        elapsed = time.perf_counter() - t0
        record = MetricsRecord(epoch, config.method, config.gamma, config.mask_k, config.delta,
                               config.seed, loss, clean, robust, config.lr_at(epoch),
                               elapsed if record_wall_time else 0.0)
        history.append(record)
        append_metrics(metrics_path, record)
        with open(out / "timing.csv", "a", encoding="utf-8", newline="") as fh:
            fh.write(f"{epoch},{elapsed:.3f}\n")
        save_checkpoint(model, out / "last.ckpt")
        if select_best(history) == epoch:
            save_checkpoint(model, out / "best.ckpt")
        log.info("epoch %d/%d loss %.4f val clean %.2f robust %.2f lr %g (%.0fs)",
                 epoch, config.epochs, loss, clean, robust if robust is not None else float("nan"),
                 config.lr_at(epoch), elapsed)
    return history


def metrics_to_csv_text(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


