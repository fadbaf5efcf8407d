"""Run configuration, presets and the flat ``key = value`` config file.

A config file is UTF-8 text, one ``key = value`` per line, ``#`` starts a
comment. Missing keys take the preset's defaults. ``epsilon``/``alpha``/
``delta`` accept fractions such as ``8/255``. Comma-separated values on
one of :data:`SWEEP_KEYS` expand into a grid of independent runs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

from .attacks import AttackSpec
from .data import AugmentationPolicy
from .model import ArchConfig

METHODS = ("sat", "lm_oracle", "lm_cca", "lc_cca", "lc_cca_star", "lc_cca_star_delta")
KEYS = ("method", "dataset", "preset", "epsilon", "alpha", "train_steps", "eval_steps",
        "cca_steps", "gamma", "k", "delta", "epochs", "lr", "momentum", "weight_decay",
        "lr_step_epochs", "batch_size", "seed", "validation_size", "out_dir")
SWEEP_KEYS = ("method", "gamma", "k", "delta", "seed")


class ConfigError(ValueError):
    """Invalid key or value; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    method: str = "sat"
    dataset: str = "mnist"
    preset: str = "mnist-small"
    epsilon: float = 0.3
    alpha: float = 0.075
    train_steps: int = 10
    eval_steps: int = 20
    cca_steps: int = 10
    gamma: float = 0.0
    k: Optional[int] = None  # None -> round(0.1 * d)
    delta: float = 0.0
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_epochs: tuple = (6, 8)
    batch_size: int = 128
    seed: int = 1
    validation_size: int = 1000
    out_dir: str = "runs/default"
    # preset-only (not file keys)
    arch: ArchConfig = ArchConfig()
    augmentation: Optional[AugmentationPolicy] = None
    warmup_epochs: float = 0.0  # linear ramp of the training radius and mask size

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", f"must lie in [0, 1), got {self.gamma}")
        if self.delta < 0:
            raise ConfigError("delta", "must be non-negative")
        if self.epsilon < 0 or self.alpha <= 0:
            raise ConfigError("epsilon", "epsilon must be >= 0 and alpha > 0")
        for key in ("train_steps", "eval_steps", "cca_steps", "epochs", "validation_size"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        steps = tuple(self.lr_step_epochs)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("lr_step_epochs", f"must be strictly increasing, got {steps}")
        if steps and self.epochs and steps[-1] >= self.epochs:
            raise ConfigError("lr_step_epochs", f"must be below epochs={self.epochs}, got {steps}")
        if self.k is not None and not 0 <= self.k <= self.arch.penultimate_dim:
            raise ConfigError("k", f"must lie in [0, {self.arch.penultimate_dim}]")

    @property
    def mask_k(self) -> int:
        return self.k if self.k is not None else int(round(0.1 * self.arch.penultimate_dim))

    @property
    def train_attack(self) -> AttackSpec:
        return AttackSpec(self.epsilon, self.alpha, self.train_steps, random_start=True)

    def warmup_scale(self, progress: float) -> float:
        """Fraction of full strength after ``progress`` (fractional) training epochs."""
        if not self.warmup_epochs or progress >= self.warmup_epochs:
            return 1.0
        return max(progress, 0.0) / self.warmup_epochs

    def _ramped(self, spec: AttackSpec, scale: float) -> AttackSpec:
        if scale == 1.0:
            return spec
        # alpha keeps its ratio to epsilon; at scale 0 the ball is a point anyway
        alpha = spec.alpha * scale if scale > 0 else spec.alpha
        return replace(spec, epsilon=spec.epsilon * scale, alpha=alpha)

    def train_attack_at(self, progress: float) -> AttackSpec:
        return self._ramped(self.train_attack, self.warmup_scale(progress))

    def cca_attack_at(self, progress: float) -> AttackSpec:
        return self._ramped(self.cca_attack, self.warmup_scale(progress))

    def mask_k_at(self, progress: float) -> int:
        return int(round(self.mask_k * self.warmup_scale(progress)))

    @property
    def eval_attack(self) -> AttackSpec:
        return AttackSpec(self.epsilon, self.alpha, self.eval_steps, random_start=True)

    @property
    def cca_attack(self) -> AttackSpec:
        margin = self.delta if self.method == "lc_cca_star_delta" else 0.0
        return AttackSpec(self.epsilon, self.alpha, self.cca_steps, random_start=False, margin=margin)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: divided by 10 after each step epoch."""
        drops = sum(1 for m in self.lr_step_epochs if epoch > m)
        return self.lr / 10 ** drops

    def resolved_text(self) -> str:
        lines = []
        for key in KEYS:
            value = getattr(self, key)
            text = format_value(value)
            if key in ("epsilon", "alpha", "delta") and value:
                frac = Fraction(value).limit_denominator(255)
                if frac.denominator == 255 and float(frac) == value:
                    text = f"{frac.numerator}/255"
            lines.append(f"{key} = {text}")
        lines.append(f"# arch = {self.arch.descriptor()}")
        aug = self.augmentation
        lines.append(f"# augmentation = {'none' if aug is None else f'flip={aug.horizontal_flip},crop_pad={aug.crop_padding}'}")
        lines.append(f"# k_effective = {self.mask_k}")
        lines.append(f"# warmup_epochs = {format_value(float(self.warmup_epochs))}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "mnist-small": dict(
        dataset="mnist", arch=ArchConfig("small-cnn", (1, 28, 28), 10, (8, 16), 128),
        epsilon=0.3, alpha=0.075, train_steps=10, eval_steps=20, cca_steps=10,
        epochs=10, lr=0.05, lr_step_epochs=(6, 8), batch_size=128, validation_size=1000,
        augmentation=None, warmup_epochs=2.0,
    ),
    "cifar-slim": dict(
        dataset="cifar10", arch=ArchConfig("slim-resnet", (3, 32, 32), 10, (16, 32), 128),
        epsilon=8 / 255, alpha=2 / 255, train_steps=10, eval_steps=20, cca_steps=10,
        epochs=20, lr=0.1, lr_step_epochs=(12, 16), batch_size=128, validation_size=1000,
        augmentation=AugmentationPolicy(True, 4),
    ),
    "paper-cifar10": dict(
        dataset="cifar10", arch=ArchConfig("slim-resnet", (3, 32, 32), 10, (64, 128), 512),
        epsilon=8 / 255, alpha=2 / 255, train_steps=10, eval_steps=20, cca_steps=10, k=50,
        epochs=120, lr=0.1, lr_step_epochs=(75, 90), batch_size=128, validation_size=1000,
        augmentation=AugmentationPolicy(True, 4),
    ),
    "paper-cifar100": dict(
        dataset="cifar100", arch=ArchConfig("slim-resnet", (3, 32, 32), 100, (64, 128), 512),
        epsilon=8 / 255, alpha=2 / 255, train_steps=10, eval_steps=20, cca_steps=10, k=50,
        epochs=120, lr=0.1, lr_step_epochs=(75, 90), batch_size=128, validation_size=1000,
        augmentation=AugmentationPolicy(True, 4),
    ),
}


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_float(key: str, text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"not a number: {text!r}") from None


def _parse_int(key: str, text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(key, f"not an integer: {text!r}") from None


_INT_KEYS = {"train_steps", "eval_steps", "cca_steps", "epochs", "batch_size", "seed",
             "validation_size"}
_FLOAT_KEYS = {"epsilon", "alpha", "gamma", "delta", "lr", "momentum", "weight_decay"}


def parse_value(key: str, text: str):
    text = text.strip()
    if key not in KEYS:
        raise ConfigError(key, "unknown config key")
    if key in _INT_KEYS:
        return _parse_int(key, text)
    if key in _FLOAT_KEYS:
        return _parse_float(key, text)
    if key == "k":
        return None if text in ("auto", "") else _parse_int(key, text)
    if key == "lr_step_epochs":
        return tuple(_parse_int(key, t) for t in text.split(",") if t.strip())
    return text


def read_config_text(text: str) -> dict:
    """Raw ``key -> value string`` mapping, rejecting unknown and repeated keys."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, "unknown config key")
        if key in raw:
            raise ConfigError(key, "repeated key")
        raw[key] = value
    return raw


def build_config(raw: dict) -> RunConfig:
    """Resolve a single (non-sweep) raw mapping against its preset."""
    preset = raw.get("preset", "mnist-small")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {tuple(PRESETS)}")
    values = dict(PRESETS[preset], preset=preset)
    for key, text in raw.items():
        if key == "preset":
            continue
        values[key] = parse_value(key, text)
    if "lr_step_epochs" not in raw and "epochs" in raw and preset in ("mnist-small", "cifar-slim"):
        # desk presets step at 60% / 80% of the run
        e = values["epochs"]
        values["lr_step_epochs"] = tuple(sorted({m for m in (int(0.6 * e), int(0.8 * e)) if 0 < m < e}))
    return RunConfig(**values)


def expand_sweep(raw: dict) -> list:
    """Cartesian product over comma lists on sweep keys -> [(suffix, raw), ...]."""
    axes = [(k, [v.strip() for v in raw[k].split(",")]) for k in SWEEP_KEYS
            if k in raw and "," in raw[k]]
    if not axes:
        return [("", raw)]
    runs = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        sub = dict(raw)
        parts = []
        for (key, _), val in zip(axes, combo):
            sub[key] = val
            parts.append(f"{key}={val}")
        runs.append(("_".join(parts), sub))
    return runs


def override(config: RunConfig, **changes) -> RunConfig:
    return replace(config, **changes)

