"""Glue between a resolved :class:`RunConfig` and the data/model/training modules."""
from __future__ import annotations

import logging
import os
from pathlib import Path

from .config import RunConfig
from .data import Dataset, load_named, split_train_validation
from .model import Classifier, build_model
from .training import run_training

log = logging.getLogger(__name__)

DEFAULT_DATA_DIR = os.environ.get("LMCCA_DATA", str(Path(__file__).resolve().parents[2] / "data"))


def parse_dataset_id(dataset: str):
    """``"mnist:2000"`` -> ``("mnist", 2000)``; the limit caps the training file."""
    name, _, limit = dataset.partition(":")
    return name, (int(limit) if limit else None)


def load_splits(config: RunConfig, data_dir=None):
    """(train, validation, test) for ``config.dataset``.

    Validation is the tail of the (optionally truncated) training file.
    """
    data_dir = data_dir or DEFAULT_DATA_DIR
    name, limit = parse_dataset_id(config.dataset)
    full = load_named(name, data_dir, "train")
    if limit is not None:
        full = full.subset(slice(0, limit))
    train, validation = split_train_validation(full, config.validation_size)
    test = load_named(name, data_dir, "test")
    return train, validation, test


def load_test(config: RunConfig, data_dir=None) -> Dataset:
    name, _ = parse_dataset_id(config.dataset)
    return load_named(name, data_dir or DEFAULT_DATA_DIR, "test")


def train_run(config: RunConfig, out_dir, data_dir=None, record_wall_time: bool = False):
    """Build, train and checkpoint one model; returns (model, history)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config.resolved_text(), encoding="utf-8")
    train, validation, _ = load_splits(config, data_dir)
    model: Classifier = build_model(config.arch, config.seed)
    history = run_training(model, train, validation, config, out, record_wall_time)
    return model, history
