"""MNIST IDX / CIFAR binary loaders, splits and augmentation.

Pixels are scaled to [0, 1]; images are kept as float32 N x C x H x W
arrays. Files ending in ``.gz`` are decompressed transparently.
"""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    code = "format"


class BadMagicError(DataFormatError):
    code = "magic"


class TruncatedError(DataFormatError):
    code = "truncated"


class CountMismatchError(DataFormatError):
    code = "count"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32, N x C x H x W, values in [0, 1]
    labels: np.ndarray  # int64, N
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index, split: str | None = None) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index],
                       split=split or self.split)


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _idx_payload(blob: bytes, magic: int, dims: int, what: str):
    header = 4 + 4 * dims
    if len(blob) < header:
        raise TruncatedError(f"{what}: header truncated ({len(blob)} bytes)")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise BadMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack_from(f">{dims}I", blob, 4)
    need = int(np.prod(shape))
    if len(blob) - header < need:
        raise TruncatedError(f"{what}: payload has {len(blob) - header} bytes, header promises {need}")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=header).reshape(shape)


def load_mnist(images_path, labels_path, split: str = "train") -> Dataset:
    images = _idx_payload(_read(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _idx_payload(_read(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    pix = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(pix, labels.astype(np.int64), 10, split)


def load_cifar_binary(paths: Sequence, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Concatenate CIFAR binary batch files (fine labels for cifar100)."""
    if variant == "cifar10":
        record, label_offset, classes = 3073, 0, 10
    elif variant == "cifar100":
        record, label_offset, classes = 3074, 1, 100
    else:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    images, labels = [], []
    for path in paths:
        blob = _read(path)
        if len(blob) % record:
            raise TruncatedError(f"{path}: {len(blob)} bytes is not a multiple of {record}")
        if not blob:
            log.warning("%s: empty CIFAR file", path)
        rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_offset].astype(np.int64))
        images.append(rows[:, record - 3072:].reshape(-1, 3, 32, 32))
    pix = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    lab = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return Dataset(pix.astype(np.float32) / np.float32(255.0), lab, classes, split)


def split_train_validation(dataset: Dataset, validation_size: int):
    """The last ``validation_size`` samples (file order) become the validation split."""
    n = len(dataset)
    if validation_size < 0 or (validation_size > 0 and validation_size >= n):
        raise ValueError(f"validation_size {validation_size} must be below dataset size {n}")
    cut = n - validation_size
    return dataset.subset(slice(0, cut), "train"), dataset.subset(slice(cut, n), "validation")


@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip: bool = True
    crop_padding: int = 4  # 0 disables random crop


def flip_horizontal(images: np.ndarray, decisions: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[decisions] = out[decisions][..., ::-1]
    return out


def pad_crop(images: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad by ``pad`` per side and crop at per-image (row, col) offsets."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i, (r, q) in enumerate(offsets):
        out[i] = padded[i, :, r:r + h, q:q + w]
    return out


def augment(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 0.5), then zero-pad and random crop."""
    n = len(images)
    out = images
    if policy.horizontal_flip:
        out = flip_horizontal(out, rng.random(n) < 0.5)
    if policy.crop_padding:
        p = policy.crop_padding
        out = pad_crop(out, p, rng.integers(0, 2 * p + 1, size=(n, 2)))
    return out


def synthetic_dataset(n: int, num_classes: int = 10, shape=(1, 28, 28), seed: int = 0,
                      split: str = "train") -> Dataset:
    """Class-dependent random blobs; only for smoke tests where real files are absent."""
    protos = np.random.default_rng(12345).uniform(0, 1, (num_classes,) + tuple(shape)).astype(np.float32)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    noise = rng.uniform(-0.2, 0.2, (n,) + tuple(shape)).astype(np.float32)
    return Dataset(np.clip(protos[labels] + noise, 0, 1), labels.astype(np.int64), num_classes, split)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_named(dataset: str, data_dir, split: str) -> Dataset:
    """Load ``train`` or ``test`` of a dataset id from ``data_dir/<id>/``."""
    root = Path(data_dir)
    if dataset == "mnist":
        d = root / "mnist"
        img, lab = MNIST_FILES[split]
        return load_mnist(_find(d, img), _find(d, lab), split)
    if dataset == "cifar10":
        d = root / "cifar10"
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return load_cifar_binary([_find(d, n) for n in names], "cifar10", split)
    if dataset == "cifar100":
        d = root / "cifar100"
        return load_cifar_binary([_find(d, f"{split}.bin")], "cifar100", split)
    if dataset.startswith("synthetic"):
        return synthetic_dataset(600 if split == "train" else 200, seed=0 if split == "train" else 1,
                                 split=split)
    raise ValueError(f"unknown dataset {dataset!r}")
