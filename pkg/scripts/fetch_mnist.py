"""Build a desk-scale MNIST subset in IDX format.

The official MNIST mirrors are not always reachable, but the ``mnist`` npm
package ships 10,000 MNIST digits as JSON (one file per class, pixels in
[0, 1]). This script converts them into the standard gzip-compressed IDX
files expected by ``lmcca.data.load_mnist``:

    data/mnist/train-images-idx3-ubyte.gz   (8000 images)
    data/mnist/train-labels-idx1-ubyte.gz
    data/mnist/t10k-images-idx3-ubyte.gz    (2000 images)
    data/mnist/t10k-labels-idx1-ubyte.gz

If you have the official files, drop them into the same directory instead.

Usage:
    python scripts/fetch_mnist.py [--package-dir DIR] [--out data/mnist]
"""
import argparse
import gzip
import json
import shutil
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

N_TRAIN = 8000
SPLIT_SEED = 20220614


def _npm_package(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tf:
        tf.extractall(workdir)
    return workdir / "package"


def _read_digits(package_dir: Path):
    images, labels = [], []
    for digit in range(10):
        with open(package_dir / "src" / "digits" / f"{digit}.json") as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        block = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255).astype(np.uint8)
        images.append(block)
        labels.append(np.full(len(block), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    header = struct.pack(">IIII", 0x00000803, len(images), 28, 28)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    header = struct.pack(">II", 0x00000801, len(labels))
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + labels.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--package-dir", type=Path, default=None,
                    help="unpacked npm 'mnist' package (fetched with npm if omitted)")
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    args = ap.parse_args()

    tmp = None
    pkg = args.package_dir
    if pkg is None:
        tmp = Path(tempfile.mkdtemp())
        pkg = _npm_package(tmp)
    try:
        images, labels = _read_digits(pkg)
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)

    order = np.random.default_rng(SPLIT_SEED).permutation(len(images))
    images, labels = images[order], labels[order]
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out / "train-images-idx3-ubyte.gz", images[:N_TRAIN])
    write_idx_labels(args.out / "train-labels-idx1-ubyte.gz", labels[:N_TRAIN])
    write_idx_images(args.out / "t10k-images-idx3-ubyte.gz", images[N_TRAIN:])
    write_idx_labels(args.out / "t10k-labels-idx1-ubyte.gz", labels[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(images) - N_TRAIN} test images to {args.out}")


if __name__ == "__main__":
    main()
