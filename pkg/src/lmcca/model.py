"""Small classifiers that expose their penultimate activations.

A :class:`Classifier` is ``head ∘ features``: ``features`` maps an image
batch to the penultimate activations ``z`` (B x d) and ``head`` is a single
dense layer d -> c. Built-in architectures:

* ``small-cnn``: two conv/relu/avgpool stages, a dense relu layer of width
  d, then the head (MNIST desk runs).
* ``slim-resnet``: conv-bn-relu stem, three residual stages, global average
  pooling; the last stage width is d.
* ``identity``: ``z`` is the flattened input (useful for analytic checks).

Checkpoints use a little-endian binary layout, see :func:`save_checkpoint`.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCHITECTURES = ("small-cnn", "slim-resnet", "identity")


@dataclass(frozen=True)
class ArchConfig:
    name: str = "small-cnn"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    widths: tuple = (8, 16)
    penultimate_dim: int = 128

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}; choose from {ARCHITECTURES}")
        if self.num_classes < 1 or self.penultimate_dim < 1:
            raise ValueError("num_classes and penultimate_dim must be positive")

    def descriptor(self) -> str:
        shape = "x".join(str(n) for n in self.input_shape)
        widths = ",".join(str(n) for n in self.widths)
        return (f"arch={self.name};input={shape};classes={self.num_classes};"
                f"widths={widths};d={self.penultimate_dim}")

    @classmethod
    def from_descriptor(cls, text: str) -> "ArchConfig":
        try:
            fields = dict(item.split("=", 1) for item in text.split(";") if item)
            return cls(
                name=fields["arch"],
                input_shape=tuple(int(n) for n in fields["input"].split("x")),
                num_classes=int(fields["classes"]),
                widths=tuple(int(n) for n in fields["widths"].split(",") if n),
                penultimate_dim=int(fields["d"]),
            )
        except (KeyError, ValueError) as exc:
            raise DescriptorMismatchError(f"unreadable architecture descriptor {text!r}") from exc


# ---------------------------------------------------------------------------
# layers

class Layer:
    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=True):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(_he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def __call__(self, x, training):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.weight = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, training):
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=training, momentum=self.momentum, eps=self.eps)


class ReLU(Layer):
    def __call__(self, x, training):
        return T.relu(x)


class AvgPool2d(Layer):
    def __init__(self, kernel):
        self.kernel = kernel

    def __call__(self, x, training):
        return T.avgpool2d(x, self.kernel)


class GlobalAvgPool(Layer):
    def __call__(self, x, training):
        return T.avgpool2d(x, x.shape[2]) if x.shape[2] == x.shape[3] else _raise_square(x)


def _raise_square(x):
    raise ShapeError(f"global average pooling expects square maps, got {x.shape}")


class Flatten(Layer):
    def __call__(self, x, training):
        return T.flatten(x)


class Dense(Layer):
    def __init__(self, din, dout, rng):
        self.weight = Tensor(_he_normal(rng, (dout, din), din), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, np.float32), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, training):
        return T.linear(x, self.weight, self.bias)


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus shortcut, then relu.

    Downsampling blocks average-pool by 2 after the first conv (and on the
    shortcut) instead of using a strided conv, so every extent stays exact.
    """

    def __init__(self, cin, cout, downsample, rng):
        self.downsample = downsample
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.proj = None
        if downsample or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, bias=False)
            self.proj_bn = BatchNorm2d(cout)

    def _children(self):
        kids = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.proj is not None:
            kids.update(proj=self.proj, proj_bn=self.proj_bn)
        return kids

    def params(self):
        return {f"{k}.{n}": p for k, layer in self._children().items() for n, p in layer.params().items()}

    def buffers(self):
        return {f"{k}.{n}": b for k, layer in self._children().items() for n, b in layer.buffers().items()}

    def __call__(self, x, training):
        h = self.conv1(x, training)
        if self.downsample:
            h = T.avgpool2d(h, 2)
        h = T.relu(self.bn1(h, training))
        h = self.bn2(self.conv2(h, training), training)
        short = x
        if self.downsample:
            short = T.avgpool2d(short, 2)
        if self.proj is not None:
            short = self.proj_bn(self.proj(short, training), training)
        return T.relu(T.add(h, short))


# ---------------------------------------------------------------------------
# classifier

class Classifier:
    """``head(features(x))`` with penultimate access and masked evaluation."""

    def __init__(self, arch: ArchConfig, features: list, head: Dense):
        self.arch = arch
        self.features = features
        self.head = head
        self.training = True

    @property
    def penultimate_dim(self) -> int:
        return self.arch.penultimate_dim

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def train(self) -> "Classifier":
        self.training = True
        return self

    def eval(self) -> "Classifier":
        self.training = False
        return self

    def parameters(self) -> dict:
        named = {}
        for i, layer in enumerate(self.features):
            for n, p in layer.params().items():
                named[f"features.{i}.{n}"] = p
        for n, p in self.head.params().items():
            named[f"head.{n}"] = p
        return named

    def buffers(self) -> dict:
        named = {}
        for i, layer in enumerate(self.features):
            for n, b in layer.buffers().items():
                named[f"features.{i}.{n}"] = b
        return named

    def state(self) -> dict:
        """Every persisted array (parameters and buffers) by stable name."""
        out = {n: p.data for n, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 1 + len(self.arch.input_shape) or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(f"model expects input B x {self.arch.input_shape}, got {x.shape}")

    def penultimate(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        h = x
        for layer in self.features:
            h = layer(h, self.training)
        return h

    def logits_from(self, z: Tensor) -> Tensor:
        return self.head(z, self.training)

    def forward(self, x) -> Tensor:
        return self.logits_from(self.penultimate(x))

    __call__ = forward

    def masked_forward(self, x, keep) -> Tensor:
        """Logits from ``keep * z``; ``keep`` (d or B x d, entries 0/1) is a constant."""
        z = self.penultimate(x)
        keep = np.asarray(keep)
        if keep.shape[-1] != self.penultimate_dim or keep.ndim > 2:
            raise ShapeError(f"mask length must be {self.penultimate_dim}, got shape {keep.shape}")
        if keep.ndim == 2 and keep.shape[0] != z.shape[0]:
            raise ShapeError(f"mask batch {keep.shape[0]} does not match input batch {z.shape[0]}")
        if not np.isin(keep, (0, 1)).all():
            raise ValueError("keep vector entries must be 0 or 1")
        keep = np.broadcast_to(keep, z.shape).astype(z.dtype)
        return self.logits_from(T.mul(z, Tensor(keep, dtype=z.dtype)))

    def predict(self, x) -> np.ndarray:
        """Argmax labels; ties resolve to the lowest class index."""
        with T.no_grad():
            return np.argmax(self.forward(x).data, axis=1)


def build_model(arch: ArchConfig, seed: int = 0) -> Classifier:
    rng = np.random.default_rng(seed)
    c, h, w = arch.input_shape
    d = arch.penultimate_dim
    if arch.name == "small-cnn":
        if h % 4 or w % 4 or len(arch.widths) != 2:
            raise ValueError("small-cnn needs H, W divisible by 4 and two widths")
        w1, w2 = arch.widths
        features = [
            Conv2d(c, w1, 3, rng, padding=1), ReLU(), AvgPool2d(2),
            Conv2d(w1, w2, 3, rng, padding=1), ReLU(), AvgPool2d(2),
            Flatten(), Dense(w2 * (h // 4) * (w // 4), d, rng), ReLU(),
        ]
    elif arch.name == "slim-resnet":
        if len(arch.widths) != 2 or h != w or h % 4:
            raise ValueError("slim-resnet needs two stem/stage widths and square inputs divisible by 4")
        w1, w2 = arch.widths
        features = [
            Conv2d(c, w1, 3, rng, padding=1, bias=False), BatchNorm2d(w1), ReLU(),
            ResidualBlock(w1, w1, False, rng),
            ResidualBlock(w1, w2, True, rng),
            ResidualBlock(w2, d, True, rng),
            GlobalAvgPool(), Flatten(),
        ]
    else:  # identity
        if c * h * w != d:
            raise ValueError("identity architecture needs d equal to the flattened input size")
        features = [Flatten()]
    return Classifier(arch, features, Dense(d, arch.num_classes, rng))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"LMRC" | u32 version | u32 len | descriptor utf-8 | u32 n_records |
#   n_records x (u16 len | name utf-8 | u8 dtype tag | u8 rank | rank x u32 | payload)
#   | u32 crc32 of everything before it

MAGIC = b"LMRC"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(Exception):
    code = "checkpoint"


class CRCError(CheckpointError):
    code = "crc"


class VersionError(CheckpointError):
    code = "version"


class DescriptorMismatchError(CheckpointError):
    code = "descriptor"


def save_checkpoint(model: Classifier, path) -> None:
    desc = model.arch.descriptor().encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(desc)) + desc
    state = model.state()
    out += struct.pack("<I", len(state))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expected: Optional[ArchConfig] = None) -> Classifier:
    """Rebuild a classifier from ``path``.

    Raises :class:`CRCError` for truncated or corrupted files,
    :class:`VersionError` for unknown versions and
    :class:`DescriptorMismatchError` when the stored architecture differs
    from ``expected`` or the records do not match it.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CRCError(f"{path}: file too short ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CRCError(f"{path}: CRC mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    version, dlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arch = ArchConfig.from_descriptor(body[pos:pos + dlen].decode())
    pos += dlen
    if expected is not None and expected.descriptor() != arch.descriptor():
        raise DescriptorMismatchError(
            f"{path}: stored architecture {arch.descriptor()!r} != expected {expected.descriptor()!r}")
    model = build_model(arch)
    targets = model.parameters()
    buffers = model.buffers()
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        tag, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        if name in targets and targets[name].shape == arr.shape:
            targets[name].data = arr
        elif name in buffers and buffers[name].shape == arr.shape:
            buffers[name][...] = arr
        else:
            raise DescriptorMismatchError(f"{path}: record {name} {shape} does not fit the architecture")
        seen.add(name)
    missing = (set(targets) | set(buffers)) - seen
    if missing:
        raise DescriptorMismatchError(f"{path}: missing records {sorted(missing)}")
    return model
