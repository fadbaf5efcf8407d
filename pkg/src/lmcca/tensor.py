"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` (operation name,
input tensors, saved intermediates). ``backward`` walks the nodes in
reverse topological order and dispatches to the gradient rule registered
for the operation name in :data:`GRAD_RULES`.

Storage is float32. Inside :func:`check_mode` newly created tensors are
float64 so that finite-difference gradient checks can be tight.

Only scalar-tensor broadcasting is supported; ``linear``, ``conv2d`` and
``batchnorm2d`` take their bias/affine parameters explicitly.
"""
from __future__ import annotations

import collections
import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "ShapeError", "GRAD_RULES", "WARNINGS",
    "tensor", "zeros", "ones", "check_mode", "no_grad", "is_grad_enabled",
    "default_dtype", "backward", "grad", "topological_order",
    "matmul", "linear", "conv2d", "relu", "avgpool2d", "flatten", "reshape",
    "add", "sub", "mul", "mul_scalar", "add_scalar", "abs", "sum", "mean",
    "sign", "softmax", "log", "log_softmax", "batchnorm2d",
]

LOG_CLAMP = 1e-12

# warning name -> count; shared by attacks/masking for non-fatal numerical events
WARNINGS: collections.Counter = collections.Counter()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def check_mode():
    """Create new tensors in float64 (gradient-check shadow mode)."""
    prev = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    # operator sugar; scalar operands only where the op allows it
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), saved)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# gradient rules: rule(node, grad_out, needs) -> list of input grads (or None)

GradRule = Callable[[Node, np.ndarray, Sequence[bool]], list]
GRAD_RULES: dict[str, GradRule] = {}


def rule(name: str):
    def register(fn: GradRule) -> GradRule:
        GRAD_RULES[name] = fn
        return fn
    return register


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b))


@rule("matmul")
def _matmul_grad(node, g, needs):
    a, b = node.inputs
    return [g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None]


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)
    return _make(out, "linear", inputs)


@rule("linear")
def _linear_grad(node, g, needs):
    x, w = node.inputs[0], node.inputs[1]
    grads = [g @ w.data if needs[0] else None, g.T @ x.data if needs[1] else None]
    if len(node.inputs) == 3:
        grads.append(g.sum(axis=0) if needs[2] else None)
    return grads


def _conv_out(size: int, k: int, stride: int, pad: int, op: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"{op}: extent {size} with kernel {k}, stride {stride}, "
                         f"padding {pad} gives a non-integral output size")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]     # B, C, oh, ow, kh, kw
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    b, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh = _conv_out(h, kh, stride, padding, "conv2d")
    ow = _conv_out(w, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = cols @ kernel.data.reshape(o, -1).T
    inputs = (x, kernel)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out = out + bias.data
        inputs = (x, kernel, bias)
    out = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    return _make(np.ascontiguousarray(out), "conv2d", inputs,
                 cols=cols, stride=stride, padding=padding, oh=oh, ow=ow)


@rule("conv2d")
def _conv2d_grad(node, g, needs):
    x, k = node.inputs[0], node.inputs[1]
    s, p, oh, ow = (node.saved[key] for key in ("stride", "padding", "oh", "ow"))
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    grads = [None, None]
    if needs[1]:
        grads[1] = (g2.T @ node.saved["cols"]).reshape(k.shape)
    if needs[0]:
        dcols = (g2 @ k.data.reshape(o, -1)).reshape(b, oh, ow, c, kh, kw)
        dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))  # kh, kw, B, C, oh, ow
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[i, j]
        grads[0] = dxp[:, :, p:p + h, p:p + w] if p else dxp
    if len(node.inputs) == 3:
        grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
    return grads


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0), "relu", (x,))


@rule("relu")
def _relu_grad(node, g, needs):
    # relu'(0) = 0
    return [g * (node.inputs[0].data > 0)]


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b))


@rule("add")
def _add_grad(node, g, needs):
    return [g, g]


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b))


@rule("sub")
def _sub_grad(node, g, needs):
    return [g, -g]


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    _same_shape("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b))


@rule("mul")
def _mul_grad(node, g, needs):
    a, b = node.inputs
    return [g * b.data if needs[0] else None, g * a.data if needs[1] else None]


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, "mul_scalar", (x,), c=c)


@rule("mul_scalar")
def _mul_scalar_grad(node, g, needs):
    return [g * node.saved["c"]]


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.data.dtype.type(c), "add_scalar", (x,))


@rule("add_scalar")
def _add_scalar_grad(node, g, needs):
    return [g]


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    return _make(np.abs(x.data), "abs", (x,))


@rule("abs")
def _abs_grad(node, g, needs):
    return [g * np.sign(node.inputs[0].data)]


def sign(x: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient is zero almost everywhere."""
    return _make(np.sign(x.data), "sign", (x,))


@rule("sign")
def _sign_grad(node, g, needs):
    return [np.zeros_like(g)]


def log(x: Tensor) -> Tensor:
    """Natural log; non-positive inputs are clamped to 1e-12 and counted."""
    data = x.data
    bad = data < LOG_CLAMP
    if bad.any():
        WARNINGS["log_clamp"] += int(bad.sum())
        data = np.maximum(data, data.dtype.type(LOG_CLAMP))
    return _make(np.log(data), "log", (x,), clamped=data)


@rule("log")
def _log_grad(node, g, needs):
    x = node.inputs[0].data
    return [np.where(x < LOG_CLAMP, 0, g / node.saved["clamped"]).astype(g.dtype)]


# ---------------------------------------------------------------------------
# shape and reductions

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([n for n in shape if n != -1]))
        if known == 0 or x.data.size % known:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        shape = tuple(x.data.size // known if n == -1 else n for n in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _make(x.data.reshape(shape), "reshape", (x,))


@rule("reshape")
def _reshape_grad(node, g, needs):
    return [g.reshape(node.inputs[0].shape)]


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    return _make(np.asarray(x.data.sum(axis=axis)), "sum", (x,), axis=axis)


@rule("sum")
def _sum_grad(node, g, needs):
    x = node.inputs[0]
    axis = node.saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).astype(g.dtype, copy=True)]


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul_scalar(sum(x, axis), 1.0 / n)


def _log_softmax_np(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis (shift-invariant)."""
    out = np.exp(_log_softmax_np(x.data))
    return _make(out, "softmax", (x,), out=out)


@rule("softmax")
def _softmax_grad(node, g, needs):
    s = node.saved["out"]
    return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


def log_softmax(x: Tensor) -> Tensor:
    """Stabilised log-softmax over the last axis."""
    out = _log_softmax_np(x.data)
    return _make(out, "log_softmax", (x,), out=out)


@rule("log_softmax")
def _log_softmax_grad(node, g, needs):
    s = np.exp(node.saved["out"])
    return [g - s * g.sum(axis=-1, keepdims=True)]


def avgpool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Average pooling over square windows, no padding."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    oh = _conv_out(h, kernel, stride, 0, "avgpool2d")
    ow = _conv_out(w, kernel, stride, 0, "avgpool2d")
    # fixed summation order over window offsets
    out = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out *= x.dtype.type(1.0 / (kernel * kernel))
    return _make(out, "avgpool2d", (x,),
                 kernel=kernel, stride=stride, oh=oh, ow=ow)


@rule("avgpool2d")
def _avgpool2d_grad(node, g, needs):
    x = node.inputs[0]
    k, s, oh, ow = (node.saved[key] for key in ("kernel", "stride", "oh", "ow"))
    share = g * g.dtype.type(1.0 / (k * k))
    b, c, h, w = x.shape
    if s == k and h == oh * k and w == ow * k:
        gx = np.empty((b, c, oh, k, ow, k), dtype=g.dtype)
        gx[...] = share[:, :, :, None, :, None]
        return [gx.reshape(x.shape)]
    gx = np.zeros(x.shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += share
    return [gx]


def batchnorm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place; in evaluation mode the running buffers are used.
    """
    if x.ndim != 4 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} with affine {weight.shape}/{bias.shape}")
    dt = x.data.dtype.type
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        n = x.data.size // x.shape[1]
        unbiased = var * dt(n / max(n - 1, 1))
        running_mean *= running_mean.dtype.type(1 - momentum)
        running_mean += (dt(momentum) * mu).astype(running_mean.dtype)
        running_var *= running_var.dtype.type(1 - momentum)
        running_var += (dt(momentum) * unbiased).astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]
    return _make(out, "batchnorm2d", (x, weight, bias), xhat=xhat, inv_std=inv_std,
                 training=training)


@rule("batchnorm2d")
def _batchnorm2d_grad(node, g, needs):
    x, w, _ = node.inputs
    xhat, inv_std = node.saved["xhat"], node.saved["inv_std"]
    dxhat = g * w.data[None, :, None, None]
    gx = None
    if needs[0]:
        if node.saved["training"]:
            m = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = (dxhat - m - xhat * mx) * inv_std[None, :, None, None]
        else:
            gx = dxhat * inv_std[None, :, None, None]
    return [gx,
            (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None,
            g.sum(axis=(0, 2, 3)) if needs[2] else None]


# ---------------------------------------------------------------------------
# reverse pass

def topological_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` through recorded nodes, inputs first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _run_backward(loss: Tensor, targets: Optional[set]) -> tuple:
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}, []
    order = topological_order(loss)
    if targets is not None:
        # keep only nodes that lead to a requested tensor
        useful = set()
        for t in order:
            if id(t) in targets or (t.node is not None and any(id(p) in useful for p in t.node.inputs)):
                useful.add(id(t))
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None) if t.node is not None else grads.get(id(t))
        if g is None or t.node is None:
            continue
        inputs = t.node.inputs
        needs = [p.requires_grad and (targets is None or id(p) in useful) for p in inputs]
        if not any(needs):
            continue
        pgrads = GRAD_RULES[t.node.op](t.node, g, needs)
        for p, pg, need in zip(inputs, pgrads, needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads, order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    grads, order = _run_backward(loss, None)
    for t in order:
        if t.node is None and t.requires_grad and id(t) in grads:
            g = grads[id(t)].astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching any ``.grad`` buffer."""
    grads, _ = _run_backward(loss, {id(t) for t in wrt})
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
