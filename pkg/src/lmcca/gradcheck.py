"""Central finite-difference checks for every differentiable tensor op.

Each case builds float64 inputs (``check_mode``), reduces the op output to
a scalar with a fixed random projection, and compares the analytic
gradient of every input against central differences with step ``h``.
Inputs that sit near a subgradient kink (relu, abs) are pushed at least
1e-2 away from zero first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

H = 1e-3
REL_TOL = 1e-3


@dataclass
class Case:
    op: str
    fn: Callable  # (*Tensor) -> Tensor
    inputs: list  # float64 arrays


def _away_from_zero(a: np.ndarray, margin: float) -> np.ndarray:
    a = a.copy()
    near = np.abs(a) < margin
    a[near] = np.where(a[near] >= 0, margin, -margin) + a[near]
    return a


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_case(case: Case, rng: np.random.Generator, h: float = H) -> float:
    """Worst relative error over all inputs of ``case``."""
    with T.check_mode():
        leaves = [T.Tensor(a, requires_grad=True) for a in case.inputs]
        out = case.fn(*leaves)
        proj = rng.standard_normal(out.shape)
        T.backward(T.sum(T.mul(out, T.Tensor(proj))))

        def scalar(vals):
            with T.no_grad():
                return float((case.fn(*[T.Tensor(v) for v in vals]).data * proj).sum())

        worst = 0.0
        for i, leaf in enumerate(leaves):
            numeric = np.zeros_like(case.inputs[i])
            flat = numeric.reshape(-1)
            for j in range(flat.size):
                plus = [a.copy() for a in case.inputs]
                minus = [a.copy() for a in case.inputs]
                plus[i].reshape(-1)[j] += h
                minus[i].reshape(-1)[j] -= h
                flat[j] = (scalar(plus) - scalar(minus)) / (2 * h)
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def _shape(rng, lo=1, hi=4, ndim=2):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _bn(training):
    def fn(x, w, b):
        c = x.shape[1]
        rm = np.zeros(c)
        rv = np.ones(c) * 1.5
        return T.batchnorm2d(x, w, b, rm, rv, training=training)
    return fn


def make_case(op: str, rng: np.random.Generator) -> Case:
    """A random instance of ``op`` with small shapes."""
    n = rng.standard_normal
    if op == "matmul":
        m, k, p = _shape(rng, ndim=3)
        return Case(op, T.matmul, [n((m, k)), n((k, p))])
    if op == "linear":
        b, i, o = _shape(rng, ndim=3)
        return Case(op, T.linear, [n((b, i)), n((o, i)), n(o)])
    if op == "conv2d":
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        k = int(rng.integers(1, 4))
        size = k + stride * int(rng.integers(0, 3)) - 2 * pad
        size = max(size, 1)
        while (size + 2 * pad - k) < 0 or (size + 2 * pad - k) % stride:
            size += 1
        b, c, o = _shape(rng, 1, 2, 3)
        return Case(op, lambda x, w, bias: T.conv2d(x, w, bias, stride=stride, padding=pad),
                    [n((b, c, size, size)), n((o, c, k, k)), n(o)])
    if op == "relu":
        return Case(op, T.relu, [_away_from_zero(n(_shape(rng, ndim=3)), 1e-2)])
    if op == "abs":
        return Case(op, T.abs, [_away_from_zero(n(_shape(rng, ndim=2)), 1e-2)])
    if op == "sign":
        return Case(op, T.sign, [_away_from_zero(n(_shape(rng, ndim=2)), 1e-2)])
    if op == "avgpool2d":
        k = int(rng.integers(1, 3))
        s = int(rng.integers(1, 3))
        oh = int(rng.integers(1, 3))
        size = (oh - 1) * s + k
        return Case(op, lambda x: T.avgpool2d(x, k, s), [n((2, 2, size, size))])
    if op == "flatten":
        return Case(op, T.flatten, [n(_shape(rng, ndim=4))])
    if op == "reshape":
        a, b = _shape(rng, ndim=2)
        return Case(op, lambda x: T.reshape(x, (b, a)), [n((a, b))])
    if op in ("add", "sub", "mul"):
        s = _shape(rng, ndim=3)
        return Case(op, getattr(T, op), [n(s), n(s)])
    if op == "mul_scalar":
        c = float(n())
        return Case(op, lambda x: T.mul_scalar(x, c), [n(_shape(rng))])
    if op == "add_scalar":
        c = float(n())
        return Case(op, lambda x: T.add_scalar(x, c), [n(_shape(rng))])
    if op == "sum":
        s = _shape(rng, ndim=3)
        axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(0, 5))]
        return Case(op, lambda x: T.sum(x, axis), [n(s)])
    if op == "mean":
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return Case(op, lambda x: T.mean(x, axis), [n(_shape(rng))])
    if op == "softmax":
        return Case(op, T.softmax, [n(_shape(rng, 1, 5))])
    if op == "log_softmax":
        return Case(op, T.log_softmax, [n(_shape(rng, 1, 5))])
    if op == "log":
        return Case(op, T.log, [rng.uniform(0.5, 2.0, _shape(rng))])
    if op == "batchnorm2d":
        training = bool(rng.integers(0, 2))
        b = 2 if training else int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        size = int(rng.integers(2, 4))
        x = n((b, c, size, size))
        # batch variance near zero makes central differences ill-conditioned
        while training and x.var(axis=(0, 2, 3)).min() < 0.05:
            x = n((b, c, size, size))
        return Case(op, _bn(training), [x, n(c), n(c)])
    raise KeyError(op)


def two_layer_case(rng: np.random.Generator) -> Case:
    """Random conv -> relu -> pool -> dense -> log_softmax composite."""
    def net(x, k, w, b):
        h = T.relu(T.conv2d(x, k, padding=1))
        h = T.flatten(T.avgpool2d(h, 2))
        return T.log_softmax(T.linear(h, w, b))
    c = int(rng.integers(1, 3))
    o = int(rng.integers(1, 4))
    while True:
        x = rng.uniform(0, 1, (2, c, 4, 4))
        k = rng.standard_normal((o, c, 3, 3))
        pre = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(k, dtype=np.float64), padding=1)
        # keep relu inputs off the kink
        if np.abs(pre.data).min() >= 1e-2:
            break
    return Case("two_layer_net", net,
                [x, k, rng.standard_normal((3, o * 4)), rng.standard_normal(3)])


DIFFERENTIABLE_OPS = (
    "matmul", "linear", "conv2d", "relu", "avgpool2d", "flatten", "reshape",
    "add", "sub", "mul", "mul_scalar", "add_scalar", "abs", "sum", "mean",
    "sign", "softmax", "log", "log_softmax", "batchnorm2d",
)


def run_suite(configs_per_op: int = 100, seed: int = 0) -> dict:
    """Worst relative error per op (plus the composite net) over random cases."""
    rng = np.random.default_rng(seed)
    report = {}
    for op in DIFFERENTIABLE_OPS:
        report[op] = max(check_case(make_case(op, rng), rng) for _ in range(configs_per_op))
    report["two_layer_net"] = max(check_case(two_layer_case(rng), rng)
                                  for _ in range(configs_per_op))
    return report
