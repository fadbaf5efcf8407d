"""Self-contained correctness suites (no dataset needed).

Each suite returns a list of failure strings ``"<module>/<op>: detail"``;
an empty list means it passed.
"""
from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from . import tensor as T
from .attacks import AttackSpec, Ball, cca, pgd, project
from .masking import top_k_mask
from .model import ArchConfig, CRCError, build_model, load_checkpoint, save_checkpoint


def gradient_suite(configs_per_op: int = 100, seed: int = 0) -> list:
    report = gradcheck.run_suite(configs_per_op, seed)
    return [f"tensor-core/{op}: relative error {err:.3g} >= {gradcheck.REL_TOL}"
            for op, err in report.items() if not err < gradcheck.REL_TOL]


def brute_force_top_k(u: np.ndarray, k: int) -> np.ndarray:
    """Reference selection: sort (value desc, index asc) and take the first k."""
    ranked = sorted(range(len(u)), key=lambda i: (-u[i], i))
    bits = np.zeros(len(u), dtype=np.uint8)
    bits[ranked[:k]] = 1
    return bits


def topk_suite(n_random: int = 10_000, seed: int = 0, grid=(0.0, 0.5, 1.0)) -> list:
    """Exhaustive over quantized grids for d <= 8, plus random vectors."""
    failures = []
    for d in range(1, 9):
        vecs = np.array(list(itertools.product(grid, repeat=d)))
        for k in range(d + 1):
            got = top_k_mask(vecs, k).bits
            want = np.stack([brute_force_top_k(v, k) for v in vecs]) if d <= 4 else None
            if want is None:
                # vectorised reference for larger d: rank by (-value, index)
                idx = np.lexsort((np.broadcast_to(np.arange(d), vecs.shape), -vecs), axis=1)[:, :k]
                want = np.zeros_like(got)
                np.put_along_axis(want, idx, 1, axis=1)
            bad = np.flatnonzero((got != want).any(axis=1))
            if bad.size:
                failures.append(f"masking/top_k_mask: d={d} k={k} mismatch on {vecs[bad[0]].tolist()}")
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        d = int(rng.integers(1, 9))
        u = rng.integers(0, 4, size=d).astype(float) if rng.random() < 0.5 else rng.standard_normal(d)
        k = int(rng.integers(0, d + 1))
        if not np.array_equal(top_k_mask(u, k).bits, brute_force_top_k(u, k)):
            failures.append(f"masking/top_k_mask: random mismatch u={u.tolist()} k={k}")
            break
    return failures


def _ulp_ok(x, center, radius, lo, hi):
    x64, c64 = x.astype(np.float64), center.astype(np.float64)
    # the ball faces are computed in float32, so allow one ulp at their magnitude
    ulp = np.spacing((np.abs(center) + np.float32(radius)).astype(np.float32)).astype(np.float64)
    in_ball = np.abs(x64 - c64) <= radius + ulp
    in_range = (x >= lo) & (x <= hi)
    return bool(in_ball.all() and in_range.all())


def _tiny_model(rng):
    if rng.random() < 0.5:
        n = int(rng.integers(2, 7))
        return build_model(ArchConfig("identity", (1, 1, n), 3, (), n), int(rng.integers(1 << 30)))
    return build_model(ArchConfig("small-cnn", (1, 8, 8), 3, (2, 2), 4), int(rng.integers(1 << 30)))


def geometry_suite(n_instances: int = 1000, seed: int = 0) -> list:
    """Every PGD/CCA iterate stays in the ball and the range; projection is idempotent."""
    rng = np.random.default_rng(seed)
    failures = []
    for inst in range(n_instances):
        model = _tiny_model(rng)
        shape = (int(rng.integers(1, 4)),) + model.arch.input_shape
        x = rng.uniform(0, 1, shape).astype(np.float32)
        spec = AttackSpec(epsilon=float(rng.uniform(0, 0.3)), alpha=float(rng.uniform(0.005, 0.2)),
                          steps=int(rng.integers(1, 6)), random_start=bool(rng.integers(0, 2)),
                          margin=float(rng.uniform(0, 0.05)))
        kind = ("pgd", "cca", "cca_oracle")[inst % 3]
        if kind == "cca_oracle":
            x_obs = project(x + rng.uniform(-spec.epsilon, spec.epsilon, shape).astype(np.float32),
                            Ball(x, spec.epsilon)).data
            center, radius = x, spec.epsilon + spec.margin
        else:
            x_obs, center, radius = x, x, spec.epsilon
        ball = Ball(center, radius)

        def check(t, xt, kind=kind, ball=ball, radius=radius, center=center):
            if not _ulp_ok(xt, center, radius, spec.clamp_lo, spec.clamp_hi):
                failures.append(f"attacks/{kind}: iterate {t} leaves the ball (instance {inst})")
            if not np.array_equal(project(xt, ball).data, xt):
                failures.append(f"attacks/project: not idempotent at {kind} iterate {t} (instance {inst})")

        if kind == "pgd":
            pgd(model, x, rng.integers(0, 3, shape[0]), spec, seed=inst, callback=check)
        elif kind == "cca":
            cca(model, x_obs, spec, callback=check)
        else:
            cca(model, x_obs, spec, center="oracle", x_clean=x, callback=check)
        wild = rng.uniform(-1, 2, shape).astype(np.float32)
        once = project(wild, Ball(x, spec.epsilon)).data
        if not np.array_equal(project(once, Ball(x, spec.epsilon)).data, once):
            failures.append(f"attacks/project: not idempotent (instance {inst})")
        if len(failures) > 20:
            break
    return failures


def serialization_suite(seed: int = 0) -> list:
    failures = []
    archs = [ArchConfig("small-cnn", (1, 8, 8), 10, (2, 3), 16),
             ArchConfig("slim-resnet", (3, 8, 8), 10, (4, 6), 8),
             ArchConfig("identity", (1, 2, 2), 3, (), 4)]
    with tempfile.TemporaryDirectory() as tmp:
        for i, arch in enumerate(archs):
            model = build_model(arch, seed + i)
            path = Path(tmp) / f"m{i}.ckpt"
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
            a, b = model.state(), loaded.state()
            if a.keys() != b.keys() or any(a[n].tobytes() != b[n].tobytes() for n in a):
                failures.append(f"model/save_checkpoint: {arch.name} round trip not bit-exact")
            blob = bytearray(path.read_bytes())
            blob[len(blob) // 2] ^= 0x01
            path.write_bytes(bytes(blob))
            try:
                load_checkpoint(path)
                failures.append(f"model/load_checkpoint: {arch.name} corrupted byte not detected")
            except CRCError:
                pass
    return failures


SUITES = {
    "gradients": gradient_suite,
    "top_k": topk_suite,
    "geometry": geometry_suite,
    "serialization": serialization_suite,
}


def run_selftest(quick: bool = False, echo=print) -> list:
    """Run every suite, echo one line per suite, return all failures."""
    sizes = {"gradients": dict(configs_per_op=20 if quick else 100),
             "top_k": dict(n_random=1000 if quick else 10_000),
             "geometry": dict(n_instances=100 if quick else 1000),
             "serialization": {}}
    failures = []
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        found = suite(**sizes[name])
        status = "PASS" if not found else f"FAIL ({len(found)})"
        echo(f"{name:14s} {status:10s} {time.perf_counter() - t0:6.1f}s")
        for f in found:
            echo(f"  {f}")
        failures.extend(found)
    T.WARNINGS.clear()
    return failures
