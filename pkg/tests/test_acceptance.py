"""Acceptance criteria, one test each.

Criteria 1-3 run the full selftest suites, 4 and 11 use short runs, and
5-10 share one desk-scale training per method on the mnist-small preset.
Label smoothing follows the reported configurations: none for SAT and the
oracle-LM comparison, 0.1 for LM-CCA and 0.2 for LC-CCA. Every test records
a PASS/FAIL line that the terminal summary prints under "acceptance criteria".
"""
import csv
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lmcca.attacks import cca, compression_per_sample, pgd
from lmcca.cli import EXIT_OK, latent_rows, main
from lmcca.config import build_config
from lmcca.experiment import load_splits, train_run
from lmcca.losses import smooth_targets
from lmcca.model import load_checkpoint
from lmcca.selftest import geometry_suite, gradient_suite, topk_suite
from lmcca.training import METRICS_HEADER, evaluate

DESK_RUNS = {
    "sat": {"method": "sat"},
    "lm_oracle": {"method": "lm_oracle"},
    "lm_cca": {"method": "lm_cca", "gamma": "0.1"},
    "lc_cca": {"method": "lc_cca", "gamma": "0.2"},
}
CPU_BUDGET = 30 * 60


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


# --- 1-3: selftest suites -----------------------------------------------------------

def test_criterion_01_gradient_check():
    failures, seconds = timed(gradient_suite, 100)
    record(1, not failures and seconds < 60,
           f"gradient check, 100 configs per op: {len(failures)} failures in {seconds:.1f}s")


def test_criterion_02_top_k_oracle():
    failures, seconds = timed(topk_suite, 10_000)
    record(2, not failures and seconds < 60,
           f"top-k vs sort oracle: {len(failures)} mismatches in {seconds:.1f}s")


def test_criterion_03_geometry():
    failures, seconds = timed(geometry_suite, 1000)
    record(3, not failures and seconds < 60,
           f"ball membership and idempotence, 1000 instances: {len(failures)} failures in {seconds:.1f}s")


# --- 4: determinism -------------------------------------------------------------------

def test_criterion_04_determinism(tmp_path):
    args = ["--set", "dataset=mnist:1200", "--set", "validation_size=200", "--set", "epochs=2",
            "--set", "train_steps=3", "--set", "lr_step_epochs=1"]
    for run in ("a", "b"):
        assert main(["train", "--out-dir", str(tmp_path / run)] + args) == EXIT_OK
    same_metrics = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    same_ckpt = (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
    record(4, same_metrics and same_ckpt,
           f"two train runs: metrics.csv identical={same_metrics}, last.ckpt identical={same_ckpt}")


# --- 11: label smoothing and schedule ---------------------------------------------------

def test_criterion_11_smoothing_and_schedule(tmp_path):
    rng = np.random.default_rng(0)
    worst = 0.0
    one_hot = True
    for _ in range(1000):
        c = int(rng.integers(2, 101))
        y = int(rng.integers(0, c))
        worst = max(worst, abs(smooth_targets(y, c, float(rng.uniform(0, 0.999))).sum() - 1))
        one_hot &= np.array_equal(smooth_targets(y, c, 0.0), np.eye(c)[y])
    args = ["--set", "dataset=mnist:600", "--set", "validation_size=100", "--set", "epochs=5",
            "--set", "lr_step_epochs=2,4", "--set", "lr=0.04", "--set", "train_steps=1",
            "--set", "eval_steps=1"]
    assert main(["train", "--out-dir", str(tmp_path)] + args) == EXIT_OK
    with open(tmp_path / "metrics.csv", newline="") as fh:
        lrs = [float(r[METRICS_HEADER.index("lr")]) for r in list(csv.reader(fh))[1:]]
    expected = [0.04, 0.04, 0.004, 0.004, 0.0004]
    schedule_ok = np.allclose(lrs, expected, rtol=1e-12, atol=0)
    record(11, worst <= 1e-6 and one_hot and schedule_ok,
           f"max |sum-1| = {worst:.1e}, one-hot at gamma=0: {one_hot}, lr column {lrs}")


# --- desk-scale runs ----------------------------------------------------------------------

class Desk:
    """Trained desk-scale models plus memoized evaluations on the test split."""

    def __init__(self, root):
        self.root = Path(root)
        self.configs = {name: build_config(raw) for name, raw in DESK_RUNS.items()}
        self.cpu_seconds = {}
        self.models = {}
        for method, config in self.configs.items():
            out = self.root / method
            done = out / "best.ckpt"
            stamp = out / "cpu_seconds"
            if not (done.exists() and stamp.exists()
                    and (out / "config.resolved").read_text() == config.resolved_text()):
                start = time.process_time()
                train_run(config, out)
                stamp.write_text(f"{time.process_time() - start:.1f}\n")
            self.cpu_seconds[method] = float(stamp.read_text())
            self.models[method] = load_checkpoint(done)
        _, _, self.test = load_splits(self.configs["sat"])
        self._cache = {}

    def evaluate(self, method, mode, steps=None):
        key = (method, mode, steps)
        if key not in self._cache:
            self._cache[key] = evaluate(self.models[method], self.test, self.configs[method], mode,
                                        steps=steps)
        return self._cache[key]


@pytest.fixture(scope="session")
def desk(acceptance_dir):
    return Desk(acceptance_dir)


def test_criterion_05_oracle_lm_beats_sat(desk):
    sat_clean, sat_robust = desk.evaluate("sat", "pgd")
    lm_clean, lm_robust = desk.evaluate("lm_oracle", "pgd_with_lm_oracle")
    gain = lm_robust - sat_robust
    sat_gap, lm_gap = abs(sat_clean - sat_robust), abs(lm_clean - lm_robust)
    cpu = desk.cpu_seconds["sat"] + desk.cpu_seconds["lm_oracle"]
    record(5, gain >= 10 and lm_gap <= sat_gap / 2 and cpu <= CPU_BUDGET,
           f"SAT {sat_clean:.2f}/{sat_robust:.2f}, oracle-LM {lm_clean:.2f}/{lm_robust:.2f} "
           f"(clean/robust PGD-20): robust gain {gain:+.2f} (need >= 10), "
           f"gap {lm_gap:.2f} vs SAT {sat_gap:.2f} (need <= half), training CPU {cpu / 60:.1f} min")


def test_criterion_06_lm_at_inference_only_hurts_sat(desk):
    _, sat_robust = desk.evaluate("sat", "pgd")
    _, lm_robust = desk.evaluate("sat", "pgd_with_lm_oracle")
    drop = sat_robust - lm_robust
    record(6, drop >= 2,
           f"SAT model robust {sat_robust:.2f} plain vs {lm_robust:.2f} with oracle LM at inference: "
           f"drop {drop:.2f} (need >= 2)")


def test_criterion_07_self_supervised_methods_beat_sat(desk):
    sat_clean, sat_robust = desk.evaluate("sat", "pgd")
    results = {"lm_cca": desk.evaluate("lm_cca", "pgd_with_lm_cca"),
               "lc_cca": desk.evaluate("lc_cca", "pgd_with_lc_cca")}
    ok = all(r - sat_robust >= 3 and sat_clean - c <= 6 for c, r in results.values())
    parts = ", ".join(f"{m} {c:.2f}/{r:.2f} (robust {r - sat_robust:+.2f}, clean {c - sat_clean:+.2f})"
                      for m, (c, r) in results.items())
    record(7, ok, f"SAT {sat_clean:.2f}/{sat_robust:.2f}; {parts}; need robust >= +3, clean >= -6")


def test_criterion_08_pgd20_vs_pgd40(desk):
    pairs = {"sat": "pgd", "lm_oracle": "pgd_with_lm_oracle", "lm_cca": "pgd_with_lm_cca",
             "lc_cca": "pgd_with_lc_cca"}
    diffs = {}
    for name, mode in pairs.items():
        _, r20 = desk.evaluate(name, mode)
        _, r40 = desk.evaluate(name, mode, steps=40)
        diffs[name] = (r20, r40)
    ok = all(abs(a - b) <= 1 for a, b in diffs.values())
    record(8, ok, "PGD-20 vs PGD-40 robust: " +
           ", ".join(f"{m} {a:.2f}/{b:.2f}" for m, (a, b) in diffs.items()) + " (need |diff| <= 1)")


def test_criterion_09_cca_compresses(desk):
    model, config = desk.models["lc_cca"].eval(), desk.configs["lc_cca"]
    x, y = desk.test.images, desk.test.labels
    x_adv = pgd(model, x, y, config.eval_attack, seed=config.seed + 7919,
                sample_ids=np.arange(len(x))).data
    x_hat = cca(model, x_adv, config.cca_attack).data
    frac = float(np.mean(compression_per_sample(model, x_hat) <= compression_per_sample(model, x_adv)))
    record(9, frac >= 0.9,
           f"|z(x_cca)|_1 <= |z(x_adv)|_1 for {100 * frac:.2f}% of {len(x)} PGD-20 inputs (need >= 90%)")


def test_criterion_10_cosine_trend(desk):
    model, config = desk.models["lc_cca"], desk.configs["lc_cca"]
    rows, qualifying = latent_rows(model, desk.test, config, len(desk.test))
    cos = {"adversarial": [], "cca": []}
    for row in rows[:3 * qualifying]:
        if row[1] in cos:
            cos[row[1]].append(float(row[4]))
    adv = float(np.mean(cos["adversarial"])) if qualifying else float("nan")
    hat = float(np.mean(cos["cca"])) if qualifying else float("nan")
    record(10, qualifying > 0 and hat > adv,
           f"over {qualifying} samples fooled by PGD and corrected by CCA: "
           f"mean cosine to clean {hat:.4f} (cca) vs {adv:.4f} (adversarial)")
