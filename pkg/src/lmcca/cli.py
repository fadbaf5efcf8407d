"""``lmcca`` command line: train, evaluate, diagnose-latents, selftest.

Exit codes: 0 success, 2 configuration error, 3 artifact error
(missing data, unreadable or mismatched checkpoint), 4 self-test failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import cca, pgd
from .config import (SWEEP_KEYS, ConfigError, RunConfig, build_config, expand_sweep, parse_value,
                     read_config_text)
from .data import DataFormatError
from .experiment import DEFAULT_DATA_DIR, load_test, train_run
from .masking import cosine_similarity
from .model import CheckpointError, load_checkpoint
from .training import EVAL_MODES, evaluate

log = logging.getLogger("lmcca")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_SELFTEST = 0, 2, 3, 4
REPORT_HEADER = ("mode", "eval_steps", "samples", "clean_acc", "robust_acc")


class ArtifactError(RuntimeError):
    pass


def raw_config(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ArtifactError(f"cannot read config {args.config}: {exc}") from None
        raw = read_config_text(text)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "--set expects key=value")
        key = key.strip()
        for part in value.split(",") if key in SWEEP_KEYS else [value]:
            parse_value(key, part)  # rejects unknown keys early
        raw[key] = value.strip()
    return raw


def single_config(args) -> RunConfig:
    raw = raw_config(args)
    runs = expand_sweep(raw)
    if len(runs) > 1:
        raise ConfigError(next(k for k in raw if "," in raw[k]), "sweeps are only valid for 'train'")
    return build_config(raw)


def _load(path, config: RunConfig):
    try:
        return load_checkpoint(path, expected=config.arch)
    except (CheckpointError, OSError) as exc:
        raise ArtifactError(f"{path}: {exc}") from None


def _test_split(config: RunConfig, data_dir, limit):
    try:
        data = load_test(config, data_dir)
    except (OSError, DataFormatError) as exc:
        raise ArtifactError(f"test data for {config.dataset!r}: {exc}") from None
    return data if limit is None else data.subset(slice(0, limit))


def cmd_train(args) -> int:
    raw = raw_config(args)
    runs = [(suffix, build_config(sub)) for suffix, sub in expand_sweep(raw)]
    for suffix, config in runs:
        out = Path(args.out_dir or config.out_dir)
        if suffix:
            out = out / suffix
        log.info("training %s -> %s", config.method, out)
        try:
            train_run(config, out, args.data_dir, record_wall_time=args.wall_time)
        except (OSError, DataFormatError) as exc:
            raise ArtifactError(f"dataset {config.dataset!r}: {exc}") from None
    return EXIT_OK


def _fmt(v):
    return "" if v is None else f"{v:.2f}"


def cmd_evaluate(args) -> int:
    config = single_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in EVAL_MODES:
            raise ConfigError("modes", f"unknown mode {m!r}; choose from {EVAL_MODES}")
    steps = args.eval_steps if args.eval_steps is not None else config.eval_steps
    model = _load(args.checkpoint, config)
    data = _test_split(config, args.data_dir, args.max_samples)
    rows = []
    for mode in modes:
        clean, robust = evaluate(model, data, config, mode, steps=steps)
        rows.append((mode, "" if mode == "clean" else str(steps), str(len(data)), _fmt(clean), _fmt(robust)))
        log.info("%s: clean %s robust %s", mode, _fmt(clean), _fmt(robust) or "-")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(rows)
    return EXIT_OK


def latent_rows(model, data, config: RunConfig, sample_count: int, batch_size: int = 250):
    """LatentDump rows (without header) and the number of qualifying samples.

    Qualifying samples are fooled by PGD and classified correctly after CCA;
    they are taken first in test order, then the remaining slots are filled
    with the earliest non-qualifying samples.
    """
    model.eval()
    spec = config.eval_attack
    zs = {"clean": [], "adversarial": [], "cca": []}
    preds = {"clean": [], "adversarial": [], "cca": []}
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, y = data.images[idx], data.labels[idx]
        x_adv = pgd(model, x, y, spec, seed=config.seed + 7919, sample_ids=idx).data
        x_hat = cca(model, x_adv, config.cca_attack).data
        with T.no_grad():
            for name, inp in (("clean", x), ("adversarial", x_adv), ("cca", x_hat)):
                z = model.penultimate(inp)
                zs[name].append(z.data)
                preds[name].append(np.argmax(model.logits_from(z).data, axis=1))
        hits = (np.concatenate(preds["adversarial"]) != data.labels[:idx[-1] + 1]) & \
               (np.concatenate(preds["cca"]) == data.labels[:idx[-1] + 1])
        if hits.sum() >= sample_count:
            break
    z = {k: np.concatenate(v) for k, v in zs.items()}
    p = {k: np.concatenate(v) for k, v in preds.items()}
    n = len(p["clean"])
    labels = data.labels[:n]
    qualifying = (p["adversarial"] != labels) & (p["cca"] == labels)
    order = list(np.flatnonzero(qualifying)) + list(np.flatnonzero(~qualifying))
    chosen = order[:sample_count]
    rows = []
    for i in chosen:
        for variant in ("clean", "adversarial", "cca"):
            cos = 1.0 if variant == "clean" else cosine_similarity(z["clean"][i], z[variant][i])
            rows.append([str(int(i)), variant, str(int(p[variant][i])), str(int(labels[i])),
                         repr(float(cos))] + [format(float(v), ".9g") for v in z[variant][i]])
    return rows, int(qualifying[chosen].sum()) if chosen else 0


def cmd_diagnose_latents(args) -> int:
    config = single_config(args)
    model = _load(args.checkpoint, config)
    data = _test_split(config, args.data_dir, args.max_samples)
    rows, qualifying = latent_rows(model, data, config, args.samples)
    if qualifying < args.samples:
        log.warning("only %d of %d samples qualify (fooled by PGD, corrected by CCA); "
                    "filled with the first remaining samples", qualifying, args.samples)
    d = config.arch.penultimate_dim
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "variant", "predicted_label", "true_label", "cosine_to_clean"]
                   + [f"z_{j}" for j in range(d)])
        w.writerows(rows)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    failures = run_selftest(quick=args.quick)
    if failures:
        print(f"selftest FAILED: {len(failures)} failure(s)")
        return EXIT_SELFTEST
    print("selftest passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmcca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-dir", default=DEFAULT_DATA_DIR)

    p = sub.add_parser("train", help="train one run, or a sweep into subdirectories")
    common(p)
    p.add_argument("--out-dir", help="overrides the out_dir key")
    p.add_argument("--wall-time", action="store_true", help="record real elapsed time in metrics.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy report for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modes", default="clean,pgd", help=f"comma list from {', '.join(EVAL_MODES)}")
    p.add_argument("--eval-steps", type=int)
    p.add_argument("--max-samples", type=int, help="evaluate only the first N test samples")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose-latents", help="dump penultimate activations for clean/PGD/CCA inputs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--max-samples", type=int, help="search only the first N test samples")
    p.add_argument("--out", default="latents.csv")
    p.set_defaults(func=cmd_diagnose_latents)

    p = sub.add_parser("selftest", help="gradient, top-k, geometry and serialization checks")
    p.add_argument("--quick", action="store_true", help="smaller random suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
