"""Train (or reuse) the desk-scale runs and tabulate every evaluation mode.

    python scripts/desk_report.py --runs runs/desk --out runs/desk/report.csv

Each run directory is reused when its config.resolved matches, so rerunning
after an interrupted session only trains what is missing.
"""
import argparse
import csv
import logging
from pathlib import Path

from lmcca.config import build_config
from lmcca.experiment import load_test, train_run
from lmcca.model import load_checkpoint
from lmcca.training import EVAL_MODES, evaluate

RUNS = {
    "sat": {"method": "sat"},
    "lm_oracle": {"method": "lm_oracle"},
    "lm_cca": {"method": "lm_cca", "gamma": "0.1"},
    "lc_cca": {"method": "lc_cca", "gamma": "0.2"},
}


def ensure_trained(config, out: Path):
    fresh = (out / "best.ckpt").exists() and \
        (out / "config.resolved").read_text() == config.resolved_text()
    if not fresh:
        train_run(config, out)
    return load_checkpoint(out / "best.ckpt")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", default="runs/desk")
    parser.add_argument("--out", default=None)
    parser.add_argument("--max-samples", type=int, default=None)
    parser.add_argument("--steps", default="20,40", help="PGD steps to report, comma list")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.runs)
    out = Path(args.out) if args.out else root / "report.csv"
    steps = [int(s) for s in args.steps.split(",")]
    rows = [["run", "mode", "eval_steps", "clean_acc", "robust_acc"]]
    for name, raw in RUNS.items():
        config = build_config(raw)
        model = ensure_trained(config, root / name)
        test = load_test(config)
        if args.max_samples:
            test = test.subset(slice(0, args.max_samples))
        clean, _ = evaluate(model, test, config, "clean")
        rows.append([name, "clean", "", f"{clean:.2f}", ""])
        for mode in EVAL_MODES[1:]:
            for n in steps:
                c, r = evaluate(model, test, config, mode, steps=n)
                rows.append([name, mode, str(n), f"{c:.2f}", f"{r:.2f}"])
                logging.info("%s %s PGD-%d clean %.2f robust %.2f", name, mode, n, c, r)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    print(out)


if __name__ == "__main__":
    main()
