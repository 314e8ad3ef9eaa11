"""Watermark success rate as the watermarking rate or the trigger blend value varies.

Writes one CSV per swept parameter and prints a small table.

Usage:
    python3 scripts/run_ablation.py --out-dir results/
    python3 scripts/run_ablation.py --param gamma --values 0.005,0.01,0.02,0.05,0.1,0.2
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

from datamark.config import load_run_config, parse_run_config
from datamark.experiments import ABLATION_PARAMS, ablate, load_splits

DEFAULT_VALUES = {
    "gamma": [0.01, 0.02, 0.05, 0.10],
    "blend_value": [0.1, 0.2, 0.5, 1.0],
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--param", choices=ABLATION_PARAMS, help="sweep just this parameter")
    ap.add_argument("--values", help="comma-separated values for --param")
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")

    cfg = load_run_config(args.config) if args.config else parse_run_config({"label_base": 0})
    sweeps = dict(DEFAULT_VALUES)
    if args.param:
        sweeps = {args.param: [float(v) for v in args.values.split(",")] if args.values else DEFAULT_VALUES[args.param]}
    splits = load_splits(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for param, values in sweeps.items():
        rows = ablate(cfg, param, values, *splits)
        path = out_dir / f"ablation_{param}.csv"
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=[param, "modified", "ba", "wsr"])
            w.writeheader()
            w.writerows(rows)
        print(f"{param:>12} {'modified':>8} {'BA':>7} {'WSR':>7}")
        for r in rows:
            print(f"{r[param]:>12g} {r['modified']:>8d} {r['ba']:>7.4f} {r['wsr']:>7.4f}")
        print(f"-> {path}\n")


if __name__ == "__main__":
    main()
