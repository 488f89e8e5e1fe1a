"""Train every encoding mode on one dataset and write a combined report.

Usage::

    python scripts/compare_modes.py --config configs/desk.yaml --out runs/compare [key=value ...]

Each mode gets its own run directory under ``--out``.  The combined
``records.csv`` and ``summary.txt`` are written at the top level.
"""
import argparse
import logging
from pathlib import Path

from fabarf.config import load_config
from fabarf.encoding import MODES
from fabarf.evaluation import emit_report
from fabarf.experiment import make_dataset, run_training


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs/compare"))
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = make_dataset(load_config(args.config, args.overrides))
    records = []
    for mode in args.modes:
        cfg = load_config(args.config, [*args.overrides, f"train.mode={mode}"])
        records += run_training(cfg, ds, args.out / mode).records
    _, summary = emit_report(records, args.out)
    print(summary.read_text(), end="")


if __name__ == "__main__":
    main()
