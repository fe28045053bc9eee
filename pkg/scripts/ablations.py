"""Discrepancy metric, lambda, decoder depth and feature-tap ablations.

The metric sweep adapts the shared transformer checkpoint; lambda, layers and
tap each pretrain one model per grid value, so they take several minutes each.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from _common import prepare, run

KINDS = ("metric", "lambda", "layers", "tap")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/shared")
    ap.add_argument("--config")
    ap.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    args = ap.parse_args()
    work = Path(args.work)
    paths = prepare(work, args.config)
    cfg = ["--config", args.config] if args.config else []
    for kind in args.kinds:
        argv = ["sweep", "--kind", kind, *cfg, "--data", str(paths["data"]), "--out", str(work / f"sweep-{kind}")]
        if kind == "metric":
            argv += ["--checkpoint", str(paths["tf"])]
        run(argv)


if __name__ == "__main__":
    main()
