"""Compare every adaptation method against no adaptation on the target stream.

Writes table1.csv (one row per method, mean and per-seed final mIoU) and a bar chart.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from _common import prepare, run
from ttaseg.report import svg_bar_chart, write_csv

METHODS = ("none", "bn-stats", "min-entropy", "max-squares", "selective-ce", "special-ce", "trans-consistency")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/table1")
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    work = Path(args.work)
    paths = prepare(work, args.config)
    cfg = ["--config", args.config] if args.config else []

    rows = []
    variants = [(m, "tf") for m in METHODS] + [("none", "plain"), ("trans-consistency", "plain")]
    for method, ck in variants:
        scores = []
        for s in args.seeds:
            out = work / "adapt" / f"{method}-{ck}-seed{s}"
            run(["adapt", *cfg, "--checkpoint", str(paths[ck]), "--stream", str(paths["stream"]),
                 "--method", method, "--out", str(out), "--seed", str(s)])
            scores.append(json.loads((out / "report.json").read_text())["final_miou"])
        label = method if ck == "tf" else f"{method} (no transformer)"
        rows.append({"method": label, "miou_mean": float(np.mean(scores)),
                     **{f"miou_seed{s}": v for s, v in zip(args.seeds, scores)}})
        print(f"{label:32s} {np.mean(scores):.4f}")
    header = ("method", "miou_mean") + tuple(f"miou_seed{s}" for s in args.seeds)
    write_csv(work / "table1.csv", header, rows)
    (work / "table1.svg").write_text(svg_bar_chart({r["method"]: r["miou_mean"] for r in rows},
                                                   "Final target mIoU by adaptation method"))


if __name__ == "__main__":
    main()
