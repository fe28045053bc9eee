"""Transformations per step (K in 1, 2, 4, 8) for entropy, max-squares and consistency.

Besides the sweep CSV/SVG this reports the soft trend check: in how many seeds
the consistency row is non-decreasing from K=1 to K=4.
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

from _common import prepare, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/shared")
    ap.add_argument("--config")
    args = ap.parse_args()
    work = Path(args.work)
    paths = prepare(work, args.config)
    cfg = ["--config", args.config] if args.config else []
    out = work / "sweep-K"
    run(["sweep", "--kind", "K", *cfg, "--checkpoint", str(paths["tf"]), "--stream", str(paths["stream"]),
         "--out", str(out)])

    with open(out / "sweep_K_long.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["method"] == "trans-consistency"]
    by_k = {int(r["K"]): r for r in rows}
    seeds = [c for c in rows[0] if c.startswith("miou_seed")]
    ok = 0
    for col in seeds:
        path = [float(by_k[k][col]) for k in (1, 2, 4) if k in by_k]
        ok += all(b >= a for a, b in zip(path, path[1:]))
    verdict = "holds" if ok >= 2 else "does not hold"
    print(f"consistency non-decreasing K=1..4 in {ok}/{len(seeds)} seeds (soft trend {verdict})")


if __name__ == "__main__":
    main()
