"""Update/inference head comparison (UU, US, SU, SS) on the transformer checkpoint."""

from __future__ import annotations

import argparse
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
    run(["sweep", "--kind", "heads", *cfg, "--checkpoint", str(paths["tf"]), "--stream", str(paths["stream"]),
         "--out", str(work / "sweep-heads")])


if __name__ == "__main__":
    main()
