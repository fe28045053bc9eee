"""Shared setup for the experiment scripts: data and checkpoints are built once per work dir."""

from __future__ import annotations

import json
from pathlib import Path

from ttaseg.cli import main


def run(argv: list[str]) -> None:
    code = main(argv)
    if code != 0:
        raise SystemExit(f"command failed ({code}): {' '.join(argv)}")


def prepare(work: Path, config: str | None = None, seed: int = 0) -> dict[str, Path]:
    """Generate data and pretrain the transformer and single-head models unless already present."""
    work.mkdir(parents=True, exist_ok=True)
    cfg = ["--config", config] if config else []
    data = work / "data"
    if not _complete(data):
        run(["gen-data", *cfg, "--out", str(data), "--seed", str(seed)])
    paths = {"data": data, "stream": data / "target-stream"}
    for name, extra in (("tf", []), ("plain", ["--no-transformer"])):
        out = work / f"ckpt-{name}"
        if not _complete(out):
            run(["pretrain", *cfg, "--data", str(data), "--out", str(out), "--seed", str(seed), *extra])
        paths[name] = out / "checkpoint.bin"
    return paths


def _complete(d: Path) -> bool:
    m = d / "run_manifest.json"
    return m.exists() and json.loads(m.read_text()).get("status") == "complete"
