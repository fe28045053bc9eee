"""Command-line entry point: gen-data, pretrain, adapt, sweep, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import load_container
from .backbone import ConfigError
from .config import RunConfig, config_from_dict, derive_seed, load_config, write_resolved
from .data import generate_split, load_split, stack_split
from .engine import (METHODS, SGD, AdaptRunReport, TrainingDiverged, adapt_stream, check_heads,
                     default_heads, evaluate, head_config_sweep, pretrain, transformation_count_sweep)
from .losses import METRICS
from .metrics import miou
from .model import SegNet, file_hash, load_checkpoint, save_checkpoint
from .report import emit_overlay, emit_report, svg_bar_chart, svg_line_chart, write_csv

log = logging.getLogger("ttaseg")

SWEEP_KINDS = ("heads", "K", "lambda", "layers", "metric", "tap")


def _mark(out: Path, command: str, status: str, **info) -> None:
    path = out / "run_manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({"command": command, "status": status})
    data.update(info)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _mark(out, "gen-data", "incomplete", seed=cfg.seed)
    d = cfg.data
    for split, dom, n in (("source-train", d.source, d.n_source), ("source-val", d.source, d.n_val),
                          ("target-stream", d.target, d.n_target)):
        generate_split(dom, n, derive_seed(cfg.seed, f"data-{split}"), out / split, tag=split)
        log.info("wrote %d scenes to %s", n, out / split)
    write_resolved(cfg, out)
    _mark(out, "gen-data", "complete")
    return 0


def _train_model(cfg: RunConfig, data_dir: Path, out: Path, resume: Path | None = None) -> tuple[SegNet, dict]:
    images, labels = stack_split(load_split(data_dir / "source-train"))
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    start, opt = 0, None
    if resume is not None:
        model, meta = load_checkpoint(resume)
        start = int(meta.get("step", 0))
        arrays, _ = load_container(resume)
        opt = SGD(model.params.named(), tcfg.momentum)
        for n in opt.velocity:
            if f"opt.{n}" in arrays:
                opt.velocity[n] = arrays[f"opt.{n}"].copy()
    else:
        model = SegNet(cfg.model, seed=derive_seed(cfg.seed, "init"))

    def progress(h):
        if h["step"] % 100 == 0:
            log.info("step %d epoch %d lr %.2e loss %.4f", h["step"], h["epoch"], h["lr"], h["loss"])

    history, opt = pretrain(model, images, labels, tcfg, cfg.loss, cfg.augment, start, opt, progress)
    write_csv(out / "train_log.csv", ("step", "epoch", "lr", "loss"), history)
    total = len(history) + start
    head = "S" if model.transformer is not None else "U"
    val_miou = miou(evaluate(model, load_split(data_dir / "source-val"), head))[1]
    ckpt = out / "checkpoint.bin"
    digest = save_checkpoint(model, ckpt, {"step": total, "train": dataclasses.asdict(tcfg), "val_miou": val_miou},
                             {f"opt.{n}": v for n, v in opt.velocity.items()})
    return model, {"checkpoint_hash": digest, "val_miou": val_miou, "steps": total}


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.no_transformer:
        cfg.model.use_transformer = False
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    _mark(out, "pretrain", "incomplete", seed=cfg.seed)
    try:
        _, info = _train_model(cfg, Path(args.data), out, Path(args.from_) if args.from_ else None)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    _mark(out, "pretrain", "complete", **info)
    print(f"checkpoint {out / 'checkpoint.bin'} val mIoU {info['val_miou']:.4f}")
    return 0


def _adapt_cfg(cfg: RunConfig, args, model: SegNet):
    a = cfg.adapt
    changes = {}
    for key, attr in (("method", "method"), ("K", "K"), ("lr", "lr"), ("metric", "metric")):
        v = getattr(args, attr, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "heads", None):
        changes["head_config"] = args.heads
    elif model.transformer is None:
        changes["head_config"] = default_heads(model)
    changes["seed"] = args.run_seed if getattr(args, "run_seed", None) is not None else a.seed
    return dataclasses.replace(a, **changes)


def cmd_adapt(args) -> int:
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    acfg = _adapt_cfg(cfg, args, model)
    acfg.validate()
    check_heads(model, acfg.head_config)
    stream = load_split(args.stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.adapt = acfg
    write_resolved(cfg, out)
    ckpt_hash = file_hash(args.checkpoint)
    _mark(out, "adapt", "incomplete", seed=acfg.seed, checkpoint_hash=ckpt_hash)
    run_id = f"{acfg.method}-{acfg.head_config}-seed{acfg.seed}"
    rep = adapt_stream(model, stream, acfg, cfg.augment, run_id=run_id, checkpoint_hash=ckpt_hash)
    emit_report(rep, out)
    _mark(out, "adapt", "complete", final_miou=rep.final_miou)
    print(f"{acfg.method} ({acfg.head_config}) final mIoU {rep.final_miou:.4f}")
    return 0


def _sweep_adapt(kind, cfg, args, out):
    model, _ = load_checkpoint(args.checkpoint)
    ckpt_hash = file_hash(args.checkpoint)
    stream = load_split(args.stream)
    base = _adapt_cfg(cfg, args, model)
    seeds = list(cfg.sweep.seeds)
    if kind == "heads":
        cells = {}
        for s in seeds:
            reps = head_config_sweep(model, stream, dataclasses.replace(base, seed=s), cfg.augment, ckpt_hash)
            for hc, r in reps.items():
                cells.setdefault(hc, []).append(r.final_miou)
                emit_report(r, out / f"{hc}-seed{s}")
        rows = [{"head_config": hc, "miou_mean": float(np.mean(v)), **{f"miou_seed{s}": x for s, x in zip(seeds, v)}}
                for hc, v in cells.items()]
        header = ("head_config", "miou_mean") + tuple(f"miou_seed{s}" for s in seeds)
        write_csv(out / "sweep_heads.csv", header, rows)
        (out / "sweep_heads.svg").write_text(
            svg_bar_chart({r["head_config"]: r["miou_mean"] for r in rows}, "mIoU by update/inference head"))
        return rows
    if kind == "K":
        cells = {}
        for s in seeds:
            for r in transformation_count_sweep(model, stream, dataclasses.replace(base, seed=s),
                                                tuple(cfg.sweep.ks), tuple(cfg.sweep.k_methods),
                                                cfg.augment, ckpt_hash):
                cells.setdefault((r["method"], r["K"]), []).append(r["miou"])
        rows = [{"method": m, "K": k, "miou_mean": float(np.mean(v)), **{f"miou_seed{s}": x for s, x in zip(seeds, v)}}
                for (m, k), v in cells.items()]
        header = ("method", "K", "miou_mean") + tuple(f"miou_seed{s}" for s in seeds)
        write_csv(out / "sweep_K_long.csv", header, rows)
        ks = list(cfg.sweep.ks)
        table = [[m] + [float(np.mean(cells[(m, k)])) for k in ks] for m in cfg.sweep.k_methods]
        write_csv(out / "sweep_K.csv", ("method",) + tuple(f"K={k}" for k in ks), table)
        series = {t[0]: t[1:] for t in table}
        (out / "sweep_K.svg").write_text(svg_line_chart(series, "mIoU vs transformations per step", "K",
                                                        "mIoU", xs={m: ks for m in series}))
        return rows
    # metric
    cells = {}
    for metric in cfg.sweep.metrics:
        for s in seeds:
            acfg = dataclasses.replace(base, method="trans-consistency", metric=metric, seed=s)
            rep = adapt_stream(model.copy(), stream, acfg, cfg.augment, run_id=f"metric-{metric}-{s}",
                               checkpoint_hash=ckpt_hash)
            cells.setdefault(metric, []).append(rep.final_miou)
    rows = [{"metric": m, "miou_mean": float(np.mean(v)), **{f"miou_seed{s}": x for s, x in zip(seeds, v)}}
            for m, v in cells.items()]
    header = ("metric", "miou_mean") + tuple(f"miou_seed{s}" for s in seeds)
    write_csv(out / "sweep_metric.csv", header, rows)
    (out / "sweep_metric.svg").write_text(
        svg_bar_chart({r["metric"]: r["miou_mean"] for r in rows}, "mIoU by consistency discrepancy"))
    return rows


def _sweep_pretrain(kind, cfg, args, out):
    data_dir = Path(args.data)
    stream = load_split(Path(args.stream) if args.stream else data_dir / "target-stream")
    values = {"lambda": cfg.sweep.lambdas, "layers": cfg.sweep.layers, "tap": cfg.sweep.taps}[kind]
    rows = []
    for v in values:
        c = config_from_dict(cfg.to_dict())
        if kind == "lambda":
            c.loss.lam = float(v)
        elif kind == "layers":
            c.model.transformer.layers = int(v)
        else:
            c.model.transformer.tap = str(v)
        sub = out / f"{kind}-{v}"
        sub.mkdir(parents=True, exist_ok=True)
        write_resolved(c, sub)
        model, info = _train_model(c, data_dir, sub)
        head = "S" if model.transformer is not None else "U"
        target = miou(evaluate(model, stream, head))[1]
        adapted = [adapt_stream(model.copy(), stream,
                                dataclasses.replace(c.adapt, method="trans-consistency", head_config=f"U{head}",
                                                    seed=s), c.augment).final_miou
                   for s in cfg.sweep.seeds]
        rows.append({kind: v, "adapted_miou": float(np.mean(adapted)), "no_adapt_miou": target,
                     "source_val_miou": info["val_miou"]})
    write_csv(out / f"sweep_{kind}.csv", (kind, "adapted_miou", "no_adapt_miou", "source_val_miou"), rows)
    (out / f"sweep_{kind}.svg").write_text(
        svg_bar_chart({str(r[kind]): r["adapted_miou"] for r in rows}, f"Adapted target mIoU by {kind}"))
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    _mark(out, f"sweep-{args.kind}", "incomplete", seed=cfg.seed)
    if args.kind in ("heads", "K", "metric"):
        if not args.checkpoint:
            raise ConfigError(f"sweep --kind {args.kind} needs --checkpoint")
        if not args.stream:
            if not args.data:
                raise ConfigError("sweep needs --stream or --data")
            args.stream = str(Path(args.data) / "target-stream")
        rows = _sweep_adapt(args.kind, cfg, args, out)
    else:
        if not args.data:
            raise ConfigError(f"sweep --kind {args.kind} needs --data")
        rows = _sweep_pretrain(args.kind, cfg, args, out)
    _mark(out, f"sweep-{args.kind}", "complete", rows=len(rows))
    for r in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_report(args) -> int:
    reports = []
    for run in args.run:
        p = Path(run) / "report.json"
        if not p.exists():
            print(f"error: no report.json in {run}", file=sys.stderr)
            return 2
        rep = AdaptRunReport.from_dict(json.loads(p.read_text()))
        emit_report(rep, run)
        reports.append(rep)
    if len(reports) > 1:
        out = Path(args.out) if args.out else Path(args.run[0]).parent / "overlay"
        emit_overlay(reports, out)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttaseg", description="Transformer-assisted online test-time adaptation "
                                                          "for semantic segmentation on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate source-train, source-val and target-stream splits")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="pretrain on the labelled source split")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-transformer", action="store_true", help="train the single-head baseline")
    t.add_argument("--from", dest="from_", help="resume the schedule from a checkpoint")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt online on a target stream and score every sample")
    a.add_argument("--config")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--stream", required=True)
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--out", required=True)
    a.add_argument("--K", type=int)
    a.add_argument("--heads", choices=("UU", "US", "SU", "SS"))
    a.add_argument("--lr", type=float)
    a.add_argument("--metric", choices=METRICS)
    a.add_argument("--seed", dest="run_seed", type=int, help="adaptation seed (stream order, transforms)")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("sweep", help="run a comparison grid")
    s.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--stream")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--heads", choices=("UU", "US", "SU", "SS"))
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="regenerate CSV/SVG outputs from stored run traces")
    r.add_argument("--run", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TTASEG_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
