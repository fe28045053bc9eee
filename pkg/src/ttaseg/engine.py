"""Source pretraining and sequential online test-time adaptation."""

from __future__ import annotations

import dataclasses
import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, apply_geometric, apply_photometric, sample_geometric, sample_photometric
from .autodiff import Tensor
from .backbone import ConfigError
from .data import Scene
from .losses import (LossConfig, consistency_loss, special_ce, total_pretrain_loss,
                     unsupervised_loss)
from .metrics import ConfusionMatrix, miou
from .model import SegNet

log = logging.getLogger(__name__)

METHODS = ("none", "min-entropy", "max-squares", "trans-consistency", "selective-ce", "special-ce", "bn-stats")
HEAD_CONFIGS = ("UU", "US", "SU", "SS")


class TrainingDiverged(RuntimeError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (master seed, stream name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 4
    lr: float = 1e-2
    power: float = 0.9
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class AdaptConfig:
    method: str = "trans-consistency"
    lr: float = 1e-2
    iterations: int = 1
    momentum: float = 0.0
    update_groups: tuple = ("bn",)
    head_config: str = "US"
    continual: bool = True
    K: int = 1
    # extra transformed views averaged into single-view losses (min-entropy, max-squares, selective-ce)
    extra_views: int = 0
    metric: str = "l2-logits"
    tau: float = 0.8
    # batch-norm statistics for adapted predictions: "eval" (source running stats),
    # "adapt" (current sample) or "stream" (running stats re-estimated on the stream);
    # bn-stats never uses the source running stats
    inference_bn: str = "eval"
    shuffle: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown adaptation method {self.method!r}")
        if self.head_config not in HEAD_CONFIGS:
            raise ConfigError(f"unknown head configuration {self.head_config!r}")
        if self.iterations < 1 or self.K < 1 or self.extra_views < 0:
            raise ConfigError("iterations and K must be >= 1, extra_views >= 0")
        if self.inference_bn not in ("adapt", "eval", "stream"):
            raise ConfigError(f"inference_bn must be 'adapt', 'eval' or 'stream', got {self.inference_bn!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power


class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(t.data) for n, t in params}

    def step(self, lr: float) -> None:
        for n, t in self.params:
            if t.grad is None:
                continue
            g = t.grad.astype(t.data.dtype)
            if self.momentum:
                v = self.velocity[n] = self.momentum * self.velocity[n] + g
                g = v
            t.data = t.data - lr * g

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


# -- pretraining -------------------------------------------------------------

def _pretrain_unsup(model: SegNet, x: Tensor, o_u: Tensor, lcfg: LossConfig, aug: AugmentConfig, rng):
    if lcfg.unsup_kind == "trans-consistency":
        def logits_fn(img):
            return model.forward(img, "adapt", supervised=False).o_u
        return consistency_loss(logits_fn, x, aug, lcfg.metric, rng, lcfg.K, o_ref=o_u)
    if lcfg.unsup_kind == "special-ce":
        spec = sample_photometric(aug.photometric_strength, rng, aug.photometric_kinds)
        return special_ce(o_u, model.forward(apply_photometric(spec, x), "adapt", supervised=False).o_u)
    return None


def pretrain(model: SegNet, images: np.ndarray, labels: np.ndarray, tcfg: TrainConfig,
             lcfg: LossConfig, aug: AugmentConfig | None = None, start_step: int = 0,
             optimizer: SGD | None = None, progress=None) -> tuple[list[dict], SGD]:
    """SGD with momentum and polynomial decay over every parameter on the total loss.

    Returns the per-step history (step, epoch, lr, loss) and the optimizer, whose
    velocity can be stored for resuming from ``start_step``.
    """
    tcfg.validate()
    lcfg.validate()
    aug = aug or AugmentConfig()
    n = len(images)
    steps_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    total = steps_per_epoch * tcfg.epochs
    order_rng = named_rng(tcfg.seed, "data-order")
    opt = optimizer or SGD(model.params.named(), tcfg.momentum)
    history: list[dict] = []
    step = 0
    for epoch in range(tcfg.epochs):
        perm = order_rng.permutation(n)
        for b in range(steps_per_epoch):
            if step < start_step:
                step += 1
                continue
            idx = perm[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            # per-step streams so a resumed run replays exactly
            drop_rng = named_rng(tcfg.seed, f"dropout/{step}")
            tf_rng = named_rng(tcfg.seed, f"transforms/{step}")
            x = Tensor(images[idx])
            out = model.forward(x, "train", dropout_rng=drop_rng, train=True)
            unsup = None
            if lcfg.lam > 0:
                unsup = _pretrain_unsup(model, x, out.o_u, lcfg, aug, tf_rng)
            loss = total_pretrain_loss(out.o_s, labels[idx], out.o_u, lcfg, unsup)
            value = float(loss.data)
            lr = poly_lr(tcfg.lr, step, total, tcfg.power)
            if not np.isfinite(value):
                tail = [round(h["loss"], 5) for h in history[-5:]]
                raise TrainingDiverged(f"non-finite loss {value} at step {step} (lr={lr:.3g}); "
                                       f"recent losses {tail}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            history.append({"step": step, "epoch": epoch, "lr": lr, "loss": value})
            if progress is not None:
                progress(history[-1])
            step += 1
    return history, opt


# -- online adaptation -------------------------------------------------------

@dataclass
class AdaptRunReport:
    run_id: str
    method: str
    seed: int
    head_config: str
    trace: list[float]
    losses: list[float | None]
    per_class_iou: list[float | None]
    final_miou: float
    confusion: list[list[int]]
    order: list[int]
    config: dict
    checkpoint_hash: str = ""
    wall_clock: float = 0.0
    events: list[str] = field(default_factory=list)
    transfer_matrix: list[list[float]] | None = None
    previews: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptRunReport":
        return cls(**d)


def _adapt_loss(model: SegNet, x: Tensor, cfg: AdaptConfig, aug: AugmentConfig, rng) -> Tensor:
    head = cfg.head_config[0]

    def logits_fn(img):
        return model.logits(img, head, "adapt")

    if cfg.method == "trans-consistency":
        return consistency_loss(logits_fn, x, aug, cfg.metric, rng, cfg.K)
    if cfg.method == "special-ce":
        spec = sample_photometric(aug.photometric_strength, rng, aug.photometric_kinds)
        return special_ce(logits_fn(x), logits_fn(apply_photometric(spec, x)))
    loss = unsupervised_loss(cfg.method, logits_fn(x), cfg.tau)
    for _ in range(cfg.extra_views):
        p = sample_photometric(aug.photometric_strength, rng, aug.photometric_kinds)
        g = sample_geometric(aug, rng, x.shape[-2:])
        view = apply_geometric(g, apply_photometric(p, x))
        loss = loss + unsupervised_loss(cfg.method, logits_fn(view), cfg.tau)
    return loss * (1.0 / (1 + cfg.extra_views))


def check_heads(model: SegNet, head_config: str) -> None:
    if model.transformer is None and head_config != "UU":
        raise ConfigError(f"head configuration {head_config} needs a transformer; "
                          "a single-head model only supports UU")


def default_heads(model: SegNet) -> str:
    return "US" if model.transformer is not None else "UU"


def _inference_bn(cfg: AdaptConfig) -> str:
    if cfg.method == "none":
        return "eval"
    if cfg.inference_bn == "stream":
        return "eval"
    if cfg.method == "bn-stats":
        return "adapt"
    return cfg.inference_bn


def adapt_stream(model: SegNet, stream: list[Scene], cfg: AdaptConfig, aug: AugmentConfig | None = None,
                 run_id: str = "run", checkpoint_hash: str = "", probe=None, preview_count: int = 2
                 ) -> AdaptRunReport:
    """Adapt ``model`` in place on ``stream``, one sample at a time, scoring each prediction.

    Per sample: one loss on the update head, one SGD step on the update groups,
    then prediction with the inference head. ``probe(i, model)`` is called
    before each sample is processed.
    """
    cfg.validate()
    check_heads(model, cfg.head_config)
    aug = aug or AugmentConfig()
    aug.validate()
    t0 = time.perf_counter()
    tf_rng = named_rng(cfg.seed, "transforms")
    order = list(range(len(stream)))
    if cfg.shuffle:
        order = named_rng(cfg.seed, "stream-order").permutation(len(stream)).tolist()
    updates = model.params.named(cfg.update_groups)
    update_names = {n for n, _ in updates}
    saved_flags = {n: t.requires_grad for n, t in model.params.tensors.items()}
    for n, t in model.params.tensors.items():
        t.requires_grad = n in update_names
    initial = model.params.snapshot() if not cfg.continual else None
    opt = SGD(updates, cfg.momentum)
    infer_head = cfg.head_config[1]
    cm = ConfusionMatrix(model.num_classes)
    trace, losses, events = [], [], []
    previews = {}
    w_su = None
    try:
        for step, i in enumerate(order):
            if probe is not None:
                probe(step, model)
            scene = stream[i]
            if scene.image.shape != (3,) + scene.labels.shape:
                raise ad.DimensionError(f"stream sample {i} has image {scene.image.shape} "
                                        f"and labels {scene.labels.shape}")
            x = Tensor(scene.image[None])
            loss_value = None
            if cfg.inference_bn == "stream" and cfg.method != "none":
                # fold this sample into the running statistics before updating
                with ad.no_grad():
                    model.forward(x, "train", supervised=False)
            if cfg.method not in ("none", "bn-stats"):
                for _ in range(cfg.iterations):
                    loss = _adapt_loss(model, x, cfg, aug, tf_rng)
                    loss_value = float(loss.data)
                    if not np.isfinite(loss_value):
                        events.append(f"sample {i}: non-finite loss {loss_value}, update skipped")
                        log.warning(events[-1])
                        break
                    opt.zero_grad()
                    loss.backward()
                    opt.step(cfg.lr)
            bn_mode = _inference_bn(cfg)
            with ad.no_grad():
                out = model.forward(x, bn_mode, supervised=(infer_head == "S"))
            logits = out.o_s if infer_head == "S" else out.o_u
            pred = logits.data.argmax(axis=1)[0]
            if out.w_su is not None:
                w_su = out.w_su.data[0]
            cm.accumulate(pred, scene.labels)
            trace.append(miou(cm)[1])
            losses.append(loss_value)
            if step < preview_count:
                previews[str(i)] = {"pred": pred.tolist(), "gt": scene.labels.tolist()}
            if initial is not None:
                for n, t in model.params.tensors.items():
                    t.data = initial[n].copy()
    finally:
        for n, t in model.params.tensors.items():
            t.requires_grad = saved_flags[n]
            t.grad = None
    per_class, final = miou(cm)
    return AdaptRunReport(
        run_id=run_id, method=cfg.method, seed=cfg.seed, head_config=cfg.head_config,
        trace=trace, losses=losses, per_class_iou=per_class, final_miou=final,
        confusion=cm.counts.tolist(), order=order, config=dataclasses.asdict(cfg),
        checkpoint_hash=checkpoint_hash, wall_clock=time.perf_counter() - t0, events=events,
        transfer_matrix=None if w_su is None else w_su.tolist(), previews=previews)


def evaluate(model: SegNet, scenes: list[Scene], head: str = "S", bn_mode: str = "eval",
             batch: int = 16) -> ConfusionMatrix:
    """Plain evaluation without any adaptation."""
    cm = ConfusionMatrix(model.num_classes)
    for s in range(0, len(scenes), batch):
        chunk = scenes[s:s + batch]
        x = Tensor(np.stack([c.image for c in chunk]))
        pred = model.predict(x, head, bn_mode)
        for p, c in zip(pred, chunk):
            cm.accumulate(p, c.labels)
    return cm


# -- sweeps ------------------------------------------------------------------

def head_config_sweep(model: SegNet, stream: list[Scene], base: AdaptConfig,
                      aug: AugmentConfig | None = None, checkpoint_hash: str = ""
                      ) -> dict[str, AdaptRunReport]:
    if model.transformer is None:
        raise ConfigError("head configuration sweep needs a transformer-equipped checkpoint")
    reports = {}
    for hc in HEAD_CONFIGS:
        cfg = dataclasses.replace(base, head_config=hc)
        reports[hc] = adapt_stream(model.copy(), stream, cfg, aug, run_id=f"heads-{hc}",
                                   checkpoint_hash=checkpoint_hash)
    return reports


def transformation_count_sweep(model: SegNet, stream: list[Scene], base: AdaptConfig,
                               ks=(1, 2, 4, 8), methods=("min-entropy", "max-squares", "trans-consistency"),
                               aug: AugmentConfig | None = None, checkpoint_hash: str = ""
                               ) -> list[dict]:
    """mIoU per (method, K). Consistency uses K transforms per family; single-view
    losses average the original with K transformed views."""
    rows = []
    for method in methods:
        if method not in ("min-entropy", "max-squares", "trans-consistency"):
            raise ConfigError(f"transformation-count sweep does not support {method!r}")
        for k in ks:
            if method == "trans-consistency":
                cfg = dataclasses.replace(base, method=method, K=k, extra_views=0)
            else:
                cfg = dataclasses.replace(base, method=method, K=1, extra_views=k)
            rep = adapt_stream(model.copy(), stream, cfg, aug, run_id=f"K-{method}-{k}",
                               checkpoint_hash=checkpoint_hash)
            rows.append({"method": method, "K": k, "seed": base.seed, "miou": rep.final_miou})
    return rows
