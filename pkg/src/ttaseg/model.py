"""Backbone + optional transformer head as one model with checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import SegBackbone, select_tap
from .params import ParamRegistry
from .transformer import TransformerConfig, TransformerHead, supervised_logits


@dataclass
class ModelConfig:
    num_classes: int = 5
    channels: tuple = (16, 32, 32, 32)
    use_transformer: bool = True
    # keep the transformer parameters but use an identity transfer matrix
    force_identity: bool = False
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def blocks(self):
        ins = (3,) + tuple(self.channels[:-1])
        strides = (1, 2, 2, 1)
        return tuple(zip(ins, self.channels, strides))


@dataclass
class Outputs:
    o_u: Tensor
    o_s: Tensor
    w_su: Tensor | None
    taps: dict


class SegNet:
    """Segmentation network producing unsupervised logits and, via a transfer matrix, supervised logits.

    Without a transformer the two heads coincide (identity transfer matrix).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParamRegistry()
        self.backbone = SegBackbone(self.params, cfg.num_classes, rng, cfg.blocks())
        self.transformer = None
        if cfg.use_transformer:
            tcfg = cfg.transformer
            self.transformer = TransformerHead(self.params, cfg.num_classes,
                                               self.backbone.tap_channels(tcfg.tap), tcfg, rng)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def forward(self, x: Tensor, bn_mode: str = "eval", supervised: bool = True,
                dropout_rng=None, train: bool = False) -> Outputs:
        o_u, taps = self.backbone.forward(x, bn_mode)
        if self.transformer is None or not supervised or self.cfg.force_identity:
            return Outputs(o_u, o_u, None, taps)
        w_su = self.transformer.transfer_matrix(select_tap(taps, self.cfg.transformer.tap), dropout_rng, train)
        return Outputs(o_u, supervised_logits(o_u, w_su), w_su, taps)

    def logits(self, x: Tensor, head: str, bn_mode: str) -> Tensor:
        """Logits of the ``U`` (unsupervised) or ``S`` (supervised) head."""
        out = self.forward(x, bn_mode, supervised=(head == "S"))
        return out.o_u if head == "U" else out.o_s

    def predict(self, x: Tensor, head: str = "S", bn_mode: str = "eval") -> np.ndarray:
        with ad.no_grad():
            return self.logits(x, head, bn_mode).data.argmax(axis=1)

    # -- state -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {n: t.data for n, t in self.params.tensors.items()}
        for name, st in self.backbone.stats.items():
            arrays[f"{name}.running_mean"] = st.mean
            arrays[f"{name}.running_var"] = st.var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], stats_initialized: bool = True) -> None:
        for n, t in self.params.tensors.items():
            if arrays[n].shape != t.shape:
                raise ValueError(f"checkpoint shape mismatch for {n}: {arrays[n].shape} vs {t.shape}")
            t.data = np.array(arrays[n], dtype=np.float32)
        for name, st in self.backbone.stats.items():
            st.mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float32)
            st.var = np.array(arrays[f"{name}.running_var"], dtype=np.float32)
            st.initialized = stats_initialized

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        return h.hexdigest()

    def copy(self) -> "SegNet":
        other = SegNet(self.cfg)
        other.load_state_arrays(self.state_arrays(),
                                all(s.initialized for s in self.backbone.stats.values()))
        return other


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["channels"] = list(cfg.channels)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    t = TransformerConfig(**d.pop("transformer", {}))
    if "channels" in d:
        d["channels"] = tuple(d["channels"])
    return ModelConfig(transformer=t, **d)


def save_checkpoint(model: SegNet, path, extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> str:
    """Write weights, running statistics and config; returns the file's sha256."""
    meta = {"model": model_config_to_dict(model.cfg),
            "stats_initialized": all(s.initialized for s in model.backbone.stats.values())}
    meta.update(extra or {})
    arrays = model.state_arrays()
    arrays.update(extra_arrays or {})
    ad.save_container(path, arrays, meta)
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path) -> tuple[SegNet, dict]:
    arrays, meta = ad.load_container(path)
    model = SegNet(model_config_from_dict(meta["model"]))
    model.load_state_arrays(arrays, meta.get("stats_initialized", True))
    return model, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
