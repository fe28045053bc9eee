"""Feature extractor and prediction head producing the unsupervised logits."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, RunningStats, Tensor
from .params import ParamRegistry, he_normal

TAPS = ("block1", "block2", "block3", "block4", "logits")

# (in, out, stride) per block; blocks 2 and 3 halve the resolution
DEFAULT_BLOCKS = ((3, 16, 1), (16, 32, 2), (32, 32, 2), (32, 32, 1))


class ConfigError(ValueError):
    pass


class SegBackbone:
    """Four conv3x3-BN-ReLU blocks followed by a 1x1 classifier and bilinear upsampling."""

    def __init__(self, registry: ParamRegistry, num_classes: int, rng: np.random.Generator,
                 blocks=DEFAULT_BLOCKS, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.registry = registry
        self.num_classes = num_classes
        self.blocks = tuple(tuple(b) for b in blocks)
        self.bn_eps = bn_eps
        self.stats: dict[str, RunningStats] = {}
        for i, (cin, cout, _) in enumerate(self.blocks, start=1):
            registry.add(f"block{i}.conv.weight", he_normal(rng, (cout, cin, 3, 3), cin * 9), "conv")
            registry.add(f"block{i}.bn.gamma", np.ones(cout), "bn")
            registry.add(f"block{i}.bn.beta", np.zeros(cout), "bn")
            self.stats[f"block{i}.bn"] = RunningStats(cout, bn_momentum)
        feat = self.blocks[-1][1]
        registry.add("head.weight", he_normal(rng, (num_classes, feat, 1, 1), feat), "head")
        registry.add("head.bias", np.zeros(num_classes), "head")

    def tap_channels(self, which: str) -> int:
        if which == "logits":
            return self.num_classes
        if which not in TAPS:
            raise ConfigError(f"unknown tap {which!r}; expected one of {TAPS}")
        return self.blocks[int(which[-1]) - 1][1]

    def forward(self, x: Tensor, bn_mode: str = "eval") -> tuple[Tensor, dict[str, Tensor]]:
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != self.blocks[0][0]:
            raise DimensionError(f"expected N×{self.blocks[0][0]}×H×W input, got {x.shape}")
        r = self.registry
        taps = {}
        h = x
        for i, (_, _, stride) in enumerate(self.blocks, start=1):
            h = ad.conv2d(h, r[f"block{i}.conv.weight"], stride=stride)
            h = ad.batchnorm2d(h, r[f"block{i}.bn.gamma"], r[f"block{i}.bn.beta"],
                               self.stats[f"block{i}.bn"], bn_mode, self.bn_eps)
            h = ad.relu(h)
            taps[f"block{i}"] = h
        logits = ad.conv2d(h, r["head.weight"], r["head.bias"])
        o_u = ad.upsample_bilinear(logits, x.shape[-2:])
        taps["logits"] = o_u
        return o_u, taps


def select_tap(taps: dict[str, Tensor], which: str) -> Tensor:
    if which not in TAPS:
        raise ConfigError(f"unknown tap {which!r}; expected one of {TAPS}")
    return taps[which]
