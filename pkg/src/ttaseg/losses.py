"""Supervised, unsupervised and transformation-consistency losses.

All losses take logits shaped ...×L×H×W (class axis -3) and mean-reduce over
pixels so that values do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .augment import (AugmentConfig, GeometricSpec, PhotometricSpec, apply_geometric,
                      apply_photometric, sample_geometric, sample_photometric)
from .autodiff import DimensionError, Tensor

METRICS = ("l2-logits", "l1-logits", "l2-probs", "l1-probs", "kl-probs")
UNSUP_KINDS = ("trans-consistency", "max-squares", "min-entropy", "selective-ce", "special-ce", "none")
CLASS_AXIS = -3


@dataclass
class LossConfig:
    lam: float = 0.1
    unsup_kind: str = "max-squares"
    tau: float = 0.8
    K: int = 1
    metric: str = "l2-logits"

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.unsup_kind not in UNSUP_KINDS:
            raise ValueError(f"unknown unsupervised loss {self.unsup_kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown discrepancy metric {self.metric!r}")


def _pixels(t: Tensor) -> int:
    return t.data.size // t.shape[CLASS_AXIS]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    l = logits.shape[CLASS_AXIS]
    if labels.max(initial=0) >= l or labels.min(initial=0) < 0:
        raise ValueError(f"label out of range for {l} classes")
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = np.moveaxis(np.eye(l, dtype=logits.dtype)[labels], -1, CLASS_AXIS)
    logp = ad.log_softmax(logits, axis=CLASS_AXIS)
    return -(logp * onehot).sum() * (1.0 / labels.size)


def min_entropy(logits: Tensor) -> Tensor:
    p = ad.softmax(logits, axis=CLASS_AXIS)
    logp = ad.log_softmax(logits, axis=CLASS_AXIS)
    return -(p * logp).sum() * (1.0 / _pixels(logits))


def max_squares(logits: Tensor) -> Tensor:
    p = ad.softmax(logits, axis=CLASS_AXIS)
    return ad.square(p).sum() * (-0.5 / _pixels(logits))


def confident_mask(p: np.ndarray, tau: float) -> np.ndarray:
    """Pixels whose top probability strictly exceeds tau, compared in p's own precision."""
    return p.max(axis=CLASS_AXIS) > np.asarray(tau, dtype=p.dtype)


def selective_ce(logits: Tensor, tau: float = 0.8) -> Tensor:
    """Cross-entropy against confident pseudo-labels (p_max > tau); other pixels add zero."""
    p = ad.softmax(logits, axis=CLASS_AXIS)
    l = logits.shape[CLASS_AXIS]
    pseudo = p.data.argmax(axis=CLASS_AXIS)
    confident = confident_mask(p.data, tau)
    mask = np.moveaxis(np.eye(l, dtype=logits.dtype)[pseudo], -1, CLASS_AXIS)
    mask = mask * np.expand_dims(confident, CLASS_AXIS)
    logp = ad.log_softmax(logits, axis=CLASS_AXIS)
    return -(logp * mask).sum() * (1.0 / _pixels(logits))


def special_ce_weights(p: np.ndarray, pt: np.ndarray) -> np.ndarray:
    """Per pixel/class weights: one-hot at the shared pseudo-label when both argmaxes
    agree, exp(-(p_l - pt_l)^2) for every class otherwise."""
    l = p.shape[CLASS_AXIS]
    a = p.argmax(axis=CLASS_AXIS)
    b = pt.argmax(axis=CLASS_AXIS)
    agree = np.expand_dims(a == b, CLASS_AXIS)
    onehot = np.moveaxis(np.eye(l, dtype=p.dtype)[b], -1, CLASS_AXIS)
    soft = np.exp(-(p - pt) ** 2)
    return np.where(agree, onehot, soft)


def special_ce(logits: Tensor, logits_t: Tensor) -> Tensor:
    """Weighted cross-entropy of the transformed view's probabilities; weights are constants."""
    if logits.shape != logits_t.shape:
        raise DimensionError(f"special_ce shape mismatch {logits.shape} vs {logits_t.shape}")
    p = ad.softmax(logits, axis=CLASS_AXIS).data
    pt = ad.softmax(logits_t, axis=CLASS_AXIS).data
    w = special_ce_weights(p, pt)
    logpt = ad.log_softmax(logits_t, axis=CLASS_AXIS)
    return -(logpt * w).sum() * (1.0 / _pixels(logits))


def discrepancy(metric: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"discrepancy shape mismatch {a.shape} vs {b.shape}")
    if metric == "kl-probs":
        la = ad.log_softmax(a, axis=CLASS_AXIS)
        lb = ad.log_softmax(b, axis=CLASS_AXIS)
        pa = ad.softmax(a, axis=CLASS_AXIS)
        return (pa * (la - lb)).sum() * (1.0 / _pixels(a))
    if metric.endswith("-probs"):
        a = ad.softmax(a, axis=CLASS_AXIS)
        b = ad.softmax(b, axis=CLASS_AXIS)
    elif metric not in ("l2-logits", "l1-logits"):
        raise ValueError(f"unknown discrepancy metric {metric!r}")
    d = a - b
    return ad.mean(ad.square(d)) if metric.startswith("l2") else ad.mean(ad.abs_(d))


def consistency_loss(logits_fn: Callable[[Tensor], Tensor], x: Tensor, aug: AugmentConfig,
                     metric: str, rng: np.random.Generator | None, K: int = 1,
                     photometric: list[PhotometricSpec] | None = None,
                     geometric: list[GeometricSpec] | None = None,
                     o_ref: Tensor | None = None) -> Tensor:
    """Photometric invariance plus geometric equivariance discrepancy, each averaged over K draws.

    ``logits_fn`` maps an image batch to logits of the same spatial size. Specs
    may be passed explicitly; otherwise K of each family are drawn from ``rng``.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    size = x.shape[-2:]
    if photometric is None:
        photometric = [sample_photometric(aug.photometric_strength, rng, aug.photometric_kinds)
                       for _ in range(K)]
    if geometric is None:
        geometric = [sample_geometric(aug, rng, size) for _ in range(K)]
    o = logits_fn(x) if o_ref is None else o_ref
    if tuple(o.shape[-2:]) != tuple(size):
        raise DimensionError(f"logit grid {o.shape[-2:]} is not aligned with image grid {size}")
    photo = None
    for spec in photometric:
        term = discrepancy(metric, o, logits_fn(apply_photometric(spec, x)))
        photo = term if photo is None else photo + term
    geo = None
    for spec in geometric:
        term = discrepancy(metric, apply_geometric(spec, o), logits_fn(apply_geometric(spec, x)))
        geo = term if geo is None else geo + term
    return photo * (1.0 / len(photometric)) + geo * (1.0 / len(geometric))


def unsupervised_loss(kind: str, logits: Tensor, tau: float = 0.8) -> Tensor:
    if kind == "max-squares":
        return max_squares(logits)
    if kind == "min-entropy":
        return min_entropy(logits)
    if kind == "selective-ce":
        return selective_ce(logits, tau)
    raise ValueError(f"{kind!r} cannot be computed from a single set of logits")


def total_pretrain_loss(o_s: Tensor, labels: np.ndarray, o_u: Tensor, cfg: LossConfig,
                        unsup: Tensor | None = None) -> Tensor:
    """Cross-entropy on the supervised logits plus lambda times an unsupervised term on o_u.

    Multi-view unsupervised kinds (trans-consistency, special-ce) must be
    computed by the caller and passed as ``unsup``.
    """
    ce = cross_entropy(o_s, labels)
    if cfg.unsup_kind == "none" or cfg.lam == 0:
        return ce
    if unsup is None:
        unsup = unsupervised_loss(cfg.unsup_kind, o_u, cfg.tau)
    return ce + unsup * cfg.lam
