"""Transformer decoder that turns a feature map into a per-image transfer matrix.

Learnable class queries cross-attend to the flattened feature tokens; the
decoded queries are projected to L dimensions and softmax-normalised into an
L×L matrix relating unsupervised logits to supervised logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .params import ParamRegistry


@dataclass
class TransformerConfig:
    dim: int = 32
    heads: int = 4
    layers: int = 1
    dropout: float = 0.1
    positional_encoding: bool = False
    attention_scaling: bool = False
    # "unsup": rows of W_su sum to one; "sup": columns do
    softmax_axis: str = "unsup"
    tap: str = "block3"
    # initial diagonal logit of the transfer matrix; 0 draws U at random
    identity_bias: float = 8.0

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"transformer dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.layers <= 4:
            raise ValueError(f"transformer layers must be in 1..4, got {self.layers}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.softmax_axis not in ("unsup", "sup"):
            raise ValueError(f"softmax_axis must be 'unsup' or 'sup', got {self.softmax_axis!r}")
        if self.identity_bias < 0:
            raise ValueError(f"identity_bias must be >= 0, got {self.identity_bias}")


def sinusoidal_2d(dim: int, h: int, w: int) -> np.ndarray:
    """(h*w)×dim encoding: first half encodes the row, second half the column."""
    half = dim // 2
    freqs = 1.0 / (10000 ** (np.arange(0, half, 2) / half))

    def enc(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.zeros((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)[:, : out[:, 1::2].shape[1]]
        return out

    rows = np.repeat(enc(np.arange(h, dtype=float)), w, axis=0)
    cols = np.tile(enc(np.arange(w, dtype=float)), (h, 1))
    pe = np.zeros((h * w, dim))
    pe[:, :half] = rows
    pe[:, half:2 * half] = cols
    return pe


def tokenize(f: Tensor, positional_encoding: bool = False) -> Tensor:
    """N×C×H×W feature map to N×(H·W)×C tokens in row-major spatial order."""
    if f.ndim == 3:
        f = f.reshape(1, *f.shape)
    n, c, h, w = f.shape
    t = f.reshape(n, c, h * w).permute(0, 2, 1)
    if positional_encoding:
        t = t + Tensor(sinusoidal_2d(c, h, w))
    return t


def attention(q: Tensor, k: Tensor, v: Tensor, scaled: bool = False) -> Tensor:
    """Softmax(q kᵀ) v over the last two axes, optionally scaled by 1/sqrt(d)."""
    if k.shape[-2] == 0:
        raise DimensionError("attention over zero tokens")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    scores = q @ k.T
    if scaled:
        scores = scores * (1.0 / np.sqrt(q.shape[-1]))
    return ad.softmax(scores, axis=-1) @ v


class TransformerHead:
    def __init__(self, registry: ParamRegistry, num_classes: int, in_channels: int,
                 cfg: TransformerConfig, rng: np.random.Generator):
        cfg.validate()
        self.registry = registry
        self.cfg = cfg
        self.num_classes = num_classes
        c = cfg.dim
        self.project = in_channels != c
        if self.project:
            registry.add("tf.proj.weight", rng.normal(0, np.sqrt(1.0 / in_channels), (c, in_channels, 1, 1)),
                         "transformer")
        queries = rng.normal(0, 0.02, (num_classes, c))
        if cfg.identity_bias > 0 and num_classes <= c:
            # orthogonal queries with U aligned to them start W_su near identity
            queries = np.linalg.qr(rng.normal(size=(c, c)))[0][:num_classes] * np.sqrt(c)
        registry.add("tf.queries", queries, "transformer")
        lin = np.sqrt(1.0 / c)
        for i in range(cfg.layers):
            for name in ("wq", "wk", "wv", "wo", "ffn1", "ffn2"):
                registry.add(f"tf.{i}.{name}", rng.normal(0, lin, (c, c)), "transformer")
            for ln in ("ln1", "ln2", "ln3"):
                registry.add(f"tf.{i}.{ln}.gamma", np.ones(c), "transformer")
                registry.add(f"tf.{i}.{ln}.beta", np.zeros(c), "transformer")
        u = rng.normal(0, lin, (c, num_classes))
        if cfg.identity_bias > 0 and num_classes <= c:
            u = np.ascontiguousarray(cfg.identity_bias * queries.T / c)
        registry.add("tf.U", u, "transformer")

    def _p(self, name: str) -> Tensor:
        return self.registry[name]

    def mhatt_layer(self, qs: Tensor, tokens: Tensor, i: int, rng=None, train: bool = False) -> Tensor:
        """LN(q^s + DO(concat_m Att(q_m, k_m, v_m) W)) for decoder layer ``i``."""
        m = self.cfg.heads
        c = self.cfg.dim
        d = c // m
        q = qs @ self._p(f"tf.{i}.wq")
        k = tokens @ self._p(f"tf.{i}.wk")
        v = tokens @ self._p(f"tf.{i}.wv")
        lead = tokens.shape[:-2]
        nq, nt = q.shape[-2], tokens.shape[-2]
        qh = q.reshape(*q.shape[:-2], nq, m, d)
        qh = qh.permute(*range(qh.ndim - 3), qh.ndim - 2, qh.ndim - 3, qh.ndim - 1)
        kh = k.reshape(*lead, nt, m, d).permute(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)
        vh = v.reshape(*lead, nt, m, d).permute(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)
        heads = attention(qh, kh, vh, self.cfg.attention_scaling)  # ..., M, L, d
        nd = heads.ndim
        merged = heads.permute(*range(nd - 3), nd - 2, nd - 3, nd - 1)
        merged = merged.reshape(*merged.shape[:-2], c)
        upd = ad.dropout(merged @ self._p(f"tf.{i}.wo"), self.cfg.dropout, rng, train)
        return ad.layernorm(qs + upd, self._p(f"tf.{i}.ln1.gamma"), self._p(f"tf.{i}.ln1.beta"))

    def ffn_layer(self, h: Tensor, i: int, rng=None, train: bool = False) -> Tensor:
        """Two sub-layers, each LN(h + DO(ReLU(h W)))."""
        for w, ln in (("ffn1", "ln2"), ("ffn2", "ln3")):
            upd = ad.dropout(ad.relu(h @ self._p(f"tf.{i}.{w}")), self.cfg.dropout, rng, train)
            h = ad.layernorm(h + upd, self._p(f"tf.{i}.{ln}.gamma"), self._p(f"tf.{i}.{ln}.beta"))
        return h

    def decode(self, feature: Tensor, rng=None, train: bool = False) -> Tensor:
        if feature.ndim == 3:
            feature = feature.reshape(1, *feature.shape)
        if self.project:
            feature = ad.conv2d(feature, self._p("tf.proj.weight"))
        tokens = tokenize(feature, self.cfg.positional_encoding)
        h = self._p("tf.queries")
        for i in range(self.cfg.layers):
            h = self.mhatt_layer(h, tokens, i, rng, train)
            h = self.ffn_layer(h, i, rng, train)
        return h

    def transfer_matrix(self, feature: Tensor, rng=None, train: bool = False) -> Tensor:
        """N×L×L matrix; entry [s, u] weighs unsupervised class u into supervised class s."""
        qo = self.decode(feature, rng, train)
        axis = -1 if self.cfg.softmax_axis == "unsup" else -2
        return ad.softmax(qo @ self._p("tf.U"), axis=axis)


def supervised_logits(o_u: Tensor, w_su: Tensor) -> Tensor:
    """o_s[s, h, w] = sum_u W_su[s, u] o_u[u, h, w], batched over a leading axis."""
    squeeze = o_u.ndim == 3
    if squeeze:
        o_u = o_u.reshape(1, *o_u.shape)
    if w_su.ndim == 2:
        w_su = w_su.reshape(1, *w_su.shape)
    n, l, h, w = o_u.shape
    if w_su.shape[-1] != l or w_su.shape[-2] != l:
        raise DimensionError(f"transfer matrix {w_su.shape} does not match {l} logit channels")
    o_s = (w_su @ o_u.reshape(n, l, h * w)).reshape(n, l, h, w)
    return o_s.reshape(l, h, w) if squeeze else o_s
