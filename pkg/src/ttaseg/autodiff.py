"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to one gradient per parent. ``Tensor.backward`` walks
the graph in reverse topological order and accumulates into leaf ``.grad``.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.float32, "grad_enabled": True}


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class GradcheckError(RuntimeError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    """Dense float array that can take part in a differentiation graph."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph traversal --------------------------------------------------
    def backward(self, grad=None) -> None:
        if self._consumed:
            raise GraphError("backward called twice on the same graph; run a new forward first")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"grad must be given for non-scalar output of shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node._consumed:
                    raise GraphError(f"node {node.op} belongs to an already-consumed graph")
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def abs_(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out), (x,), backward, "index")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concatenate([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# -- normalisation / probability ---------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def _normalize_backward(g_xhat, xhat, inv_std, axes):
    m1 = g_xhat.mean(axis=axes, keepdims=True)
    m2 = (g_xhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_xhat - m1 - xhat * m2)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = _normalize_backward(g * gamma.data, xhat, inv_std, -1)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), backward, "layernorm")


class RunningStats:
    """Per-channel running mean/variance for batch normalisation."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.initialized = False

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(np.float32)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(np.float32)
        self.initialized = True


BN_MODES = ("train", "eval", "adapt")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                mode: str = "train", eps: float = 1e-5) -> Tensor:
    """Batch norm over (N, H, W) for an N×C×H×W input.

    ``train`` normalises with batch statistics and updates ``stats``; ``adapt``
    uses the current input's statistics and leaves ``stats`` untouched;
    ``eval`` uses the running statistics.
    """
    if mode not in BN_MODES:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm2d expects N×{gamma.shape[0]}×H×W, got {x.shape}")
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    if mode == "eval":
        if not stats.initialized:
            raise GraphError("batchnorm eval mode requires running statistics from a training step")
        inv_std = (1.0 / np.sqrt(stats.var + eps)).astype(x.dtype).reshape(shape)
        xhat = (x.data - stats.mean.astype(x.dtype).reshape(shape)) * inv_std

        def backward(g):
            return (g * gamma.data.reshape(shape) * inv_std,
                    (g * xhat).sum(axis=axes), g.sum(axis=axes))
    else:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        if mode == "train":
            n = x.data.size // x.shape[1]
            stats.update(mu.ravel(), var.ravel() * n / max(n - 1, 1))

        def backward(g):
            gx = _normalize_backward(g * gamma.data.reshape(shape), xhat, inv_std, axes)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    return _node(out, (x, gamma, beta), backward, "batchnorm2d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- spatial ops -----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Cross-correlation of N×C×H×W input with O×C×k×k weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[3] != k:
        raise DimensionError(f"conv2d needs an odd square kernel, got {w.shape}")
    p = (k - 1) // 2 if padding is None else padding
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, backward, "conv2d")


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float32) -> np.ndarray:
    """Interpolation weights (half-pixel centres, edge clamped) as an out×in matrix."""
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(m, (np.arange(out_size), lo), 1 - frac)
    np.add.at(m, (np.arange(out_size), hi), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    ah = bilinear_matrix(size[0], x.shape[-2], x.dtype)
    aw = bilinear_matrix(size[1], x.shape[-1], x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _node(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),), "upsample")


def rot90(x: Tensor, k: int) -> Tensor:
    """Rotate the trailing two axes counter-clockwise by k quarter turns."""
    return _node(np.ascontiguousarray(np.rot90(x.data, k, axes=(-2, -1))), (x,),
                 lambda g: (np.ascontiguousarray(np.rot90(g, -k, axes=(-2, -1))),), "rot90")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if top < 0 or left < 0 or top + height > x.shape[-2] or left + width > x.shape[-1]:
        raise DimensionError(f"crop ({top},{left},{height},{width}) outside spatial size {x.shape[-2:]}")
    return index(x, (Ellipsis, slice(top, top + height), slice(left, left + width)))


def _patch_view(a: np.ndarray, patch: int) -> np.ndarray:
    *lead, h, w = a.shape
    gh, gw = h // patch, w // patch
    v = a.reshape(*lead, gh, patch, gw, patch)
    n = len(lead)
    v = np.moveaxis(v, n + 2, n + 1)  # ..., gh, gw, patch, patch
    return v.reshape(*lead, gh * gw, patch, patch)


def _from_patches(v: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    *lead, _, _, _ = v.shape
    gh, gw = h // patch, w // patch
    n = len(lead)
    v = v.reshape(*lead, gh, gw, patch, patch)
    v = np.moveaxis(v, n + 1, n + 2)
    return v.reshape(*lead, h, w)


def patch_permute(x: Tensor, patch: int, perm: Sequence[int]) -> Tensor:
    """Output patch ``i`` (row-major grid order) is input patch ``perm[i]``."""
    h, w = x.shape[-2:]
    if h % patch or w % patch:
        raise DimensionError(f"patch size {patch} does not divide spatial size {(h, w)}")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range((h // patch) * (w // patch))):
        raise DimensionError("patch permutation does not match grid size")
    inv = np.argsort(perm)
    out = _from_patches(_patch_view(x.data, patch)[..., perm, :, :], patch, h, w)

    def backward(g):
        return (_from_patches(_patch_view(g, patch)[..., inv, :, :], patch, h, w),)

    return _node(out, (x,), backward, "patch_permute")


# -- finite-difference oracle ----------------------------------------------

def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is re-evaluated in 64-bit precision with every parameter temporarily
    promoted to float64. Per entry the error is |a - n| / max(|a|, |n|, floor)
    where floor = 1e-6 + 1e-3 * max|n| keeps near-zero entries from dominating.
    ``max_entries`` samples that many coordinates per parameter.
    """
    params = list(params)
    originals = [p.data for p in params]
    grads_before = [p.grad for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with precision(np.float64):
            for p in params:
                p.data = np.ascontiguousarray(p.data, dtype=np.float64)
                p.grad = None
            out = f()
            if out.data.size != 1:
                raise GradcheckError(f"gradcheck needs a scalar function, got shape {out.shape}")
            if not np.isfinite(out.data).all():
                raise GradcheckError(f"non-finite function value {out.data}")
            out.backward()
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                numeric = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + step
                    with no_grad():
                        fp = float(f().data)
                    flat[i] = orig - step
                    with no_grad():
                        fm = float(f().data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise GradcheckError(f"non-finite value perturbing entry {i} of shape {p.shape}")
                    numeric[j] = (fp - fm) / (2 * step)
                an = a.reshape(-1)[idx]
                if not np.isfinite(an).all():
                    raise GradcheckError(f"non-finite analytic gradient for parameter of shape {p.shape}")
                floor = 1e-6 + 1e-3 * np.abs(numeric).max(initial=0.0)
                denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), floor)
                worst = max(worst, float((np.abs(an - numeric) / denom).max(initial=0.0)))
    finally:
        for p, orig, g in zip(params, originals, grads_before):
            p.data = orig
            p.grad = g
    return worst


# -- checkpoint container --------------------------------------------------

MAGIC = b"TTACKPT1"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays as a self-describing little-endian f32 container.

    Layout: 8-byte magic ``TTACKPT1``, uint64 LE header length N, N bytes of
    UTF-8 JSON ``{"entries": [{"name", "dtype": "f32", "shape", "offset",
    "nbytes"}], "meta": {...}}``, then the payload. Offsets are relative to the
    first payload byte; entries are packed in header order without padding.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "dtype": "f32", "shape": list(a.shape),
                        "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode())
    base = 16 + n
    arrays = {}
    for e in header["entries"]:
        if e["dtype"] != "f32":
            raise ValueError(f"{path}: unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=int(np.prod(e["shape"], dtype=int)),
                                          offset=start).reshape(e["shape"]).astype(np.float32)
    return arrays, header.get("meta", {})
