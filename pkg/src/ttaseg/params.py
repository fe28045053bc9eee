"""Named parameter registry with group tags, shared by the backbone and transformer."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor

GROUPS = ("bn", "conv", "head", "transformer")


class ParamRegistry:
    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.tensors[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def named(self, groups=None) -> list[tuple[str, Tensor]]:
        if isinstance(groups, str):
            groups = (groups,)
        return [(n, t) for n, t in self.tensors.items() if groups is None or self.groups[n] in groups]

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name, t in self.named(group):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
