"""Procedural shape scenes with a source and a shifted target appearance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import gaussian_blur, rotate_hue
from .autodiff import load_container, save_container

CLASS_NAMES = ("background", "circle", "square", "triangle", "stripe-bar")

DEFAULT_PALETTE = (
    (0.45, 0.50, 0.42),
    (0.85, 0.25, 0.20),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
    (0.60, 0.30, 0.70),
)


@dataclass
class DomainConfig:
    name: str = "source"
    size: int = 64
    num_classes: int = 5
    palette: tuple = DEFAULT_PALETTE
    color_jitter: float = 0.08
    texture: float = 0.04
    hue_shift: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    min_shapes: int = 2
    max_shapes: int = 6
    min_radius: int = 5
    max_radius: int = 13

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def source_domain(**kw) -> DomainConfig:
    return DomainConfig(name="source", **kw)


def target_domain(**kw) -> DomainConfig:
    params = dict(hue_shift=0.15, gamma=1.4, noise_sigma=0.05, blur_sigma=0.8)
    params.update(kw)
    return DomainConfig(name="target", **params)


def domain_from_dict(d: dict) -> DomainConfig:
    d = dict(d)
    if "palette" in d:
        d["palette"] = tuple(tuple(c) for c in d["palette"])
    return DomainConfig(**d)


@dataclass
class Scene:
    image: np.ndarray  # 3×H×W float32 in [0, 1]
    labels: np.ndarray  # H×W int64 class ids

    def __eq__(self, other) -> bool:
        return (np.array_equal(self.image, other.image) and np.array_equal(self.labels, other.labels)
                and self.image.dtype == other.image.dtype)


def _shape_mask(kind: int, cy: float, cx: float, r: float, angle: float, yy, xx) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == 1:
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 2:
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == 3:
        # upward triangle in the rotated frame
        return (v <= 0.5 * r) & (v >= -r + 1.732 * np.abs(u))
    # long thin bar
    return (np.abs(u) <= 1.6 * r) & (np.abs(v) <= 0.35 * r)


def generate_scene(cfg: DomainConfig, rng: np.random.Generator, n_shapes: int | None = None) -> Scene:
    """Rasterise shapes, then render appearance; labels depend only on geometry draws.

    All geometry is drawn from ``rng`` before any appearance randomness, so two
    domains sharing a seed produce identical label maps.
    """
    h = w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if n_shapes is None:
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        kind = int(rng.integers(1, cfg.num_classes))
        r = rng.uniform(cfg.min_radius, cfg.max_radius)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        angle = rng.uniform(0, np.pi)
        shapes.append((kind, cy, cx, r, angle))
    app_rng = np.random.default_rng(rng.integers(2 ** 63))

    labels = np.zeros((h, w), dtype=np.int64)
    palette = np.asarray(cfg.palette, dtype=np.float64)
    bg = palette[0] + app_rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
    ramp = app_rng.uniform(-0.1, 0.1) * (yy / h - 0.5) + app_rng.uniform(-0.1, 0.1) * (xx / w - 0.5)
    image = bg[:, None, None] + ramp[None]
    for kind, cy, cx, r, angle in shapes:
        mask = _shape_mask(kind, cy, cx, r, angle, yy, xx)
        labels[mask] = kind
        color = palette[kind] + app_rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        fill = np.broadcast_to(color[:, None, None], image.shape).copy()
        if kind == 4:
            c, s = np.cos(angle), np.sin(angle)
            stripes = (np.floor((c * (xx - cx) + s * (yy - cy)) / 3.0) % 2) == 0
            fill = np.where(stripes[None], fill, fill * 0.55)
        image = np.where(mask[None], fill, image)
    image = image + cfg.texture * app_rng.standard_normal(image.shape)
    image = np.clip(image, 0, 1)

    if cfg.hue_shift:
        image = rotate_hue(image, cfg.hue_shift)
    if cfg.gamma != 1.0:
        image = np.clip(image, 0, 1) ** cfg.gamma
    if cfg.blur_sigma > 0:
        image = gaussian_blur(image, cfg.blur_sigma, 5)
    if cfg.noise_sigma > 0:
        image = image + cfg.noise_sigma * app_rng.standard_normal(image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return Scene(image, labels)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_split(cfg: DomainConfig, n: int, seed: int, out_dir, tag: str | None = None) -> Path:
    """Write ``n`` scenes as tensor containers plus ``manifest.json``."""
    if n < 1:
        raise ValueError(f"split size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        s = generate_scene(cfg, scene_rng(seed, i))
        save_container(out / f"sample_{i:05d}.bin",
                       {"image": s.image, "labels": s.labels.astype(np.float32)})
    manifest = {"count": n, "seed": seed, "config_hash": cfg.hash(), "domain": tag or cfg.name,
                "config": cfg.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(split_dir) -> dict:
    path = Path(split_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest in {split_dir}")
    return json.loads(path.read_text())


def load_scene(path) -> Scene:
    arrays, _ = load_container(path)
    return Scene(arrays["image"], arrays["labels"].astype(np.int64))


def load_split(split_dir) -> list[Scene]:
    m = read_manifest(split_dir)
    return [load_scene(Path(split_dir) / f"sample_{i:05d}.bin") for i in range(m["count"])]


def stack_split(scenes: list[Scene]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes])
