"""Photometric and geometric input transformations.

Photometric specs only change pixel values. Geometric specs act on the two
trailing spatial axes of any tensor, so the same spec can be applied to an
image, a label map or a stack of logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

PHOTOMETRIC_KINDS = ("grayscale", "color-jitter", "gaussian-blur")
GEOMETRIC_KINDS = ("crop", "rotate90", "patch-shuffle")
LUMA = np.array([0.299, 0.587, 0.114])


class AugmentConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    photometric_strength: float = 0.75
    crop_ratio: float = 0.5
    patch_size: int = 16
    # crop offsets are multiples of this (the backbone's output stride)
    align: int = 4
    photometric_kinds: tuple = PHOTOMETRIC_KINDS
    geometric_kinds: tuple = GEOMETRIC_KINDS

    def validate(self) -> None:
        if not 0 <= self.photometric_strength <= 1:
            raise AugmentConfigError(f"photometric_strength must be in [0, 1], got {self.photometric_strength}")
        if not 0 < self.crop_ratio <= 1:
            raise AugmentConfigError(f"crop_ratio must be in (0, 1], got {self.crop_ratio}")
        if self.patch_size < 1 or self.align < 1:
            raise AugmentConfigError("patch_size and align must be positive")
        for k in self.photometric_kinds:
            if k not in PHOTOMETRIC_KINDS:
                raise AugmentConfigError(f"unknown photometric kind {k!r}")
        for k in self.geometric_kinds:
            if k not in GEOMETRIC_KINDS:
                raise AugmentConfigError(f"unknown geometric kind {k!r}")
        if not self.photometric_kinds or not self.geometric_kinds:
            raise AugmentConfigError("at least one photometric and one geometric kind must be enabled")


@dataclass
class PhotometricSpec:
    kind: str
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    sigma: float = 0.0
    ksize: int = 5

    @classmethod
    def identity(cls) -> "PhotometricSpec":
        return cls("color-jitter")


@dataclass
class GeometricSpec:
    kind: str
    size: tuple
    top: int = 0
    left: int = 0
    height: int = 0
    width: int = 0
    k: int = 0
    patch: int = 0
    perm: list = field(default_factory=list)

    @classmethod
    def identity(cls, size) -> "GeometricSpec":
        return cls("crop", tuple(size), 0, 0, size[0], size[1])

    def out_size(self) -> tuple:
        if self.kind == "crop":
            return (self.height, self.width)
        if self.kind == "rotate90" and self.k % 2:
            return (self.size[1], self.size[0])
        return tuple(self.size)


# -- photometric -----------------------------------------------------------

def sample_photometric(strength: float, rng: np.random.Generator,
                       kinds=PHOTOMETRIC_KINDS) -> PhotometricSpec:
    if not 0 <= strength <= 1:
        raise AugmentConfigError(f"photometric strength must be in [0, 1], got {strength}")
    if strength == 0:
        return PhotometricSpec.identity()
    kind = kinds[rng.integers(len(kinds))]
    if kind == "grayscale":
        return PhotometricSpec("grayscale")
    if kind == "gaussian-blur":
        return PhotometricSpec("gaussian-blur", sigma=float(rng.uniform(0.1, 2.0)), ksize=5)
    lo, hi = max(0.0, 1 - strength), 1 + strength
    h = min(strength, 0.5)
    b, c, s = rng.uniform(lo, hi, size=3)
    return PhotometricSpec("color-jitter", brightness=float(b), contrast=float(c),
                           saturation=float(s), hue=float(rng.uniform(-h, h)))


def gaussian_kernel(sigma: float, ksize: int = 5) -> np.ndarray:
    r = ksize // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k2 = np.outer(g, g)
    return k2 / k2.sum()


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int = 5) -> np.ndarray:
    """Blur the trailing two axes with a truncated, normalised Gaussian (reflect padding)."""
    k = gaussian_kernel(sigma, ksize)
    r = ksize // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img.astype(np.float64), pad, mode="reflect")
    h, w = img.shape[-2:]
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(ksize):
        for j in range(ksize):
            out += k[i, j] * p[..., i:i + h, j:j + w]
    return out.astype(img.dtype)


def grayscale(img: np.ndarray) -> np.ndarray:
    """Luminance replicated to three channels; channel axis is -3."""
    y = np.tensordot(LUMA, img.astype(np.float64), axes=([0], [img.ndim - 3]))
    return np.repeat(np.expand_dims(y, -3), 3, axis=-3).astype(img.dtype)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    mx = np.max(rgb, axis=-3)
    mn = np.min(rgb, axis=-3)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6,
                 np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) / 6.0
    h = np.where(delta > 0, h, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-3)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0, :, :], hsv[..., 1, :, :], hsv[..., 2, :, :]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-3)


def rotate_hue(img: np.ndarray, turns: float) -> np.ndarray:
    hsv = rgb_to_hsv(img.astype(np.float64))
    hsv[..., 0, :, :] = (hsv[..., 0, :, :] + turns) % 1.0
    return hsv_to_rgb(hsv).astype(img.dtype)


def _jitter(img: np.ndarray, spec: PhotometricSpec) -> np.ndarray:
    out = img
    if spec.brightness != 1.0:
        out = np.clip(out * spec.brightness, 0, 1)
    if spec.contrast != 1.0:
        m = grayscale(out)[..., :1, :, :].mean(axis=(-2, -1), keepdims=True)
        out = np.clip((out - m) * spec.contrast + m, 0, 1)
    if spec.saturation != 1.0:
        gray = grayscale(out)
        out = np.clip(gray + spec.saturation * (out - gray), 0, 1)
    if spec.hue != 0.0:
        out = np.clip(rotate_hue(out, spec.hue), 0, 1)
    return out


def apply_photometric(spec: PhotometricSpec, x: Tensor) -> Tensor:
    """Apply to a 3×H×W or N×3×H×W image in [0, 1]; the result carries no gradient."""
    img = x.data
    if img.ndim < 3 or img.shape[-3] != 3:
        raise DimensionError(f"photometric transforms need 3 colour channels, got shape {img.shape}")
    if spec.kind == "grayscale":
        out = grayscale(img)
    elif spec.kind == "gaussian-blur":
        out = gaussian_blur(img, spec.sigma, spec.ksize)
    elif spec.kind == "color-jitter":
        out = _jitter(img, spec)
    else:
        raise AugmentConfigError(f"unknown photometric kind {spec.kind!r}")
    return Tensor(np.clip(out, 0, 1).astype(img.dtype))


# -- geometric ---------------------------------------------------------------

def sample_geometric(cfg: AugmentConfig, rng: np.random.Generator, size=(64, 64)) -> GeometricSpec:
    h, w = size
    if "patch-shuffle" in cfg.geometric_kinds and (h % cfg.patch_size or w % cfg.patch_size):
        raise AugmentConfigError(f"patch size {cfg.patch_size} does not evenly divide image size {size}")
    kinds = cfg.geometric_kinds
    kind = kinds[rng.integers(len(kinds))]
    if kind == "crop":
        ch = int(round(cfg.crop_ratio * h))
        cw = int(round(cfg.crop_ratio * w))
        tops = np.arange(0, h - ch + 1, cfg.align)
        lefts = np.arange(0, w - cw + 1, cfg.align)
        return GeometricSpec("crop", (h, w), int(rng.choice(tops)), int(rng.choice(lefts)), ch, cw)
    if kind == "rotate90":
        return GeometricSpec("rotate90", (h, w), k=int(rng.integers(1, 4)))
    n = (h // cfg.patch_size) * (w // cfg.patch_size)
    return GeometricSpec("patch-shuffle", (h, w), patch=cfg.patch_size, perm=rng.permutation(n).tolist())


def apply_geometric(spec: GeometricSpec, t: Tensor) -> Tensor:
    if tuple(t.shape[-2:]) != tuple(spec.size):
        raise DimensionError(f"geometric spec built for spatial size {spec.size}, got {t.shape[-2:]}")
    if spec.kind == "crop":
        return ad.crop(t, spec.top, spec.left, spec.height, spec.width)
    if spec.kind == "rotate90":
        return ad.rot90(t, spec.k)
    if spec.kind == "patch-shuffle":
        return ad.patch_permute(t, spec.patch, spec.perm)
    raise AugmentConfigError(f"unknown geometric kind {spec.kind!r}")


def invert_geometric(spec: GeometricSpec) -> GeometricSpec:
    """Inverse for rotations and shuffles; crops are only invertible onto their region."""
    if spec.kind == "rotate90":
        return GeometricSpec("rotate90", spec.out_size(), k=(4 - spec.k) % 4)
    if spec.kind == "patch-shuffle":
        return GeometricSpec("patch-shuffle", spec.size, patch=spec.patch,
                             perm=np.argsort(spec.perm).tolist())
    raise AugmentConfigError(f"{spec.kind} has no full inverse")
