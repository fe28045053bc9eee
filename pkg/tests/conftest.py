import numpy as np
import pytest

from ttaseg.augment import AugmentConfig
from ttaseg.data import generate_scene, scene_rng, source_domain, target_domain
from ttaseg.model import ModelConfig, SegNet
from ttaseg.transformer import TransformerConfig


def tiny_config(use_transformer=True, **tf) -> ModelConfig:
    tcfg = TransformerConfig(dim=8, heads=2, dropout=0.0, **tf)
    return ModelConfig(num_classes=5, channels=(4, 8, 8, 8), use_transformer=use_transformer, transformer=tcfg)


def warmed(model: SegNet, images: np.ndarray) -> SegNet:
    """Run one train-mode forward so running BN statistics exist."""
    from ttaseg.autodiff import Tensor, no_grad
    with no_grad():
        model.forward(Tensor(images), "train")
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return SegNet(tiny_config(), seed=3)


@pytest.fixture
def source_scenes():
    return [generate_scene(source_domain(), scene_rng(11, i)) for i in range(8)]


@pytest.fixture
def target_scenes():
    return [generate_scene(target_domain(), scene_rng(12, i)) for i in range(12)]


@pytest.fixture
def aug16():
    """Augmentation settings for 16×16 inputs."""
    return AugmentConfig(patch_size=4, align=4)


def naive_geometric(spec, arr: np.ndarray) -> np.ndarray:
    """Index-by-index remapping of the trailing two axes, independent of the library ops."""
    h, w = arr.shape[-2:]
    if spec.kind == "crop":
        out = np.empty(arr.shape[:-2] + (spec.height, spec.width), dtype=arr.dtype)
        for i in range(spec.height):
            for j in range(spec.width):
                out[..., i, j] = arr[..., spec.top + i, spec.left + j]
        return out
    if spec.kind == "rotate90":
        out = arr
        for _ in range(spec.k % 4):
            hh, ww = out.shape[-2:]
            nxt = np.empty(out.shape[:-2] + (ww, hh), dtype=arr.dtype)
            for i in range(ww):
                for j in range(hh):
                    # counter-clockwise quarter turn
                    nxt[..., i, j] = out[..., j, ww - 1 - i]
            out = nxt
        return out
    p = spec.patch
    cols = w // p
    out = np.empty_like(arr)
    for dst, src in enumerate(spec.perm):
        dr, dc = divmod(dst, cols)
        sr, sc = divmod(src, cols)
        for i in range(p):
            for j in range(p):
                out[..., dr * p + i, dc * p + j] = arr[..., sr * p + i, sc * p + j]
    return out
