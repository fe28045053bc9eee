import dataclasses

import numpy as np
import pytest

from ttaseg.augment import AugmentConfig
from ttaseg.autodiff import DimensionError, Tensor
from ttaseg.backbone import ConfigError
from ttaseg.data import Scene, generate_scene, scene_rng, source_domain, target_domain, stack_split
from ttaseg.engine import (HEAD_CONFIGS, SGD, AdaptConfig, TrainConfig, TrainingDiverged, adapt_stream, evaluate,
                           head_config_sweep, named_rng, poly_lr, pretrain, transformation_count_sweep)
from ttaseg.losses import LossConfig, cross_entropy
from ttaseg.metrics import miou
from ttaseg.model import SegNet

from conftest import tiny_config

SMALL = dict(size=16, min_radius=2, max_radius=5)
AUG = AugmentConfig(patch_size=4, align=4)


def scenes(domain, seed, n):
    return [generate_scene(domain(**SMALL), scene_rng(seed, i)) for i in range(n)]


@pytest.fixture(scope="module")
def trained():
    model = SegNet(tiny_config(), seed=0)
    x, y = stack_split(scenes(source_domain, 0, 16))
    pretrain(model, x, y, TrainConfig(epochs=2, lr=5e-2), LossConfig(), AUG)
    return model


@pytest.fixture(scope="module")
def stream():
    return scenes(target_domain, 1, 10)


def full_loss(model, x, y):
    out = model.forward(Tensor(x), "adapt")
    return float(cross_entropy(out.o_s, y).data)


# -- pretraining ---------------------------------------------------------------

def test_one_epoch_descends():
    model = SegNet(tiny_config(), seed=0)
    x, y = stack_split(scenes(source_domain, 2, 8))
    before = full_loss(model, x, y)
    pretrain(model, x, y, TrainConfig(epochs=1, lr=5e-2), LossConfig(), AUG)
    assert full_loss(model, x, y) < before


def test_identity_transfer_matches_plain_segmenter():
    x, y = stack_split(scenes(source_domain, 3, 8))
    tcfg, lcfg = TrainConfig(epochs=1, lr=1e-2), LossConfig(lam=0.0)
    ident = SegNet(dataclasses.replace(tiny_config(), force_identity=True), seed=5)
    plain = SegNet(tiny_config(use_transformer=False), seed=5)
    h1, _ = pretrain(ident, x, y, tcfg, lcfg, AUG)
    h2, _ = pretrain(plain, x, y, tcfg, lcfg, AUG)
    assert max(abs(a["loss"] - b["loss"]) for a, b in zip(h1, h2)) < 1e-6


def test_poly_lr_endpoint():
    assert poly_lr(1e-2, 0, 100) == 1e-2
    assert poly_lr(1e-2, 99, 100) == pytest.approx(1e-2 * 0.01 ** 0.9)
    assert poly_lr(1e-2, 100, 100) == 0.0


def test_pretrain_deterministic():
    x, y = stack_split(scenes(source_domain, 4, 8))
    runs = []
    for _ in range(2):
        m = SegNet(tiny_config(), seed=1)
        h, _ = pretrain(m, x, y, TrainConfig(epochs=1), LossConfig(unsup_kind="trans-consistency"), AUG)
        runs.append(([r["loss"] for r in h], m.content_hash()))
    assert runs[0] == runs[1]


class Interrupt(Exception):
    pass


def test_pretrain_resume_matches_uninterrupted():
    x, y = stack_split(scenes(source_domain, 5, 8))
    tcfg = TrainConfig(epochs=2)
    lcfg = LossConfig(unsup_kind="trans-consistency")
    model_cfg = dataclasses.replace(tiny_config(), transformer=dataclasses.replace(tiny_config().transformer,
                                                                                   dropout=0.3))
    full = SegNet(model_cfg, seed=2)
    hist, _ = pretrain(full, x, y, tcfg, lcfg, AUG)

    def stop_after_three(h):
        if h["step"] == 2:
            raise Interrupt

    part = SegNet(model_cfg, seed=2)
    opt = SGD(part.params.named(), tcfg.momentum)
    with pytest.raises(Interrupt):
        pretrain(part, x, y, tcfg, lcfg, AUG, optimizer=opt, progress=stop_after_three)
    resumed, _ = pretrain(part, x, y, tcfg, lcfg, AUG, start_step=3, optimizer=opt)
    assert [h["loss"] for h in resumed] == [h["loss"] for h in hist[3:]]
    assert part.content_hash() == full.content_hash()


def test_nan_aborts_with_diagnostic():
    x, y = stack_split(scenes(source_domain, 6, 8))
    x[3] = np.nan
    m = SegNet(tiny_config(), seed=0)
    with pytest.raises(TrainingDiverged, match=r"step \d+ \(lr="):
        pretrain(m, x, y, TrainConfig(epochs=1), LossConfig(), AUG)


# -- adaptation ----------------------------------------------------------------

def test_none_equals_plain_eval(trained, stream):
    rep = adapt_stream(trained.copy(), stream, AdaptConfig(method="none"), AUG)
    cm = evaluate(trained, stream, "S", "eval", batch=1)
    assert rep.confusion == cm.counts.tolist()
    assert rep.final_miou == miou(cm)[1]


@pytest.mark.parametrize("method", ["trans-consistency", "min-entropy", "max-squares", "selective-ce",
                                    "special-ce", "bn-stats"])
def test_only_bn_changes(trained, stream, method):
    model = trained.copy()
    before = {g: model.params.group_hash(g) for g in ("bn", "conv", "head", "transformer")}
    # a low tau guarantees confident pixels, so selective-ce has a gradient
    rep = adapt_stream(model, stream[:4], AdaptConfig(method=method, lr=1e-2, tau=0.21), AUG)
    for g in ("conv", "head", "transformer"):
        assert model.params.group_hash(g) == before[g]
    if method != "bn-stats":
        assert model.params.group_hash("bn") != before["bn"]
    assert len(rep.trace) == 4
    assert all(p.requires_grad for _, p in model.params.named())


def test_adapt_deterministic(trained, stream):
    cfg = AdaptConfig(seed=3)
    a = adapt_stream(trained.copy(), stream, cfg, AUG)
    b = adapt_stream(trained.copy(), stream, cfg, AUG)
    assert (a.trace, a.losses, a.confusion) == (b.trace, b.losses, b.confusion)


def test_order_matters_except_for_none(trained, stream):
    a = adapt_stream(trained.copy(), stream, AdaptConfig(seed=0, lr=1e-2), AUG)
    b = adapt_stream(trained.copy(), stream, AdaptConfig(seed=1, lr=1e-2), AUG)
    assert a.order != b.order and a.trace != b.trace
    c = adapt_stream(trained.copy(), stream, AdaptConfig(method="none", seed=0), AUG)
    d = adapt_stream(trained.copy(), stream, AdaptConfig(method="none", seed=1), AUG)
    assert c.confusion == d.confusion


def test_continual_state_threading(trained, stream):
    seen = []
    model = trained.copy()
    adapt_stream(model, stream[:4], AdaptConfig(lr=1e-2), AUG,
                 probe=lambda i, m: seen.append(m.params.group_hash("bn")))
    seen.append(model.params.group_hash("bn"))
    assert len(set(seen)) == 5


def test_episodic_resets(trained, stream):
    seen = []
    model = trained.copy()
    start = model.params.group_hash("bn")
    adapt_stream(model, stream[:4], AdaptConfig(lr=1e-2, continual=False), AUG,
                 probe=lambda i, m: seen.append(m.params.group_hash("bn")))
    assert set(seen) == {start}


def test_non_finite_loss_skips_update(trained, stream, monkeypatch):
    import ttaseg.engine as engine
    monkeypatch.setattr(engine, "_adapt_loss", lambda *a: Tensor(np.array(np.nan), requires_grad=True))
    model = trained.copy()
    before = model.params.group_hash("bn")
    rep = adapt_stream(model, stream[:3], AdaptConfig(), AUG)
    assert len(rep.events) == 3 and model.params.group_hash("bn") == before


def test_shape_mismatch_aborts(trained):
    bad = [Scene(np.zeros((3, 16, 16), np.float32), np.zeros((8, 8), np.int64))]
    with pytest.raises(DimensionError):
        adapt_stream(trained.copy(), bad, AdaptConfig(), AUG)


def test_single_head_model_only_uu(stream):
    model = SegNet(tiny_config(use_transformer=False), seed=0)
    with pytest.raises(ConfigError):
        adapt_stream(model, stream, AdaptConfig(head_config="US"), AUG)
    with pytest.raises(ConfigError):
        head_config_sweep(model, stream, AdaptConfig(), AUG)


def test_head_sweep(trained, stream):
    reps = head_config_sweep(trained, stream[:3], AdaptConfig(), AUG)
    assert tuple(reps) == HEAD_CONFIGS
    assert len({tuple(r.order) for r in reps.values()}) == 1
    assert len({r.seed for r in reps.values()}) == 1


def test_inference_recomputes_transfer_matrix(trained, stream):
    model = trained.copy()
    calls = []
    orig = model.transformer.transfer_matrix
    model.transformer.transfer_matrix = lambda *a, **k: calls.append(1) or orig(*a, **k)
    adapt_stream(model, stream[:3], AdaptConfig(method="none", head_config="US"), AUG)
    assert len(calls) == 3


def test_k_sweep_shape_and_k1_match(trained, stream):
    base = AdaptConfig(seed=2)
    rows = transformation_count_sweep(trained, stream[:3], base, ks=(1, 2), aug=AUG)
    assert [(r["method"], r["K"]) for r in rows] == [(m, k) for m in ("min-entropy", "max-squares",
                                                                       "trans-consistency") for k in (1, 2)]
    solo = adapt_stream(trained.copy(), stream[:3], base, AUG)
    assert rows[4]["miou"] == solo.final_miou


def test_named_streams_independent():
    a = named_rng(0, "transforms").random(3)
    assert not np.array_equal(a, named_rng(0, "data").random(3))
    assert np.array_equal(a, named_rng(0, "transforms").random(3))


def test_adapt_config_validation():
    for bad in (dict(method="x"), dict(head_config="XY"), dict(K=0), dict(inference_bn="z"), dict(lr=0)):
        with pytest.raises(ConfigError):
            AdaptConfig(**bad).validate()


def test_bn_stats_uses_sample_statistics(trained, stream):
    none = adapt_stream(trained.copy(), stream, AdaptConfig(method="none"), AUG)
    bn = adapt_stream(trained.copy(), stream, AdaptConfig(method="bn-stats"), AUG)
    cm = evaluate(trained, stream, "S", "adapt", batch=1)
    assert bn.confusion == cm.counts.tolist()
    assert bn.confusion != none.confusion


def test_stream_mode_refreshes_running_stats(trained, stream):
    model = trained.copy()
    before = model.backbone.stats["block1.bn"].mean.copy()
    adapt_stream(model, stream[:3], AdaptConfig(method="bn-stats", inference_bn="stream"), AUG)
    assert not np.array_equal(model.backbone.stats["block1.bn"].mean, before)
    model = trained.copy()
    adapt_stream(model, stream[:3], AdaptConfig(method="trans-consistency"), AUG)
    assert np.array_equal(model.backbone.stats["block1.bn"].mean, before)
