import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttaseg import autodiff as ad
from ttaseg.autodiff import DimensionError, GradcheckError, GraphError, Tensor, gradcheck


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def weighted(out, rng):
    """Random fixed projection so gradients differ per output element."""
    c = rng.standard_normal(out.shape)
    return lambda t: (t * Tensor(c)).sum()


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_sparse():
    out = Tensor([[1, 0]]) @ Tensor([[0], [5]])
    np.testing.assert_array_equal(out.data, [[0]])


def test_matmul_gradcheck(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    assert gradcheck(lambda: (a @ b).sum(), [a, b]) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_batched_matmul_gradcheck(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    c = rng.standard_normal((2, 3, 5))
    assert gradcheck(lambda: ((a @ b) * Tensor(c)).sum(), [a, b]) < 1e-4


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.random((1, 1, 5, 5)))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_input():
    out = ad.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.ones((3, 2, 3, 3))))
    assert out.shape == (1, 3, 5, 5)
    assert not out.data.any()


def test_conv_gradcheck(rng):
    x, w = param(rng, 1, 2, 5, 5), param(rng, 3, 2, 3, 3)
    f = weighted(ad.conv2d(x, w), rng)
    assert gradcheck(lambda: f(ad.conv2d(x, w)), [x, w]) < 1e-4


def test_conv_strided_bias_gradcheck(rng):
    x, w, b = param(rng, 2, 3, 7, 7), param(rng, 4, 3, 3, 3), param(rng, 4)
    f = weighted(ad.conv2d(x, w, b, stride=2), rng)
    assert ad.conv2d(x, w, b, stride=2).shape == (2, 4, 4, 4)
    assert gradcheck(lambda: f(ad.conv2d(x, w, b, stride=2)), [x, w, b]) < 1e-4


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channel"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# -- softmax / layernorm -------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4)


def test_softmax_large_logit_is_stable():
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_gradcheck(rng):
    v = param(rng, 5)
    c = rng.standard_normal(5)
    assert gradcheck(lambda: (ad.softmax(v) * Tensor(c)).sum(), [v]) < 1e-4


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4)), st.sampled_from([0, 1]))
def test_softmax_sums_to_one(x, axis):
    out = ad.softmax(Tensor(x), axis=axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    assert (out >= 0).all()


def test_layernorm_constant_row():
    out = ad.layernorm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layernorm_unit_std_row():
    with ad.precision(np.float64):
        out = ad.layernorm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layernorm_gradcheck(rng):
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    c = rng.standard_normal((3, 6))
    assert gradcheck(lambda: (ad.layernorm(x, g, b) * Tensor(c)).sum(), [x, g, b]) < 1e-4


# -- batchnorm ---------------------------------------------------------------

def test_batchnorm_normalized_input_passes_through(rng):
    x = rng.standard_normal((4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), ad.RunningStats(2), "train")
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batchnorm_constant_output(rng):
    out = ad.batchnorm2d(Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(np.zeros(3)),
                         Tensor(np.full(3, 5.0)), ad.RunningStats(3), "train")
    np.testing.assert_array_equal(out.data, np.full((2, 3, 4, 4), 5.0))


@pytest.mark.parametrize("mode", ["train", "adapt", "eval"])
def test_batchnorm_gradcheck(rng, mode):
    stats = ad.RunningStats(3)
    stats.update(rng.standard_normal(3), rng.random(3) + 0.5)
    x, g, b = param(rng, 2, 3, 4, 4), param(rng, 3), param(rng, 3)
    c = rng.standard_normal((2, 3, 4, 4))
    err = gradcheck(lambda: (ad.batchnorm2d(x, g, b, stats, mode) * Tensor(c)).sum(), [x, g, b])
    assert err < 1e-4


def test_batchnorm_eval_requires_running_stats(rng):
    with pytest.raises(GraphError, match="running statistics"):
        ad.batchnorm2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       ad.RunningStats(2), "eval")


def test_batchnorm_adapt_mode_leaves_running_stats(rng):
    stats = ad.RunningStats(3)
    stats.update(np.ones(3), np.full(3, 2.0))
    before = (stats.mean.copy(), stats.var.copy())
    ad.batchnorm2d(Tensor(rng.standard_normal((1, 3, 5, 5))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                   stats, "adapt")
    np.testing.assert_array_equal(stats.mean, before[0])
    np.testing.assert_array_equal(stats.var, before[1])


def test_batchnorm_train_updates_running_stats(rng):
    stats = ad.RunningStats(2)
    x = rng.standard_normal((4, 2, 3, 3)) + 3.0
    ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    assert stats.initialized


# -- dropout -----------------------------------------------------------------

def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.random((3, 3)))
    assert ad.dropout(x, 0.0, rng, True) is x


def test_dropout_inactive_is_identity(rng):
    x = Tensor(rng.random((3, 3)))
    assert ad.dropout(x, 0.9, rng, False) is x


def test_dropout_inverted_scaling_mean():
    out = ad.dropout(Tensor(np.ones(10 ** 5)), 0.5, np.random.default_rng(0), True)
    assert 0.98 <= out.data.mean() <= 1.02
    assert set(np.unique(out.data)) <= {0.0, 2.0}


# -- other primitives ----------------------------------------------------------

PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (ad.square(b) + 1.0),
    "broadcast_add": lambda a, b: a + b[:1],
    "relu": lambda a, b: ad.relu(a),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.square(a) + 0.5),
    "square": lambda a, b: ad.square(a),
    "abs": lambda a, b: ad.abs_(a),
    "sum_axis": lambda a, b: a.sum(axis=1, keepdims=True) * b,
    "mean_axis": lambda a, b: a.mean(axis=(0, 2)),
    "concat": lambda a, b: ad.concatenate([a, b], axis=1),
    "slice": lambda a, b: a[:, 1:3],
    "permute": lambda a, b: a.permute(2, 0, 1),
    "transpose": lambda a, b: a.T,
    "reshape": lambda a, b: a.reshape(4, -1),
    "rot90": lambda a, b: ad.rot90(a, 1),
    "crop": lambda a, b: ad.crop(a, 0, 1, 2, 3),
    "patch_permute": lambda a, b: ad.patch_permute(a, 2, [3, 1, 0, 2]),
    "upsample": lambda a, b: ad.upsample_bilinear(a.reshape(1, 2, 4, 4), (8, 6)),
    "log_softmax": lambda a, b: ad.log_softmax(a, axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name, rng):
    a, b = param(rng, 2, 4, 4), param(rng, 2, 4, 4)
    fn = PRIMITIVES[name]
    c = rng.standard_normal(fn(a, b).shape)
    assert gradcheck(lambda: (fn(a, b) * Tensor(c)).sum(), [a, b]) < 1e-4


def test_rot90_matches_numpy():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.rot90(x, 2).data, [[4, 3], [2, 1]])


def test_bilinear_matrix_rows_sum_to_one():
    m = ad.bilinear_matrix(64, 16)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)


# -- graph semantics ---------------------------------------------------------

def test_gradcheck_sum_is_exact(rng):
    x = param(rng, 3, 2)
    assert gradcheck(lambda: x.sum(), [x]) < 1e-10


def test_gradcheck_rejects_non_finite():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with pytest.raises(GradcheckError, match="non-finite"):
        gradcheck(lambda: ad.log(x).sum(), [x])


def test_gradcheck_restores_float32(rng):
    x = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
    gradcheck(lambda: ad.square(x).sum(), [x])
    assert x.dtype == np.float32
    assert x.grad is None


def test_backward_twice_is_an_error(rng):
    x = param(rng, 3)
    y = ad.square(x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_shared_subexpression_accumulates(rng):
    x = param(rng, 4)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-6)


def test_no_grad_builds_no_graph(rng):
    x = param(rng, 3)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad


def test_identical_seeds_give_identical_gradients():
    def run():
        r = np.random.default_rng(5)
        x = Tensor(r.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(r.standard_normal((4, 3, 3, 3)), requires_grad=True)
        out = ad.dropout(ad.relu(ad.conv2d(x, w)), 0.3, np.random.default_rng(9), True)
        ad.softmax(out, axis=1).mean().backward()
        return x.grad, w.grad

    (gx1, gw1), (gx2, gw2) = run(), run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_precision_context_restores_dtype():
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -- container ---------------------------------------------------------------

def test_container_round_trip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    ad.save_container(tmp_path / "c.bin", arrays, {"note": "x"})
    back, meta = ad.load_container(tmp_path / "c.bin")
    assert meta == {"note": "x"}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_container_layout_is_documented_bytes(tmp_path):
    ad.save_container(tmp_path / "c.bin", {"w": np.array([1.0, -2.0], dtype=np.float32)})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"TTACKPT1"
    n = int.from_bytes(raw[8:16], "little")
    import json
    header = json.loads(raw[16:16 + n])
    assert header["entries"] == [{"name": "w", "dtype": "f32", "shape": [2], "offset": 0, "nbytes": 8}]
    assert raw[16 + n:] == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_container_rejects_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" * 8)
    with pytest.raises(ValueError, match="magic"):
        ad.load_container(tmp_path / "x.bin")


def test_gradcheck_handles_transposed_storage():
    w = Tensor(np.asfortranarray(np.arange(6.0).reshape(2, 3)) * 0.1, requires_grad=True)
    assert not w.data.flags.c_contiguous
    assert gradcheck(lambda: ad.square(w).sum(), [w]) < 1e-6
