import numpy as np
import pytest
from hypothesis import given, strategies as st

from dwshare import layers as L
from dwshare.errors import InvalidArgumentError, ShapeError, StateError
from dwshare.tensor import make_rng
from oracles import argmax_lowest, block_diagonal, bn_loop, composed, conv_loop, depthwise_loop


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [(5, 5), (6, 7)])
def test_conv_matches_loop(rng, stride, size):
    x = rng.standard_normal((2, 3, *size))
    w = rng.standard_normal((3, 3, 3, 4))
    got = L.conv2d_forward(x, w, stride)
    np.testing.assert_allclose(got, conv_loop(x, w, stride), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_matches_loop(rng, stride):
    x = rng.standard_normal((2, 4, 7, 6))
    w = rng.standard_normal((3, 3, 4))
    np.testing.assert_allclose(L.depthwise_forward(x, w, stride), depthwise_loop(x, w, stride), atol=1e-12)


def test_pointwise_is_channel_mixing(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 6))
    ref = np.einsum("nmhw,mk->nkhw", x, w)
    np.testing.assert_allclose(L.pointwise_forward(x, w), ref, atol=1e-12)
    np.testing.assert_allclose(L.pointwise_forward(x, w, 2), ref[:, :, ::2, ::2], atol=1e-12)


def test_output_size_rounds_up(rng):
    x = rng.standard_normal((1, 2, 7, 8))
    assert L.depthwise_forward(x, np.ones((3, 3, 2)), 2).shape == (1, 2, 4, 4)
    assert L.conv2d_forward(x, np.ones((3, 3, 2, 5)), 2).shape == (1, 5, 4, 4)


def test_separable_pair_table_counts():
    assert np.ones((3, 3, 64, 64)).size == 36864
    assert np.ones((3, 3, 64)).size + np.ones((64, 64)).size == 4672


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.integers(1, 4), st.integers(1, 4), st.integers(3, 7))
def test_separable_equals_composed_standard(seed, stride, m, n, h):
    g = make_rng(seed)
    x = g.standard_normal((2, m, h, h + 1))
    dw = g.standard_normal((3, 3, m))
    pw = g.standard_normal((m, n))
    sep = L.pointwise_forward(L.depthwise_forward(x, dw, stride), pw)
    std = L.conv2d_forward(x, composed(dw, pw), stride)
    np.testing.assert_allclose(sep, std, rtol=0, atol=1e-12)
    np.testing.assert_allclose(L.depthwise_forward(x, dw, stride),
                               L.conv2d_forward(x, block_diagonal(dw), stride), rtol=0, atol=1e-12)


@pytest.mark.skipif(not L.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_jit_and_numpy_paths_agree(rng, monkeypatch, dtype, stride):
    x = rng.standard_normal((3, 5, 9, 8)).astype(dtype)
    w = rng.standard_normal((3, 3, 5)).astype(dtype)
    g = rng.standard_normal((3, 5, -(-9 // stride), -(-8 // stride))).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-12

    def run():
        layer = L.Depthwise(stride)
        out = layer.forward(x, w)
        dx, pg = layer.backward(g)
        bn = L.BatchNorm()
        p = L.BatchNormParams.fresh(5, dtype)
        y = bn.forward(x, p, True)
        by, bg = bn.backward(x)
        return out, dx, pg["weights"], y, by, bg["scale"], p.running_var

    jit = run()
    monkeypatch.setattr(L, "USE_JIT", False)
    ref = run()
    for a, b in zip(jit, ref):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


def test_batchnorm_train_matches_loop(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    p = L.BatchNormParams.fresh(3, np.float64)
    p.scale[:] = [1.0, 2.0, 0.5]
    p.shift[:] = [0.0, -1.0, 3.0]
    out = L.batchnorm_forward(x, p, train=True)
    np.testing.assert_allclose(out, bn_loop(x, p.scale, p.shift, p.epsilon), atol=1e-10)


def test_batchnorm_running_stats_unbiased(rng):
    x = rng.standard_normal((2, 1, 3, 3))
    p = L.BatchNormParams.fresh(1, np.float64)
    L.BatchNorm().forward(x, p, True)
    assert p.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert p.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    p = L.BatchNormParams.fresh(2, np.float64)
    p.running_mean[:] = [1.0, -1.0]
    p.running_var[:] = [4.0, 0.25]
    out = L.batchnorm_forward(x, p, train=False)
    ref = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var[None, :, None, None] + p.epsilon)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_batchnorm_needs_two_values():
    with pytest.raises(ShapeError):
        L.BatchNorm().forward(np.ones((1, 2, 1, 1)), L.BatchNormParams.fresh(2, np.float64), True)


def test_softmax_xent_values(rng):
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    loss, probs = L.softmax_xent(logits, labels)
    ref = -np.mean([np.log(np.exp(r[y]) / np.exp(r).sum()) for r, y in zip(logits, labels)])
    assert loss == pytest.approx(ref, rel=1e-12)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        L.softmax_xent(logits, np.array([0, 1, 2, 3, 4]))


def test_softmax_is_stable_for_large_logits():
    p = L.softmax(np.array([[1000.0, 1000.0, -1000.0]]), axis=1)
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_argmax_tie_break_lowest():
    row = np.array([0.1, 0.7, 0.7, 0.2])
    assert np.argmax(row) == argmax_lowest(row) == 1


def test_gap_and_linear(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(L.global_avg_pool(x), x.mean(axis=(2, 3)))
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
    np.testing.assert_allclose(L.linear_forward(L.global_avg_pool(x), w, b), x.mean(axis=(2, 3)) @ w + b)


def test_backward_without_forward_is_an_error():
    for layer in (L.Conv2d(), L.Depthwise(), L.Pointwise(), L.BatchNorm(), L.ReLU(), L.Linear()):
        with pytest.raises(StateError):
            layer.backward(np.ones((1, 1, 1, 1)))


def test_bad_stride_and_kernel(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    with pytest.raises(InvalidArgumentError):
        L.depthwise_forward(x, np.ones((3, 3, 2)), 3)
    with pytest.raises((InvalidArgumentError, ShapeError)):
        L.depthwise_forward(x, np.ones((2, 2, 2)), 1)
    with pytest.raises(ShapeError):
        L.pointwise_forward(x, np.ones((3, 2)))
