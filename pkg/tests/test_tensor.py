"""Tensor engine: forward semantics against naive oracles, backward wiring."""

import numpy as np
import pytest

from srmae import tensor as T
from srmae.errors import ConfigurationError, NumericError, ShapeError, UsageError
from srmae.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(eye, b).data, b.data)


def test_matmul_row_times_column():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(11.0)


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(got - expected).max() < 1e-6


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# -- softmax --------------------------------------------------------------


def test_softmax_uniform_on_constant():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data
    assert np.allclose(out, [1 / 3] * 3)


def test_softmax_stable_at_extreme_logits():
    out = T.softmax(Tensor([1000.0, 0.0, 0.0]), axis=0).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_matches_direct_formula(rng):
    x = rng.normal(size=12)
    expected = np.exp(x) / np.exp(x).sum()
    assert np.abs(T.softmax(Tensor(x), axis=0).data - expected).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(4, 9))
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-5
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- layernorm ------------------------------------------------------------


def test_layernorm_constant_input_is_zero():
    x = Tensor(np.full((2, 5), 3.7))
    out = T.layernorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-6)
    assert np.abs(out.data).max() < 1e-3


def test_layernorm_analytic_three_values():
    out = T.layernorm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    root = np.sqrt(1.5)
    assert np.allclose(out.data[0], [-root, 0.0, root])


def test_layernorm_statistics(rng):
    x = rng.normal(size=(6, 32), scale=4.0) + 2.0
    out = T.layernorm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_layernorm_rejects_wrong_affine_shape():
    with pytest.raises(ShapeError):
        T.layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# -- gelu -----------------------------------------------------------------


def test_gelu_zero_and_asymptotes():
    out = T.gelu(Tensor([0.0, 20.0, -20.0])).data
    assert out[0] == pytest.approx(0.0)
    assert out[1] == pytest.approx(20.0, rel=1e-6)
    assert out[2] == pytest.approx(0.0, abs=1e-6)


# -- conv2d ---------------------------------------------------------------


def test_conv2d_1x1_identity(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(Tensor(x), w, stride=1, padding=0)
    assert np.allclose(out.data, x)


def test_conv2d_averaging_constant_interior():
    x = Tensor(np.full((1, 1, 6, 6), 2.5))
    w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = T.conv2d(x, w, stride=1, padding=0).data
    assert np.allclose(out, 2.5)


def _conv_oracle(x, w, b, stride, padding):
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bsz, o, oh, ow))
    for n in range(bsz):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[f]
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[n, ch, i * stride + di, j * stride + dj] * w[f, ch, di, dj]
                    out[n, f, i, j] = acc
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_nested_loop_oracle(rng, stride, padding):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    expected = _conv_oracle(x, w, b, stride, padding)
    assert np.abs(got - expected).max() < 1e-5


def test_conv2d_nonpositive_output_is_config_error():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# -- resize ops -----------------------------------------------------------


def test_interpolate_identity(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    assert np.array_equal(T.interpolate_nearest(Tensor(x), 4, 4).data, x)


def test_interpolate_exact_factor_replicates_blocks(rng):
    x = rng.normal(size=(1, 1, 2, 2))
    out = T.interpolate_nearest(Tensor(x), 4, 4).data
    for i in range(4):
        for j in range(4):
            assert out[0, 0, i, j] == x[0, 0, i // 2, j // 2]


def test_downsample_area_shapes_and_factor_errors():
    x = Tensor(np.zeros((1, 3, 224, 224)))
    assert T.downsample_area(x, 4).shape == (1, 3, 56, 56)
    with pytest.raises(ConfigurationError):
        T.downsample_area(x, 5)


def test_downsample_constant_preserved():
    for s in (2, 3, 4):
        x = Tensor(np.full((1, 1, 12, 12), 0.37))
        assert np.allclose(T.downsample_area(x, s).data, 0.37)


def test_downsample_matches_block_mean_oracle():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.downsample_area(Tensor(x), 2).data
    expected = np.array([[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                         [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]])
    assert np.array_equal(out[0, 0], expected)


def test_downsample_preserves_mean_for_divisible_extents(rng):
    x = rng.random((2, 3, 12, 12))
    out = T.downsample_area(Tensor(x), 3).data
    assert abs(out.mean() - x.mean()) < 1e-6


# -- backward semantics ---------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_sum_of_squares_analytic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        T.tsum(x, axis=0).backward()


def test_second_backward_without_reforward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_shared_subgraph_cannot_be_consumed_twice():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.tsum(y).backward()
    with pytest.raises(UsageError):
        T.tsum(T.mul(y, y)).backward()


def test_grad_accumulates_over_fanout():
    x = Tensor([2.0], requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1
    y.backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_nonfinite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        T.scale(Tensor([1e308], dtype=np.float64), 1e308)


# -- gather / permutation -------------------------------------------------


def test_index_select_round_trip_identity(rng):
    x = rng.normal(size=(3, 8))
    perm = rng.permutation(8)
    inv = np.argsort(perm)
    out = T.index_select(T.index_select(Tensor(x), perm, axis=1), inv, axis=1)
    assert np.array_equal(out.data, x)


def test_gather_tokens_per_sample(rng):
    x = rng.normal(size=(2, 5, 3))
    idx = np.array([[4, 0], [1, 1]])
    out = T.gather_tokens(Tensor(x), idx).data
    assert np.array_equal(out[0], x[0, [4, 0]])
    assert np.array_equal(out[1], x[1, [1, 1]])


def test_dropout_train_mode_scaling(rng):
    x = Tensor(np.ones((1000,)), requires_grad=True)
    out = T.dropout(x, 0.25, rng)
    kept = out.data != 0
    assert abs(kept.mean() - 0.75) < 0.05
    assert np.allclose(out.data[kept], 1.0 / 0.75)


def test_no_grad_skips_recording():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad
