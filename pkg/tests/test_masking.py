"""Masking strategy: permutation bookkeeping, distribution, gradient routing."""

import itertools

import numpy as np
import pytest
from scipy import stats

from srmae import tensor as T
from srmae.errors import ConfigurationError, ShapeError
from srmae.masking import MaskSpec, generate_mask, split_visible, splice_full, visible_count
from srmae.tensor import Tensor


def test_visible_count_paper_geometry():
    assert visible_count(196, 0.75) == 49


@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.75])
def test_visible_count_round_half_up_sweep(ratio):
    for n in range(4, 257):
        expected = int(np.floor(n * (1.0 - ratio) + 0.5))
        assert visible_count(n, ratio) == max(1, min(n, expected))


def test_ratio_zero_keeps_everything():
    rng = np.random.default_rng(0)
    m = generate_mask(16, 0.0, rng, batch=3)
    assert m.n_visible == 16
    assert np.all(m.binary_mask() == 1.0)


def test_ratio_one_rejected():
    with pytest.raises(ConfigurationError):
        generate_mask(16, 1.0, np.random.default_rng(0))


def test_visibility_frequency_uniform():
    rng = np.random.default_rng(5)
    n, ratio, draws = 16, 0.75, 10_000
    counts = np.zeros(n)
    for _ in range(draws):
        m = generate_mask(n, ratio, rng)
        counts[m.visible_idx[0]] += 1
    freq = counts / draws
    assert np.abs(freq - (1 - ratio)).max() < 0.02


def test_chi_square_subset_uniformity():
    # N=5, ratio=0.4 -> 3 visible, C(5,3)=10 equally likely subsets
    rng = np.random.default_rng(11)
    n, draws = 5, 100_000
    subsets = {frozenset(c): i for i, c in enumerate(itertools.combinations(range(n), 3))}
    counts = np.zeros(len(subsets))
    for _ in range(draws):
        m = generate_mask(n, 0.4, rng)
        counts[subsets[frozenset(m.visible_idx[0].tolist())]] += 1
    chi2 = ((counts - draws / 10) ** 2 / (draws / 10)).sum()
    assert chi2 < stats.chi2.ppf(0.99, df=9)


def test_split_visible_direct_definition():
    m = MaskSpec(perm=np.array([[2, 0, 3, 1]]), n_visible=2, ratio=0.5)
    tokens = Tensor(np.arange(4, dtype=np.float64).reshape(1, 4, 1) * 10)
    visible, masked_positions = split_visible(tokens, m)
    assert visible.data[0, :, 0].tolist() == [20.0, 0.0]
    assert masked_positions[0].tolist() == [3, 1]


def test_split_visible_rejects_length_mismatch():
    m = MaskSpec(perm=np.array([[0, 1, 2]]), n_visible=2, ratio=0.3)
    with pytest.raises(ShapeError):
        split_visible(Tensor(np.zeros((1, 4, 2))), m)


def test_splice_rejects_dim_mismatch():
    m = MaskSpec(perm=np.array([[1, 0, 2]]), n_visible=1, ratio=0.6)
    with pytest.raises(ShapeError):
        splice_full(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 2, 8))), m)


def test_split_splice_round_trip():
    rng = np.random.default_rng(3)
    tokens = Tensor(rng.normal(size=(4, 12, 6)))
    m = generate_mask(12, 0.5, rng, batch=4)
    visible, masked_positions = split_visible(tokens, m)
    lr = T.gather_tokens(tokens, masked_positions)
    restored = splice_full(visible, lr, m)
    assert np.array_equal(restored.data, tokens.data)


def test_splice_exhaustive_over_all_permutations_n4():
    # sentinel tokens encode (stream, original position); verify layout for
    # every permutation of 4 patches
    for perm in itertools.permutations(range(4)):
        m = MaskSpec(perm=np.array([perm]), n_visible=2, ratio=0.5)
        visible = Tensor(np.array([[[100 + perm[0]], [100 + perm[1]]]], dtype=np.float64))
        lr = Tensor(np.array([[[200 + perm[2]], [200 + perm[3]]]], dtype=np.float64))
        out = splice_full(visible, lr, m).data[0, :, 0]
        mask = m.binary_mask()[0]
        for j in range(4):
            expected = (100 if mask[j] else 200) + j
            assert out[j] == expected


def test_gradient_flows_only_into_source_stream():
    rng = np.random.default_rng(9)
    m = generate_mask(6, 0.5, rng, batch=2)
    visible = Tensor(rng.normal(size=(2, m.n_visible, 3)), requires_grad=True)
    lr = Tensor(rng.normal(size=(2, 6 - m.n_visible, 3)), requires_grad=True)
    out = splice_full(visible, lr, m)
    # weight only the masked positions: visible stream must get zero grad
    weights = (1.0 - m.binary_mask())[:, :, None]
    T.tsum(T.mul(out, Tensor(weights))).backward()
    assert np.all(visible.grad == 0)
    assert np.all(lr.grad == 1)


def test_mask_serialization_fields():
    rng = np.random.default_rng(0)
    m = generate_mask(10, 0.3, rng, batch=2)
    assert m.batch == 2 and m.n_patches == 10
    assert sorted(m.perm[0].tolist()) == list(range(10))
    assert m.binary_mask().sum(axis=1).tolist() == [m.n_visible] * 2
