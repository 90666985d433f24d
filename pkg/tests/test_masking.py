"""Grating, random and ablation mask construction plus merging."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffad.masking import (POLICY_SENTINEL, MaskPair, MaskingConfig,
                            ablation_mask, grating_masks, merge_imputations,
                            random_mask, random_mask_pair)


def test_grating_default_segments():
    pair = grating_masks(100, 2, 5, 5)
    masked_rows = np.flatnonzero(pair.m0[:, 0] == 0)
    expected = np.concatenate([np.arange(s, s + 10) for s in
                               (0, 20, 40, 60, 80)])
    assert np.array_equal(masked_rows, expected)
    assert np.array_equal(pair.m0 + pair.m1, np.ones((100, 2)))


def test_grating_smallest_case():
    pair = grating_masks(4, 1, 1, 1)
    assert pair.m0[:, 0].tolist() == [0, 0, 1, 1]
    assert pair.m1[:, 0].tolist() == [1, 1, 0, 0]


def test_grating_feature_uniform():
    pair = grating_masks(40, 7, 2, 2)
    assert np.all(pair.m0 == pair.m0[:, :1])
    assert np.all(pair.m1 == pair.m1[:, :1])


def test_grating_errors():
    with pytest.raises(ValueError, match="n_masked == n_unmasked"):
        grating_masks(100, 2, 5, 4)
    with pytest.raises(ValueError, match="W=101.*10"):
        grating_masks(101, 2, 5, 5)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 10))
def test_grating_complementarity_property(n, K, seg_len):
    W = 2 * n * seg_len
    pair = grating_masks(W, K, n, n)
    assert np.array_equal(pair.m0 + pair.m1, np.ones((W, K)))
    assert np.all(pair.m0 == pair.m0[:, :1])


def test_random_mask_fraction_and_determinism():
    m = random_mask(100, 100, 0.5, np.random.default_rng(0))
    frac = 1 - m.mean()
    assert abs(frac - 0.5) < 0.02
    m2 = random_mask(100, 100, 0.5, np.random.default_rng(0))
    assert np.array_equal(m, m2)


def test_random_mask_degenerate_guard():
    # tiny windows with extreme probabilities must still terminate mixed
    for seed in range(20):
        m = random_mask(1, 2, 0.01, np.random.default_rng(seed))
        assert m.sum() == 1
        m = random_mask(1, 2, 0.99, np.random.default_rng(seed))
        assert m.sum() == 1


def test_random_mask_pair_complementary():
    pair = random_mask_pair(10, 3, 0.5, np.random.default_rng(1))
    assert np.array_equal(pair.m0 + pair.m1, np.ones((10, 3)))
    assert pair.policy_ids == (POLICY_SENTINEL, POLICY_SENTINEL)


def test_ablation_masks():
    m = ablation_mask(100, 4, "forecasting")
    assert np.all(m[:50] == 1) and np.all(m[50:] == 0)
    m = ablation_mask(6, 2, "reconstruction")
    assert np.all(m == 0)
    with pytest.raises(ValueError):
        ablation_mask(3, 1, "forecasting")
    with pytest.raises(ValueError):
        ablation_mask(4, 1, "interpolation")


def test_merge_basic_and_invariance():
    pair = grating_masks(4, 1, 1, 1)
    merged = merge_imputations(np.ones((4, 1)), 2 * np.ones((4, 1)), pair)
    assert merged[:, 0].tolist() == [1, 1, 2, 2]
    # values of pred0 at its observed cells must not matter
    junk = np.ones((4, 1))
    junk[2:] = 99.0
    merged2 = merge_imputations(junk, 2 * np.ones((4, 1)), pair)
    assert np.array_equal(merged, merged2)


def test_merge_full_coverage():
    pair = grating_masks(100, 5, 5, 5)
    p0 = np.full((100, 5), 1.0)
    p1 = np.full((100, 5), 2.0)
    merged = merge_imputations(p0, p1, pair)
    from_p0 = (merged == 1.0)
    from_p1 = (merged == 2.0)
    assert np.all(from_p0 ^ from_p1)
    assert np.array_equal(from_p0, pair.m0 == 0)


def test_merge_shape_mismatch():
    pair = grating_masks(4, 1, 1, 1)
    with pytest.raises(ValueError):
        merge_imputations(np.ones((4, 2)), np.ones((4, 1)), pair)


def test_mask_pair_rejects_non_complementary():
    with pytest.raises(ValueError):
        MaskPair(m0=np.ones((2, 2)), m1=np.ones((2, 2)))


def test_masking_config_passes():
    cfg = MaskingConfig()
    passes = cfg.passes(20, 3)
    assert [p for _, p in passes] == [0, 1]
    cfg = MaskingConfig(strategy="reconstruction")
    passes = cfg.passes(20, 3)
    assert len(passes) == 1 and passes[0][1] == POLICY_SENTINEL
    assert np.all(passes[0][0] == 0)
    cfg = MaskingConfig(strategy="forecasting")
    passes = cfg.passes(20, 3)
    assert len(passes) == 1
    cfg = MaskingConfig(strategy="random")
    passes = cfg.passes(20, 3, np.random.default_rng(0))
    assert len(passes) == 2
    with pytest.raises(ValueError):
        MaskingConfig(strategy="learned")


def test_masking_config_round_trip():
    cfg = MaskingConfig(strategy="random", miss_prob=0.3)
    assert MaskingConfig.from_dict(cfg.to_dict()) == cfg
