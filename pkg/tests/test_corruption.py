import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mapctr.corruption import (
    STRATEGIES,
    Replacer,
    batch_rng,
    corrupt_count,
    corrupt_mask,
    corrupt_replace,
)
from mapctr.featurespace import FeatureMap


def _batch(rng, fmap, n):
    cols = [rng.integers(lo, lo + c, size=n) for lo, c in zip(fmap.offsets, fmap.cardinalities)]
    return np.stack(cols, 1)


@st.composite
def fmaps(draw, min_card=1):
    F = draw(st.integers(1, 8))
    cards = draw(st.lists(st.integers(min_card, 6), min_size=F, max_size=F))
    if max(cards) < 2:
        cards[0] = 2
    freq = draw(st.lists(st.integers(0, 9), min_size=sum(cards), max_size=sum(cards)))
    return FeatureMap.from_cardinalities(cards, freq)


def test_corrupt_count_examples():
    assert corrupt_count(0.3, 25) == 8
    assert corrupt_count(0.1, 4) == 1
    assert corrupt_count(0.5, 3) == 2  # 1.5 rounds half up
    with pytest.raises(ValueError):
        corrupt_count(0.0, 5)


@settings(max_examples=60, deadline=None)
@given(fmaps(), st.floats(0.01, 0.99), st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_mask_mode_invariants(fmap, gamma, seed, n):
    x = _batch(np.random.default_rng(seed), fmap, n)
    plan = corrupt_mask(x, fmap, gamma, np.random.default_rng(seed + 1))
    m = corrupt_count(gamma, fmap.num_fields)
    masked = plan.corrupted == fmap.mask_index
    assert np.all(masked.sum(axis=1) == m)
    np.testing.assert_array_equal(plan.corrupted[~masked], x[~masked])
    rows = np.arange(n)[:, None]
    assert np.all(masked[rows, plan.positions])
    np.testing.assert_array_equal(plan.originals, x[rows, plan.positions])
    assert np.all(plan.originals < fmap.mask_index)


@settings(max_examples=60, deadline=None)
@given(fmaps(), st.floats(0.01, 0.99), st.sampled_from(STRATEGIES), st.integers(0, 2**31 - 1),
       st.integers(1, 40))
def test_replace_mode_invariants(fmap, gamma, strategy, seed, n):
    x = _batch(np.random.default_rng(seed), fmap, n)
    plan = corrupt_replace(x, fmap, gamma, strategy, np.random.default_rng(seed + 1))
    eligible = fmap.cardinalities > 1 if strategy.startswith("field") else np.ones(fmap.num_fields, bool)
    m = min(corrupt_count(gamma, fmap.num_fields), int(eligible.sum()))
    # labels are a pure function of (x, x^c)
    np.testing.assert_array_equal(plan.labels, (plan.corrupted != x).astype(np.uint8))
    assert np.all(plan.labels.sum(axis=1) == m)
    assert np.all(plan.corrupted < fmap.mask_index)
    assert np.all(eligible[plan.positions])
    if strategy.startswith("field"):
        assert fmap.in_range(plan.corrupted)


def test_replace_needs_a_corruptible_field():
    fmap = FeatureMap.from_cardinalities([1, 1], [3, 3])
    with pytest.raises(ValueError):
        Replacer(fmap, "field-frequency")


def test_field_uniform_cardinality_two_is_forced():
    fmap = FeatureMap.from_cardinalities([2], [5, 5])
    x = np.zeros((200, 1), dtype=np.int64)
    plan = corrupt_replace(x, fmap, 0.5, "field-uniform", np.random.default_rng(0))
    assert np.all(plan.corrupted == 1)


def test_each_field_masked_with_frequency_m_over_f():
    F, n, gamma = 10, 10_000, 0.3
    fmap = FeatureMap.from_cardinalities([3] * F, [1] * (3 * F))
    x = _batch(np.random.default_rng(0), fmap, n)
    plan = corrupt_mask(x, fmap, gamma, np.random.default_rng(1))
    p = corrupt_count(gamma, F) / F
    freq = (plan.corrupted == fmap.mask_index).mean(axis=0)
    assert np.all(np.abs(freq - p) < 3 * math.sqrt(p * (1 - p) / n))


def test_global_uniform_replacement_chi_square():
    fmap = FeatureMap.from_cardinalities([4, 3], [1] * 7)
    x = np.tile([[4, 4]], (10_000, 1))  # original global index 4 in field 1
    x[:, 0] = 0
    rng = np.random.default_rng(7)
    rep = Replacer(fmap, "global-uniform")
    draws = rep.draw(np.ones(10_000, dtype=np.int64), np.full(10_000, 4), rng)
    assert not np.any(draws == 4)
    counts = np.bincount(draws, minlength=7)
    assert stats.chisquare(np.delete(counts, 4)).pvalue > 0.0027


def test_field_frequency_replacement_follows_renormalized_law():
    # field 0 holds {a: 1, b: 3, c: 6}; replacing a draws b:c at 3:6
    fmap = FeatureMap.from_cardinalities([3], [1, 3, 6])
    rep = Replacer(fmap, "field-frequency")
    draws = rep.draw(np.zeros(20_000, dtype=np.int64), np.zeros(20_000, dtype=np.int64),
                     np.random.default_rng(3))
    counts = np.bincount(draws, minlength=3)
    assert counts[0] == 0
    assert stats.chisquare(counts[1:], np.array([3, 6]) / 9 * 20_000).pvalue > 0.0027


def test_same_stream_key_gives_identical_plan():
    fmap = FeatureMap.from_cardinalities([3, 4, 5], np.arange(1, 13))
    x = _batch(np.random.default_rng(0), fmap, 64)
    a = corrupt_replace(x, fmap, 0.4, "field-frequency", batch_rng(9, 2, 5, 1))
    b = corrupt_replace(x, fmap, 0.4, "field-frequency", batch_rng(9, 2, 5, 1))
    c = corrupt_replace(x, fmap, 0.4, "field-frequency", batch_rng(9, 2, 6, 1))
    np.testing.assert_array_equal(a.corrupted, b.corrupted)
    assert not np.array_equal(a.corrupted, c.corrupted)
