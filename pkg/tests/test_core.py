import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import trapezoid

from difs.core import SeededRng, blocks, gaussian_logpdf, gaussian_sample, parallel_map, quantile


def test_gaussian_sample_law_of_large_numbers():
    rng = SeededRng(3)
    x = gaussian_sample(np.zeros(3), np.ones(3), rng, n=100_000)
    assert x.shape == (100_000, 3)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_gaussian_sample_single_vector():
    x = gaussian_sample([1.0, 2.0], [0.5, 0.5], SeededRng(1))
    assert x.shape == (2,)


@pytest.mark.parametrize("var", [[0.0, 1.0], [1.0, -2.0]])
def test_gaussian_sample_rejects_nonpositive_variance(var):
    with pytest.raises(ValueError):
        gaussian_sample([0.0, 0.0], var, SeededRng(0))


def test_gaussian_sample_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        gaussian_sample([0.0, 0.0], [1.0], SeededRng(0))


def test_same_seed_same_stream():
    a = gaussian_sample(np.zeros(5), np.ones(5), SeededRng(42))
    b = gaussian_sample(np.zeros(5), np.ones(5), SeededRng(42))
    assert np.array_equal(a, b)


def test_children_independent_of_parent_consumption():
    parent = SeededRng(7)
    c1 = parent.child("sample", 3).normal(4)
    parent.normal(1000)
    c2 = parent.child("sample", 3).normal(4)
    assert np.array_equal(c1, c2)
    assert not np.array_equal(c1, parent.child("sample", 4).normal(4))


def test_seed_range():
    with pytest.raises(ValueError):
        SeededRng(-1)
    SeededRng(2**64 - 1)


def test_logpdf_closed_forms():
    assert gaussian_logpdf([0.0], [0.0], [1.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_logpdf([0.0], [0.0], [1.0]) == pytest.approx(-0.9189385, abs=1e-7)
    assert gaussian_logpdf([1.0, 1.0], [0.0, 0.0], [1.0, 1.0]) == pytest.approx(-2.8378771, abs=1e-7)


def test_logpdf_maximal_at_mean():
    mean, var = np.array([0.3, -1.0]), np.array([0.5, 2.0])
    peak = gaussian_logpdf(mean, mean, var)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert gaussian_logpdf(mean + rng.normal(size=2), mean, var) < peak


def test_logpdf_integrates_to_one():
    grid = np.linspace(-8, 8, 4001)
    dens = np.exp(gaussian_logpdf(grid[:, None], [0.0], [1.0]))
    assert abs(trapezoid(dens, grid) - 1.0) < 1e-3


def test_logpdf_dimension_mismatch():
    with pytest.raises(ValueError):
        gaussian_logpdf([0.0, 1.0], [0.0], [1.0])


def test_quantile_examples():
    assert quantile([3, 1, 2], 0.5) == 2
    assert quantile([5], 0.3) == 5
    assert quantile([4, -2, 9], 0.0) == -2
    assert quantile([4, -2, 9], 1.0) == 9


def test_quantile_errors():
    with pytest.raises(ValueError):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1.0], 1.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 1), st.floats(0, 1))
def test_quantile_monotone_in_q(values, q1, q2):
    lo, hi = sorted((q1, q2))
    assert quantile(values, lo) <= quantile(values, hi)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 1))
def test_quantile_guarantees_fraction_below(values, q):
    t = quantile(values, q)
    assert sum(v <= t for v in values) >= math.ceil(q * len(values))


def test_parallel_map_matches_serial():
    items = blocks(1000, 64)
    fn = lambda b: SeededRng(5).child("block", b[0]).normal(b[1] - b[0]).sum()
    assert parallel_map(fn, items, 1) == parallel_map(fn, items, 4)


def test_blocks_partition():
    assert blocks(5, 2) == [(0, 2), (2, 4), (4, 5)]
    assert blocks(0, 3) == []
