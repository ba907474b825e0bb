import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difs.analysis import export_all, mode_split, pca


def test_rank_one_line():
    t = np.linspace(-1, 1, 50)
    x = np.outer(t, [1.0, 1.0])
    res = pca(x, 2)
    assert np.allclose(np.abs(res.components[0]), [1 / math.sqrt(2)] * 2, atol=1e-8)
    assert res.explained_fraction[0] == pytest.approx(1.0, abs=1e-10)
    assert res.explained_fraction[1] == pytest.approx(0.0, abs=1e-10)


def test_isotropic_cloud_splits_variance():
    x = np.random.default_rng(0).normal(size=(20_000, 2))
    res = pca(x, 2)
    assert abs(res.explained_fraction[0] - 0.5) < 0.02


def test_full_rank_reconstruction():
    x = np.random.default_rng(1).normal(size=(40, 3)) @ np.diag([3.0, 1.0, 0.3])
    res = pca(x, 3)
    assert np.allclose(res.reconstruct(), x, atol=1e-8)
    assert np.allclose(res.components @ res.components.T, np.eye(3), atol=1e-8)


def test_matches_dense_eigensolver():
    a = np.random.default_rng(2).normal(size=(6, 6))
    x = np.random.default_rng(3).normal(size=(500, 6)) @ a
    res = pca(x, 3)
    vals = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1][:3]
    assert np.allclose(res.explained_variance, vals, rtol=1e-6)


def test_pca_errors_and_degenerate():
    with pytest.raises(ValueError):
        pca(np.zeros((2, 3)), 2)
    with pytest.raises(ValueError):
        pca(np.zeros((10, 1)), 2)
    assert pca(np.ones((10, 3)), 2).degenerate


def test_two_point_masses_separate():
    x = np.concatenate([np.full((50, 3), -2.0), np.full((50, 3), 2.0)])
    x += np.random.default_rng(4).normal(scale=0.05, size=x.shape)
    split = mode_split(pca(x, 2).projections)
    assert split.separation > 10
    assert {split.first.size, split.second.size} == {50}


def test_unimodal_gaussian_reference_separation():
    # half-normal oracle: |m1 - m2| / s = 2 sqrt(2/pi) / sqrt(1 - 2/pi) ~ 2.647
    z = np.random.default_rng(5).normal(size=(50_000, 1))
    expected = 2 * math.sqrt(2 / math.pi) / math.sqrt(1 - 2 / math.pi)
    assert mode_split(z).separation == pytest.approx(expected, rel=0.02)
    assert expected == pytest.approx(2.647, abs=1e-3)


def test_mode_split_degenerate():
    with pytest.raises(ValueError):
        mode_split(np.ones((20, 2)))
    with pytest.raises(ValueError):
        mode_split(np.arange(5.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_components_orthonormal(seed):
    x = np.random.default_rng(seed).normal(size=(60, 5)) * np.arange(1, 6)
    c = pca(x, 3).components
    assert np.allclose(c @ c.T, np.eye(3), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
    a, b = pca(x, 2), pca(x[rng.permutation(40)], 2)
    assert np.allclose(a.components, b.components, atol=1e-6)
    assert np.allclose(a.explained_variance, b.explained_variance, rtol=1e-8)


def test_export_files(tmp_path):
    x = np.random.default_rng(6).normal(size=(30, 4))
    res = pca(x, 2)
    export_all(tmp_path / "pca", res, np.linspace(-1, 1, 30), np.linspace(-1, 1, 30) <= 0)
    rows = list(csv.reader(open(tmp_path / "pca" / "projections.csv")))
    assert rows[0] == ["pc1", "pc2", "robustness", "is_failure"] and len(rows) == 31
    eig = list(csv.reader(open(tmp_path / "pca" / "eigendisturbances.csv")))
    assert len(eig) == 3 and len(eig[1]) == 2 + 4
