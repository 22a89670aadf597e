import math

import numpy as np
import pytest

from msidebias.core.depstats import (distance_correlation_sq, distance_correlation_sq_many, one_hot,
                                     pca_project, pearson_corr_sq, subsample_rows)
from msidebias.core.errors import DimensionError, EncodingError, NumericError


def brute_force_dc(X, Y):
    """Loop-based double centring, independent of the vectorised implementation"""
    n = len(X)

    def centred(Z):
        d = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(Z[i], Z[j]))) for j in range(n)] for i in range(n)]
        row = [sum(r) / n for r in d]
        grand = sum(row) / n
        return [[d[i][j] - row[i] - row[j] + grand for j in range(n)] for i in range(n)]

    A, B = centred(X.tolist()), centred(Y.tolist())
    dcov = sum(A[i][j] * B[i][j] for i in range(n) for j in range(n)) / n ** 2
    vx = sum(A[i][j] ** 2 for i in range(n) for j in range(n)) / n ** 2
    vy = sum(B[i][j] ** 2 for i in range(n) for j in range(n)) / n ** 2
    if vx <= 0 or vy <= 0:
        return 0.0
    return dcov / math.sqrt(vx * vy)


def test_matches_brute_force_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 65))
        X = rng.normal(size=(n, int(rng.integers(1, 5))))
        Y = X[:, :1] ** 2 + rng.normal(size=(n, int(rng.integers(1, 4))))
        assert distance_correlation_sq(X, Y).value == pytest.approx(brute_force_dc(X, Y), abs=1e-12)


def test_identical_variables_give_one(rng):
    X = rng.normal(size=(50, 3))
    assert distance_correlation_sq(X, X).value == pytest.approx(1.0, abs=1e-12)


def test_one_hot_features_against_their_own_labels():
    labels = np.repeat([0, 1, 2], 20)
    onehot = one_hot(labels, 3)
    assert distance_correlation_sq(onehot, onehot).value == pytest.approx(1.0)


def test_constant_input_gives_zero(rng):
    X = rng.normal(size=(30, 2))
    result = distance_correlation_sq(X, np.ones((30, 1)))
    assert result.value == 0.0
    assert result.n == 30


def test_independent_normals_are_near_zero():
    values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        values.append(distance_correlation_sq(rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2))).value)
    assert np.mean(values) < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_dc_is_symmetric_and_rigid_motion_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    Y = np.tanh(X[:, :2]) + 0.5 * rng.normal(size=(40, 2))
    base = distance_correlation_sq(X, Y).value
    assert distance_correlation_sq(Y, X).value == pytest.approx(base, abs=1e-12)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert distance_correlation_sq(X @ Q, Y).value == pytest.approx(base, abs=1e-10)
    shifted = X + rng.normal(scale=10.0, size=(1, 3))
    assert distance_correlation_sq(shifted, Y - 4.0).value == pytest.approx(base, abs=1e-10)


def test_dc_errors(rng):
    with pytest.raises(DimensionError):
        distance_correlation_sq(rng.normal(size=(10, 2)), rng.normal(size=(9, 2)))
    with pytest.raises(DimensionError):
        distance_correlation_sq(np.ones((1, 2)), np.ones((1, 2)))
    bad = rng.normal(size=(10, 2))
    bad[3, 1] = np.nan
    with pytest.raises(NumericError):
        distance_correlation_sq(bad, rng.normal(size=(10, 2)))


def test_subsampling_above_cap_is_seeded(rng):
    X = rng.normal(size=(300, 2))
    Y = X + rng.normal(size=(300, 2))
    a = distance_correlation_sq(X, Y, cap=100, seed=4)
    b = distance_correlation_sq(X, Y, cap=100, seed=4)
    assert a == b
    assert a.n == 100
    rows = subsample_rows(300, 100, 4)
    assert rows.size == 100 and np.all(np.diff(rows) > 0)
    np.testing.assert_array_equal(subsample_rows(50, 100, 4), np.arange(50))


def test_many_matches_single_calls(rng):
    X = rng.normal(size=(40, 3))
    Ys = [X[:, :1], rng.normal(size=(40, 2)), np.abs(X)]
    many = distance_correlation_sq_many(X, Ys)
    for dc, Y in zip(many, Ys):
        assert dc.value == pytest.approx(distance_correlation_sq(X, Y).value, abs=1e-14)


def test_pearson():
    u = np.arange(10.0)
    assert pearson_corr_sq(u, 3 * u - 1) == pytest.approx(1.0)
    assert pearson_corr_sq(u, -u) == pytest.approx(1.0)
    assert pearson_corr_sq(u, np.full(10, 2.0)) == 0.0
    assert pearson_corr_sq([1.0, 2.0, 3.0, 4.0], [1.0, -1.0, -1.0, 1.0]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DimensionError):
        pearson_corr_sq([1.0, 2.0], [1.0])


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(EncodingError):
        one_hot(np.array([0, 3]), 3)
    with pytest.raises(EncodingError):
        one_hot(np.array([-1]), 2)


def test_pca(rng):
    X = rng.normal(size=(200, 4)) * np.array([5.0, 2.0, 1.0, 0.1])
    pca = pca_project(X, 2)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(2), atol=1e-10)
    assert pca.scores.shape == (200, 2)
    assert pca.explained_variance_ratio[0] > pca.explained_variance_ratio[1]
    assert pca.explained_variance_ratio.sum() <= 1.0 + 1e-12
    for component in pca.components:
        assert component[np.argmax(np.abs(component))] > 0
    assert abs(pca.components[0, 0]) > 0.99
    with pytest.raises(DimensionError):
        pca_project(X, 5)
