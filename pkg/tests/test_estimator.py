import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from hybridreg.errors import DegenerateConfiguration, InsufficientPairs
from hybridreg.estimator import alignment_cost, jacobi_svd3, weighted_procrustes, weighted_svd
from hybridreg.geom import RigidTransform, random_rotation

seeds = st.integers(0, 2**31 - 1)


def test_identity_pairs(rng):
    x = rng.normal(size=(8, 3))
    T = weighted_svd((x, x, np.ones(8)))
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-12)


@given(seeds)
def test_recovers_random_transform(seed):
    rng = np.random.default_rng(seed)
    R0, t0 = random_rotation(rng), rng.normal(scale=3.0, size=3)
    x = rng.normal(size=(10, 3))
    T = weighted_svd((x, x @ R0.T + t0, rng.uniform(0.1, 2.0, size=10)))
    np.testing.assert_allclose(T.rotation, R0, atol=1e-9)
    np.testing.assert_allclose(T.translation, t0, atol=1e-9)


def test_zero_weight_outlier_is_ignored(rng):
    R0, t0 = random_rotation(rng), rng.normal(size=3)
    x = rng.normal(size=(10, 3))
    y = x @ R0.T + t0
    y[9] += 100.0
    w = rng.uniform(0.5, 1.0, size=10)
    w[9] = 0.0
    a = weighted_svd((x, y, w))
    b = weighted_svd((x[:9], y[:9], w[:9]))
    np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-14)
    np.testing.assert_allclose(a.translation, b.translation, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_beats_sampled_candidates(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    x = rng.normal(size=(n, 3))
    y = x @ random_rotation(rng).T + rng.normal(size=3) + 0.3 * rng.normal(size=(n, 3))
    w = rng.uniform(0.1, 1.0, size=n)
    T = weighted_svd((x, y, w))
    best = alignment_cost(T.rotation, T.translation, x, y, w)
    dR = Rotation.from_rotvec(rng.normal(scale=0.2, size=(10_000, 3))).as_matrix()
    dt = rng.normal(scale=0.2, size=(10_000, 3))
    R = dR @ T.rotation
    t = T.translation + dt
    resid = np.einsum("cij,nj->cni", R, x) + t[:, None, :] - y[None]
    costs = (w * (resid**2).sum(axis=2)).sum(axis=1)
    assert best <= costs.min() + 1e-12


@given(seeds)
def test_rotating_the_source_rotates_the_estimate(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(9, 3))
    y = x @ random_rotation(rng).T + 0.1 * rng.normal(size=(9, 3))
    w = rng.uniform(0.2, 1.0, size=9)
    Q = random_rotation(rng)
    base = weighted_svd((x, y, w))
    turned = weighted_svd((x @ Q.T, y, w))
    np.testing.assert_allclose(turned.rotation, base.rotation @ Q.T, atol=1e-9)
    np.testing.assert_allclose(turned.translation, base.translation, atol=1e-9)


@given(seeds, st.floats(1e-3, 1e3))
def test_weight_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 3))
    y = rng.normal(size=(7, 3))
    w = rng.uniform(0.1, 1.0, size=7)
    a, b = weighted_svd((x, y, w)), weighted_svd((x, y, c * w))
    np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-12)
    np.testing.assert_allclose(a.translation, b.translation, atol=1e-12)


def test_reflection_is_corrected(rng):
    x = rng.normal(size=(6, 3))
    T = weighted_svd((x, x * np.array([1.0, 1.0, -1.0]), np.ones(6)))
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)


def test_errors():
    with pytest.raises(InsufficientPairs):
        weighted_svd((np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2)))
    with pytest.raises(InsufficientPairs):
        weighted_svd((np.eye(3), np.eye(3), np.zeros(3)))
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateConfiguration):
        weighted_svd((line, line + 1.0, np.ones(5)))
    with pytest.raises(DegenerateConfiguration):
        weighted_svd((np.ones((4, 3)), np.ones((4, 3)), np.ones(4)))
    with pytest.raises(ValueError):
        weighted_svd((np.eye(3), np.eye(3), -np.ones(3)))


@given(seeds)
def test_jacobi_svd_matches_lapack(seed):
    H = np.random.default_rng(seed).normal(size=(3, 3))
    U, s, V = jacobi_svd3(H)
    np.testing.assert_allclose(U @ np.diag(s) @ V.T, H, atol=1e-12)
    np.testing.assert_allclose(s, np.linalg.svd(H, compute_uv=False), atol=1e-12)
    np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-12)


@given(seeds)
def test_procrustes_agrees_with_svd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    y = x @ random_rotation(rng).T + rng.normal(size=3) + 0.05 * rng.normal(size=(8, 3))
    w = rng.uniform(0.1, 1.0, size=8)
    R, t = weighted_procrustes(x, y, w)
    T = weighted_svd((x, y, w))
    np.testing.assert_allclose(R.data, T.rotation, atol=1e-9)
    np.testing.assert_allclose(t.data, T.translation, atol=1e-9)


def test_correspondence_set_input(rng):
    from hybridreg.matching import CorrespondenceSet

    x = rng.normal(size=(5, 3))
    T0 = RigidTransform(random_rotation(rng), rng.normal(size=3))
    T = weighted_svd(CorrespondenceSet(x, T0.apply(x), np.ones(5)))
    np.testing.assert_allclose(T.rotation, T0.rotation, atol=1e-9)
