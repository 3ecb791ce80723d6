import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg.errors import ShapeMismatch
from hybridreg.geom import (
    PointCloud,
    RegistrationMetrics,
    RigidTransform,
    apply_transform,
    compose,
    metrics,
    random_rotation,
    registration_recall,
    rotation_about_axis,
    rotation_error_deg,
)


def random_transform(rng) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


seeds = st.integers(0, 2**31 - 1)


def test_identity_leaves_cloud_unchanged(rng):
    c = PointCloud(rng.normal(size=(20, 3)))
    np.testing.assert_array_equal(apply_transform(c, RigidTransform.identity()).points, c.points)


def test_quarter_turn_about_z_maps_x_to_y():
    T = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
    out = apply_transform(PointCloud([[1.0, 0.0, 0.0]]), T).points[0]
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-15)


def test_transform_then_inverse_round_trips(rng):
    c = PointCloud(rng.normal(size=(100, 3)))
    T = random_transform(rng)
    back = apply_transform(apply_transform(c, T), T.inverse())
    np.testing.assert_allclose(back.points, c.points, atol=1e-12)


def test_batch_labels_survive_transform(rng):
    c = PointCloud(rng.normal(size=(4, 3)), batch=[0, 0, 1, 1])
    np.testing.assert_array_equal(apply_transform(c, random_transform(rng)).batch, [0, 0, 1, 1])


def test_compose_with_identity_and_inverse(rng):
    T = random_transform(rng)
    C = compose(RigidTransform.identity(), T)
    np.testing.assert_array_equal(C.rotation, T.rotation)
    np.testing.assert_array_equal(C.translation, T.translation)
    I = compose(T, T.inverse())
    np.testing.assert_allclose(I.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(I.translation, 0.0, atol=1e-12)


@given(seeds)
def test_compose_equals_sequential_application(seed):
    rng = np.random.default_rng(seed)
    T1, T2 = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(25, 3))
    np.testing.assert_allclose(compose(T1, T2).apply(p), T1.apply(T2.apply(p)), atol=1e-12)


@given(seeds)
def test_rigid_motion_preserves_pairwise_distances(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(15, 3))
    q = random_transform(rng).apply(p)

    def dist(a):
        return np.linalg.norm(a[:, None] - a[None], axis=-1)

    d0, d1 = dist(p), dist(q)
    np.testing.assert_allclose(d1, d0, rtol=1e-12, atol=1e-14)


def test_metrics_examples():
    gt = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    m = metrics(gt, gt)
    assert (m.rre, m.rte, m.success) == (0.0, 0.0, True)
    est = RigidTransform(rotation_about_axis([0, 0, 1], np.deg2rad(10.0)), [1.0, 2.0, 3.0])
    assert abs(metrics(est, gt).rre - 10.0) < 1e-9
    shifted = RigidTransform(np.eye(3), [4.0, 6.0, 3.0])
    assert metrics(shifted, gt).rte == pytest.approx(5.0, abs=1e-15)


def test_rre_matches_arccos_formula_away_from_zero(rng):
    # independent route: clamped arccos of the trace
    for _ in range(50):
        A, B = random_rotation(rng), random_rotation(rng)
        c = np.clip((np.trace(A.T @ B) - 1) / 2, -1, 1)
        assert rotation_error_deg(A, B) == pytest.approx(np.degrees(np.arccos(c)), abs=1e-6)


def test_rre_resolves_tiny_angles():
    R = rotation_about_axis([1, 2, 3], np.deg2rad(1e-9))
    assert rotation_error_deg(R, np.eye(3)) == pytest.approx(1e-9, rel=1e-6)


@given(seeds)
def test_rre_is_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    A, B = random_rotation(rng), random_rotation(rng)
    e = rotation_error_deg(A, B)
    assert 0.0 <= e <= 180.0
    assert e == pytest.approx(rotation_error_deg(B, A), abs=1e-10)


def test_success_uses_thresholds():
    gt = RigidTransform.identity()
    est = RigidTransform(rotation_about_axis([0, 0, 1], np.deg2rad(6.0)), [0.0, 0.0, 0.0])
    assert not metrics(est, gt).success
    assert metrics(est, gt, rot_thresh=7.0).success
    assert not metrics(RigidTransform(np.eye(3), [0, 0, 3.0]), gt).success


def test_registration_recall():
    ok, bad = RegistrationMetrics(0.0, 0.0, True), RegistrationMetrics(9.0, 3.0, False)
    assert registration_recall([ok, ok, bad, ok]) == 0.75
    assert registration_recall([metrics(RigidTransform.identity(), RigidTransform.identity())] * 5) == 1.0


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(ShapeMismatch):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), batch=[0, 2, 2])
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


def test_json_round_trip(rng):
    T = random_transform(rng)
    back = RigidTransform.from_json(T.to_json())
    np.testing.assert_array_equal(back.rotation, T.rotation)
    np.testing.assert_array_equal(back.translation, T.translation)
