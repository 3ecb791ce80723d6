import itertools

import numpy as np
import pytest

from hybridreg import numeric as nx
from hybridreg.backbone import build_hierarchy, encode_features, init_backbone, voxel_downsample
from hybridreg.errors import EmptyCloud, NonAscendingVoxels
from hybridreg.geom import PointCloud

SIZES = (0.1, 0.2, 0.4)


def voxel_hash_oracle(points: np.ndarray, voxel: float) -> dict[tuple, list[int]]:
    origin = points.min(axis=0)
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(points):
        key = tuple(int(k) for k in np.floor((p - origin) / voxel))
        groups.setdefault(key, []).append(i)
    return groups


def test_cube_corners_collapse_to_centroid():
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    centroids, assign = voxel_downsample(corners, 2.0)
    np.testing.assert_allclose(centroids, [[0.5, 0.5, 0.5]], atol=1e-15)
    assert assign.tolist() == [0] * 8


def test_sparse_points_are_kept():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    centroids, assign = voxel_downsample(pts, 0.5)
    assert len(centroids) == 4
    np.testing.assert_array_equal(centroids[assign], pts)


def test_levels_match_voxel_hash_oracle(rng):
    cloud = PointCloud(rng.uniform(size=(400, 3)))
    h = build_hierarchy(cloud, SIZES)
    pts = cloud.points
    for lv, v in enumerate(SIZES):
        groups = voxel_hash_oracle(pts, v)
        assert len(h.levels[lv + 1].points) == len(groups)
        expected = sorted(tuple(np.round(pts[idx].mean(axis=0), 12)) for idx in groups.values())
        got = sorted(tuple(np.round(p, 12)) for p in h.levels[lv + 1].points)
        assert got == expected
        # every point of a voxel shares a parent, and no two voxels share one
        parents = {frozenset(h.levels[lv].parent[idx].tolist()) for idx in groups.values()}
        assert all(len(s) == 1 for s in parents) and len(parents) == len(groups)
        pts = h.levels[lv + 1].points


def test_hierarchy_maps_are_total(rng):
    h = build_hierarchy(PointCloud(rng.uniform(size=(300, 3))), SIZES)
    counts = [len(l.points) for l in h.levels]
    assert all(b < a for a, b in zip(counts, counts[1:]))
    top = h.map_to(0, h.depth)
    assert set(top.tolist()) == set(range(counts[-1]))
    for lv in range(1, h.depth + 1):
        kids = h.children(lv)
        assert len(kids) == counts[lv]
        assert sorted(np.concatenate(kids).tolist()) == list(range(counts[lv - 1]))


def test_bad_inputs():
    with pytest.raises(NonAscendingVoxels):
        build_hierarchy(PointCloud(np.zeros((3, 3))), (0.2, 0.1))
    with pytest.raises(NonAscendingVoxels):
        build_hierarchy(PointCloud(np.zeros((3, 3))), (0.0, 0.1))
    with pytest.raises(EmptyCloud):
        build_hierarchy(PointCloud(np.zeros((0, 3))), SIZES)


def encode(points, params):
    return encode_features(build_hierarchy(PointCloud(points), SIZES), params)


def test_zero_weights_give_zero_features(rng):
    p = init_backbone(rng, (4, 6, 8), 8)
    for _, t in nx.named_parameters(p):
        t.data[...] = 0.0
    h = encode(rng.uniform(size=(200, 3)), p)
    for lv in range(1, 4):
        assert not h.feature(lv).data.any()


def test_features_ignore_input_order(rng):
    pts = rng.uniform(size=(250, 3))
    p = init_backbone(rng, (4, 6, 8), 8)
    a = encode(pts, p)
    b = encode(pts[rng.permutation(250)], p)
    for lv in range(1, 4):
        np.testing.assert_array_equal(a.levels[lv].points, b.levels[lv].points)
        np.testing.assert_allclose(a.feature(lv).data, b.feature(lv).data, atol=1e-12)


def test_features_ignore_translation(rng):
    pts = rng.uniform(size=(250, 3))
    p = init_backbone(rng, (4, 6, 8), 8)
    shift = np.array([0.25, -1.5, 3.0])  # exact in binary, so voxel keys are unchanged
    a, b = encode(pts, p), encode(pts + shift, p)
    for lv in range(1, 4):
        np.testing.assert_allclose(b.levels[lv].points, a.levels[lv].points + shift, atol=1e-12)
        np.testing.assert_allclose(a.feature(lv).data, b.feature(lv).data, atol=1e-9)


def test_feature_widths_and_missing_features(rng):
    h = build_hierarchy(PointCloud(rng.uniform(size=(100, 3))), SIZES)
    with pytest.raises(ValueError):
        h.feature(1)
    with pytest.raises(ValueError):
        encode_features(h, init_backbone(rng, (4, 6), 8))
    e = encode_features(h, init_backbone(rng, (4, 6, 8), 8))
    assert [e.feature(l).shape[1] for l in (1, 2, 3)] == [4, 6, 8]


def test_encoder_gradcheck_top_level(rng):
    h = build_hierarchy(PointCloud(rng.uniform(size=(50, 3))), SIZES)
    p = init_backbone(rng, (4, 6, 8), 8)
    named = nx.named_parameters(p)
    report = nx.gradcheck(lambda: encode_features(h, p).feature(3).sum(), [t for _, t in named],
                          names=[n for n, _ in named], step=1e-5, max_entries=10)
    assert report.passed, report.worst
