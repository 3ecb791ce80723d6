"""Multi-scale voxel hierarchy with local point-MLP features.

Level 0 holds the input points. Level ``l`` holds the centroids of the occupied
voxels (edge ``voxel_sizes[l-1]``) of level ``l-1``, ordered by voxel key so the
result does not depend on input order. Features come from a shared MLP over
``(child - node) / voxel`` offsets and child features, max-pooled per node, then
a top-down pass concatenates each node's features with its parent's.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nx
from .errors import NonAscendingVoxels
from .geom import PointCloud
from .numeric import Tensor


@dataclass(frozen=True, eq=False)
class Level:
    points: np.ndarray
    parent: np.ndarray | None = None  # index into the next coarser level


@dataclass(frozen=True, eq=False)
class Hierarchy:
    levels: tuple[Level, ...]
    voxel_sizes: tuple[float, ...]
    features: tuple[Tensor | None, ...] = field(default=())

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def top(self) -> Level:
        return self.levels[-1]

    def feature(self, level: int) -> Tensor:
        if not self.features or self.features[level] is None:
            raise ValueError(f"level {level} has no features; run encode_features first")
        return self.features[level]

    def map_to(self, src_level: int, dst_level: int) -> np.ndarray:
        """Index of the level-``dst_level`` ancestor of every level-``src_level`` node."""
        idx = np.arange(len(self.levels[src_level].points))
        for lv in range(src_level, dst_level):
            idx = self.levels[lv].parent[idx]
        return idx

    def children(self, level: int) -> list[np.ndarray]:
        """Level-``level - 1`` node indices grouped by their parent at ``level``."""
        parent = self.levels[level - 1].parent
        order = np.argsort(parent, kind="stable")
        cuts = np.searchsorted(parent[order], np.arange(1, len(self.levels[level].points)))
        return np.split(order, cuts)


def voxel_downsample(points: np.ndarray, voxel: float) -> tuple[np.ndarray, np.ndarray]:
    """Voxel centroids and the voxel index of each input point.

    The grid is anchored at the minimum corner of ``points``; voxels are ordered
    lexicographically by integer key.
    """
    origin = points.min(axis=0)
    keys = np.floor((points - origin) / voxel).astype(np.int64)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    new = np.ones(len(order), dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.flatnonzero(new)
    counts = np.diff(np.append(starts, len(order)))
    centroids = np.add.reduceat(points[order], starts, axis=0) / counts[:, None]
    assign = np.empty(len(order), dtype=np.int64)
    assign[order] = np.cumsum(new) - 1
    return centroids, assign


def build_hierarchy(cloud: PointCloud, voxel_sizes=(0.05, 0.1, 0.2)) -> Hierarchy:
    cloud.require_nonempty()
    sizes = tuple(float(v) for v in voxel_sizes)
    if not sizes or any(v <= 0 for v in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise NonAscendingVoxels(f"voxel sizes must be positive and strictly increasing, got {sizes}")
    pts = cloud.points
    levels = []
    for v in sizes:
        nodes, assign = voxel_downsample(pts, v)
        levels.append(Level(pts, assign))
        pts = nodes
    levels.append(Level(pts, None))
    return Hierarchy(tuple(levels), sizes)


@dataclass
class MLPParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class BackboneParams:
    enc: list[MLPParams]
    dec_W: list[Tensor]
    dec_b: list[Tensor]
    widths: tuple[int, ...] = (8, 16, 32)


BIAS_INIT_SCALE = 0.1


def init_backbone(rng: np.random.Generator, widths=(8, 16, 32), hidden: int = 16) -> BackboneParams:
    """Glorot weights and small random biases.

    Biases are not zero: a node whose only child sits at its centre sees a zero
    relative coordinate, and with zero biases its features would be exactly zero
    at every level, where cosine similarity has no derivative.
    """
    widths = tuple(int(w) for w in widths)

    def bias(n: int) -> Tensor:
        return nx.parameter(rng.normal(scale=BIAS_INIT_SCALE, size=n))

    enc = []
    prev = 0
    for w in widths:
        enc.append(
            MLPParams(
                W1=nx.glorot(rng, 3 + prev, hidden),
                b1=bias(hidden),
                W2=nx.glorot(rng, hidden, w),
                b2=bias(w),
            )
        )
        prev = w
    dec_W, dec_b = [], []
    for lv in range(len(widths) - 1):
        dec_W.append(nx.glorot(rng, widths[lv] + widths[lv + 1], widths[lv]))
        dec_b.append(bias(widths[lv]))
    return BackboneParams(enc, dec_W, dec_b, widths)


def encode_features(h: Hierarchy, params: BackboneParams) -> Hierarchy:
    """Fill per-level features (level 0 stays featureless)."""
    if len(params.enc) != h.depth:
        raise ValueError(f"backbone has {len(params.enc)} stages for a depth-{h.depth} hierarchy")
    enc: list[Tensor | None] = [None]
    for lv in range(1, h.depth + 1):
        child = h.levels[lv - 1]
        node_pts = h.levels[lv].points
        rel = nx.Tensor((child.points - node_pts[child.parent]) / h.voxel_sizes[lv - 1])
        x = rel if enc[-1] is None else nx.concat([rel, enc[-1]], axis=1)
        m = params.enc[lv - 1]
        y = nx.linear(nx.silu(nx.linear(x, m.W1, m.b1)), m.W2, m.b2)
        enc.append(nx.segment_max(y, child.parent, len(node_pts)))
    dec: list[Tensor | None] = [None] * (h.depth + 1)
    dec[h.depth] = enc[h.depth]
    for lv in range(h.depth - 1, 0, -1):
        up = nx.gather_rows(dec[lv + 1], h.levels[lv].parent)
        x = nx.concat([enc[lv], up], axis=1)
        dec[lv] = nx.silu(nx.linear(x, params.dec_W[lv - 1], params.dec_b[lv - 1]))
    return replace(h, features=tuple(dec))
