"""Point clouds, rigid transforms and registration error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import EmptyCloud, ShapeMismatch

ORTHONORMAL_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) array of finite points with optional per-point batch labels."""

    points: np.ndarray
    batch: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.batch is not None:
            b = np.array(self.batch, dtype=np.int64, copy=True).reshape(-1)
            if b.shape[0] != pts.shape[0]:
                raise ShapeMismatch("batch labels must match the number of points")
            if b.size:
                labels = np.unique(b)
                if labels[0] != 0 or labels[-1] != labels.size - 1:
                    raise ValueError("batch labels must cover a contiguous range from 0")
            object.__setattr__(self, "batch", _frozen(b))

    def __len__(self) -> int:
        return self.points.shape[0]

    def require_nonempty(self) -> "PointCloud":
        if len(self) == 0:
            raise EmptyCloud("point cloud is empty")
        return self

    def subset(self, idx) -> "PointCloud":
        batch = None if self.batch is None else self.batch[idx]
        return PointCloud(self.points[idx], batch)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation in SO(3) plus translation; maps p to ``rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHONORMAL_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RigidTransform":
        return cls(np.reshape(doc["rotation"], (3, 3)), np.asarray(doc["translation"]))


@dataclass(frozen=True)
class RegistrationMetrics:
    rre: float
    rte: float
    success: bool


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.batch)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``T2`` first, then ``T1``."""
    return RigidTransform(T1.rotation @ T2.rotation, T1.rotation @ T2.translation + T1.translation)


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def project_to_so3(M) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ S @ Vt


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    return rotation_about_axis(axis, angle)


def rotation_error_deg(R_est, R_gt) -> float:
    """Geodesic angle of ``R_est^T R_gt`` in degrees.

    Equal to ``arccos((trace - 1) / 2)`` (clamped), but evaluated as
    ``atan2(sin, cos)`` with the sine taken from the antisymmetric part, which
    keeps full precision for tiny angles where arccos flattens out.
    """
    Q = np.asarray(R_est, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    cos = np.clip((np.trace(Q) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([Q[2, 1] - Q[1, 2], Q[0, 2] - Q[2, 0], Q[1, 0] - Q[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def metrics(
    est: RigidTransform,
    gt: RigidTransform,
    rot_thresh: float = 5.0,
    trans_thresh: float = 2.0,
) -> RegistrationMetrics:
    """Geodesic rotation error (degrees), translation error and threshold success."""
    rre = rotation_error_deg(est.rotation, gt.rotation)
    rte = float(np.linalg.norm(est.translation - gt.translation))
    return RegistrationMetrics(rre, rte, bool(rre <= rot_thresh and rte <= trans_thresh))


def registration_recall(results: Iterable[RegistrationMetrics]) -> float:
    results = list(results)
    if not results:
        return 0.0
    return sum(r.success for r in results) / len(results)
