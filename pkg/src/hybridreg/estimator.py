"""Closed-form weighted rigid alignment.

``weighted_svd`` minimizes ``sum_k w_k ||R x_k + t - y_k||^2`` over SO(3) x R^3
with a one-sided Jacobi SVD of the 3x3 cross-covariance. ``weighted_procrustes``
solves the same problem on tensors through the quaternion eigenvector form, so
that pose losses can be differentiated.
"""

from __future__ import annotations

import numpy as np

from . import numeric as nx
from .errors import DegenerateConfiguration, InsufficientPairs
from .geom import RigidTransform
from .numeric import Tensor

RANK_TOL = 1e-12


def jacobi_svd3(H: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD ``H = U diag(s) V^T`` of a 3x3 matrix, singular values descending.

    Columns of ``H V`` are orthogonalized by plane rotations (Hestenes); their
    norms are the singular values. Left vectors belonging to zero singular
    values are completed to a right-handed orthonormal basis.
    """
    A = np.array(H, dtype=np.float64, copy=True)
    V = np.eye(3)
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            alpha = A[:, p] @ A[:, p]
            beta = A[:, q] @ A[:, q]
            gamma = A[:, p] @ A[:, q]
            if abs(gamma) <= eps * np.sqrt(alpha * beta) or gamma == 0.0:
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            if abs(zeta) > 1e150:
                t = 0.5 / zeta
            else:
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for M in (A, V):
                mp = M[:, p].copy()
                M[:, p] = c * mp - s * M[:, q]
                M[:, q] = s * mp + c * M[:, q]
        if not rotated:
            break
    sv = np.linalg.norm(A, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, A, V = sv[order], A[:, order], V[:, order]
    U = np.zeros((3, 3))
    top = sv[0] if sv[0] > 0 else 1.0
    for i in range(3):
        if sv[i] > RANK_TOL * top:
            U[:, i] = A[:, i] / sv[i]
    if sv[1] <= RANK_TOL * top:
        # rank <= 1: the caller decides; fill a basis so U stays orthonormal
        seed = np.eye(3)[np.argmin(np.abs(U[:, 0]))] if sv[0] > 0 else np.eye(3)[0]
        U[:, 0] = U[:, 0] if sv[0] > 0 else np.eye(3)[2]
        U[:, 1] = np.cross(U[:, 0], seed)
        U[:, 1] /= np.linalg.norm(U[:, 1])
    if sv[2] <= RANK_TOL * top:
        U[:, 2] = np.cross(U[:, 0], U[:, 1])
    return U, sv, V


def _as_arrays(c) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if hasattr(c, "src") and hasattr(c, "weights"):
        return c.src.data, c.tgt.data, c.weights.data
    src, tgt, w = c
    return np.asarray(src, dtype=np.float64), np.asarray(tgt, dtype=np.float64), np.asarray(w, dtype=np.float64)


def weighted_svd(c) -> RigidTransform:
    """Weighted least-squares rigid transform from a CorrespondenceSet or ``(src, tgt, w)``."""
    src, tgt, w = _as_arrays(c)
    if src.shape[0] < 3 or src.shape != tgt.shape or w.shape != (src.shape[0],):
        raise InsufficientPairs(f"need at least 3 aligned pairs, got {src.shape[0]}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise InsufficientPairs("total correspondence weight must be positive")
    wn = w / total
    xbar = wn @ src
    ybar = wn @ tgt
    H = (src - xbar).T @ ((tgt - ybar) * wn[:, None])
    U, sv, V = jacobi_svd3(H)
    if sv[0] == 0.0 or sv[1] <= RANK_TOL * sv[0]:
        raise DegenerateConfiguration("cross-covariance has rank < 2 (collinear or coincident points)")
    d = 1.0 if np.linalg.det(V @ U.T) >= 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalize against roundoff accumulated by the rotations
    R = R @ (1.5 * np.eye(3) - 0.5 * (R.T @ R))
    return RigidTransform(R, ybar - R @ xbar)


def alignment_cost(R: np.ndarray, t: np.ndarray, src: np.ndarray, tgt: np.ndarray, w: np.ndarray) -> float:
    r = src @ np.asarray(R).T + t - tgt
    return float(np.sum(w * np.sum(r * r, axis=1)))


def _horn_map() -> np.ndarray:
    """Linear map from vec(S) (row-major 3x3) to vec(N) (row-major 4x4)."""
    x, y, z = 0, 1, 2
    terms = {
        (0, 0): [((x, x), 1), ((y, y), 1), ((z, z), 1)],
        (0, 1): [((y, z), 1), ((z, y), -1)],
        (0, 2): [((z, x), 1), ((x, z), -1)],
        (0, 3): [((x, y), 1), ((y, x), -1)],
        (1, 1): [((x, x), 1), ((y, y), -1), ((z, z), -1)],
        (1, 2): [((x, y), 1), ((y, x), 1)],
        (1, 3): [((z, x), 1), ((x, z), 1)],
        (2, 2): [((x, x), -1), ((y, y), 1), ((z, z), -1)],
        (2, 3): [((y, z), 1), ((z, y), 1)],
        (3, 3): [((x, x), -1), ((y, y), -1), ((z, z), 1)],
    }
    Mp = np.zeros((9, 16))
    for (i, j), lst in terms.items():
        for (a, b), s in lst:
            Mp[3 * a + b, 4 * i + j] += s
            if i != j:
                Mp[3 * a + b, 4 * j + i] += s
    return Mp


def _quat_rot_map() -> np.ndarray:
    """Linear map from vec(q q^T) to vec(R) (row-major) for q = (w, x, y, z)."""
    w, x, y, z = 0, 1, 2, 3
    terms = {
        (0, 0): [((w, w), 1), ((x, x), 1), ((y, y), -1), ((z, z), -1)],
        (0, 1): [((x, y), 2), ((w, z), -2)],
        (0, 2): [((x, z), 2), ((w, y), 2)],
        (1, 0): [((x, y), 2), ((w, z), 2)],
        (1, 1): [((w, w), 1), ((x, x), -1), ((y, y), 1), ((z, z), -1)],
        (1, 2): [((y, z), 2), ((w, x), -2)],
        (2, 0): [((x, z), 2), ((w, y), -2)],
        (2, 1): [((y, z), 2), ((w, x), 2)],
        (2, 2): [((w, w), 1), ((x, x), -1), ((y, y), -1), ((z, z), 1)],
    }
    Mp = np.zeros((16, 9))
    for (r, c), lst in terms.items():
        for (a, b), s in lst:
            Mp[4 * a + b, 3 * r + c] += s
    return Mp


HORN_MAP = _horn_map()
QUAT_ROT_MAP = _quat_rot_map()


def weighted_procrustes(src, tgt, w) -> tuple[Tensor, Tensor]:
    """Differentiable ``(R, t)`` minimizing the weighted squared residuals.

    The optimal rotation's unit quaternion is the top eigenvector of the 4x4
    symmetric matrix built linearly from the weighted cross-covariance; the
    gradient assumes that eigenvalue is simple.
    """
    src, tgt, w = nx.as_tensor(src), nx.as_tensor(tgt), nx.as_tensor(w)
    n = src.shape[0]
    if n < 3:
        raise InsufficientPairs(f"need at least 3 pairs, got {n}")
    if not w.data.sum() > 0:
        raise InsufficientPairs("total correspondence weight must be positive")
    wn = nx.reshape(w * (1.0 / w.sum()), (-1, 1))
    xbar = (wn * src).sum(axis=0)
    ybar = (wn * tgt).sum(axis=0)
    xc = src - nx.reshape(xbar, (1, 3))
    yc = tgt - nx.reshape(ybar, (1, 3))
    S = (xc * wn).T @ yc
    K = nx.reshape(nx.reshape(S, (1, 9)) @ HORN_MAP, (4, 4))
    q = nx.sym_top_eigvec(K)
    qq = nx.reshape(q, (4, 1)) @ nx.reshape(q, (1, 4))
    R = nx.reshape(nx.reshape(qq, (1, 16)) @ QUAT_ROT_MAP, (3, 3))
    t = ybar - nx.reshape(R @ nx.reshape(xbar, (3, 1)), (3,))
    return R, t
