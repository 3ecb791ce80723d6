"""Training losses for coarse matching, keypoints, inlier scoring and pose."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import numeric as nx
from .errors import EmptySet, NoGroundTruthPairs
from .geom import RigidTransform
from .numeric import Tensor

LOG_EPS = 1e-12
LOGIT_FLOOR = -50.0


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the weighted total; the keypoint term always has weight 1.

    Defaults are the outdoor (KITTI-style) setting; :meth:`indoor` swaps in the
    3DMatch-style coarse and correspondence weights.
    """

    lambda_s: float = 0.1
    lambda_c: float = 0.2
    lambda_f: float = 1.0
    lambda_k: float = 1.0
    lambda_i: float = 1.0
    lambda_t: float = 5.0
    lambda_R: float = 20.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    @classmethod
    def indoor(cls) -> "LossWeights":
        return cls(lambda_c=1.0, lambda_k=10.0)

    def as_dict(self) -> dict:
        return asdict(self)


TERMS = ("p", "s", "c", "f", "k", "i", "t", "R")


def _safe_log(x) -> Tensor:
    return nx.log(x, floor=LOG_EPS)


def nearest_index(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index in ``b`` of the nearest point to each row of ``a``; ties go to the lowest index."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def loss_keypoint(x, sigma_x, y, sigma_y) -> Tensor:
    """Uncertainty-weighted nearest-neighbour keypoint alignment, both directions.

    ``x`` should already be expressed in the target frame. Each direction is
    ``mean_i(log s_i + d_i / s_i)`` with ``s_i`` the mean sigma of the pair.
    """
    x, y = nx.as_tensor(x), nx.as_tensor(y)
    sigma_x, sigma_y = nx.as_tensor(sigma_x), nx.as_tensor(sigma_y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise EmptySet("keypoint loss needs keypoints on both sides")

    def one_way(a, sa, b, sb):
        j = nearest_index(a.data, b.data)
        d = nx.norm_rows(a - nx.gather_rows(b, j))
        s = (sa + nx.gather_rows(sb, j)) * 0.5
        return (nx.log(s) + d / s).mean()

    return one_way(x, sigma_x, y, sigma_y) + one_way(y, sigma_y, x, sigma_x)


def _pair_log_mean(P: Tensor, o: np.ndarray, pairs: np.ndarray) -> Tensor:
    vals = _safe_log(P[pairs[:, 0], pairs[:, 1]])
    return (vals * o).sum() * (1.0 / o.sum())


def _check_gt(o, pairs) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if o.size == 0 or o.size != pairs.shape[0] or not o.sum() > 0:
        raise NoGroundTruthPairs("no ground-truth pairs with positive overlap")
    return o, pairs


def loss_spot(P_layers, o, pairs) -> Tensor:
    """Overlap-weighted negative log confidence of the true pairs, averaged over layers."""
    o, pairs = _check_gt(o, pairs)
    P_layers = [nx.as_tensor(P) for P in P_layers]
    if not P_layers:
        raise ValueError("need at least one layer")
    total = None
    for P in P_layers:
        term = _pair_log_mean(P, o, pairs)
        total = term if total is None else total + term
    return total * (-1.0 / len(P_layers))


def loss_coarse(P, o, pairs, none_x=(), none_y=(), o_hat_x=None, o_hat_y=None) -> Tensor:
    """Positive pair term plus background terms pushing predicted overlap of
    unmatched nodes toward 0. Empty background sets contribute nothing."""
    o, pairs = _check_gt(o, pairs)
    loss = _pair_log_mean(nx.as_tensor(P), o, pairs) * -1.0
    for idx, o_hat in ((none_x, o_hat_x), (none_y, o_hat_y)):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            continue
        loss = loss - _safe_log(1.0 - nx.as_tensor(o_hat)[idx]).mean()
    return loss


def symmetric_bilinear(V) -> Tensor:
    V = nx.as_tensor(V)
    return (V + V.T) * 0.5


def loss_infonce(d_x, d_pos, d_negs, W) -> Tensor:
    """Contrastive loss with bilinear similarity ``a^T W b``.

    ``d_negs`` has shape (A, K, d); K may be 0. Similarities are floored at -50
    so that hopeless negatives cannot produce -inf.
    """
    d_x, d_pos, W = nx.as_tensor(d_x), nx.as_tensor(d_pos), nx.as_tensor(W)
    d_negs = nx.as_tensor(d_negs)
    A = d_x.shape[0]
    if A == 0:
        raise EmptySet("no anchors")
    K = d_negs.shape[1] if d_negs.ndim == 3 else 0
    if K == 0:
        return nx.Tensor(0.0)
    q = d_x @ W
    pos = (q * d_pos).sum(axis=1)
    neg = (nx.reshape(q, (A, 1, -1)) * d_negs).sum(axis=2)
    pos = nx.clamp_min(pos, LOGIT_FLOOR)
    neg = nx.clamp_min(neg, LOGIT_FLOOR)
    return nx.log1p_sum_exp_rows(neg - nx.reshape(pos, (A, 1))).mean()


def loss_infonce_all(d_x, d_all, pos_index, W) -> Tensor:
    """Contrastive loss where every other row of ``d_all`` is a negative of each anchor."""
    d_x, d_all, W = nx.as_tensor(d_x), nx.as_tensor(d_all), nx.as_tensor(W)
    pos_index = np.asarray(pos_index, dtype=np.int64)
    if d_x.shape[0] == 0:
        raise EmptySet("no anchors")
    if d_all.shape[0] < 2:
        return nx.Tensor(0.0)
    A, M = d_x.shape[0], d_all.shape[0]
    logits = nx.clamp_min((d_x @ W) @ d_all.T, LOGIT_FLOOR)
    pos = logits[np.arange(A), pos_index]
    others = np.ones((A, M), dtype=bool)
    others[np.arange(A), pos_index] = False
    cols = np.nonzero(others)[1].reshape(A, M - 1)
    neg = logits[np.arange(A)[:, None], cols]
    return nx.log1p_sum_exp_rows(neg - nx.reshape(pos, (A, 1))).mean()


def _rt(T) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(T, RigidTransform):
        return T.rotation, T.translation
    R, t = T
    return np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64)


def loss_keycorr(x, y_hat, T_gt) -> Tensor:
    """Mean distance between ground-truth-aligned sources and predicted targets."""
    x, y_hat = nx.as_tensor(x), nx.as_tensor(y_hat)
    if x.shape[0] == 0:
        raise EmptySet("no correspondences")
    R, t = _rt(T_gt)
    return nx.norm_rows(x @ R.T + t - y_hat).mean()


def loss_inlier(scores, labels) -> Tensor:
    """Binary cross-entropy, averaged."""
    scores = nx.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise EmptySet("no correspondences")
    pos = _safe_log(scores) * labels
    neg = _safe_log(1.0 - scores) * (1.0 - labels)
    return (pos + neg).mean() * -1.0


def loss_pose(R_hat, t_hat, T_gt) -> tuple[Tensor, Tensor]:
    """``(||t_hat - t||, ||R_hat^T R - I||_F)``."""
    R_hat, t_hat = nx.as_tensor(R_hat), nx.as_tensor(t_hat)
    R, t = _rt(T_gt)
    L_t = nx.norm_rows(t_hat - t, axis=0)
    L_R = nx.norm_rows(nx.reshape(R_hat.T @ R - np.eye(3), (9,)), axis=0)
    return L_t, L_R


def loss_total(terms: dict, w: LossWeights = LossWeights()) -> Tensor:
    """``L_p + sum_k lambda_k L_k``; missing terms count as zero."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    scale = {"p": 1.0, "s": w.lambda_s, "c": w.lambda_c, "f": w.lambda_f, "k": w.lambda_k,
             "i": w.lambda_i, "t": w.lambda_t, "R": w.lambda_R}
    total = nx.Tensor(0.0)
    for k in TERMS:
        if k in terms:
            total = total + nx.as_tensor(terms[k]) * scale[k]
    return total


def positive_pairs(x_aligned: np.ndarray, y: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Anchors with a target within ``radius`` and the index of their nearest target."""
    d, j = cKDTree(y).query(x_aligned)
    keep = np.flatnonzero(d <= radius)
    return keep, j[keep]
