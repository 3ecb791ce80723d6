"""Coarse superpoint matching, keypoint correspondences, consistency filtering
and dense local refinement.

Similarity kinds shared by the matching stages:

* ``"cosine"``: cosine similarity of descriptors (learned mode);
* ``"neg_sqdist"``: ``-||a - b||^2 / scale^2``, used when descriptors are
  positions (oracle mode);
* ``"bilinear"``: ``a^T W b`` with a symmetric ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import numeric as nx
from .backbone import Hierarchy
from .errors import EmptyFeatures, NoOverlap, TooFewCorrespondences
from .geom import RigidTransform
from .numeric import Tensor

SEMI_DENSE = 2
FINE = 1


@dataclass(frozen=True, eq=False)
class MatchMatrix:
    """Dual-softmax confidences; ``layers`` holds one matrix per encoder block."""

    scores: Tensor
    layers: tuple[Tensor, ...] = ()

    @property
    def values(self) -> np.ndarray:
        return self.scores.data


@dataclass(frozen=True, eq=False)
class KeypointSet:
    positions: Tensor
    sigma: Tensor
    descriptors: Tensor
    node_index: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Weighted point pairs.

    ``src``/``tgt``/``weights`` are tensors so that downstream losses can reach
    the parameters that produced them; ``scores`` are consistency scores in
    [0, 1] (or None before filtering) and ``index`` tracks provenance rows.
    """

    src: Tensor
    tgt: Tensor
    weights: Tensor
    scores: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self):
        for name in ("src", "tgt", "weights"):
            object.__setattr__(self, name, nx.as_tensor(getattr(self, name)))
        n = self.src.shape[0]
        if self.src.shape != (n, 3) or self.tgt.shape != (n, 3) or self.weights.shape != (n,):
            raise ValueError("correspondence arrays must be (n, 3), (n, 3) and (n,)")
        if np.any(self.weights.data < 0):
            raise ValueError("correspondence weights must be non-negative")
        if self.index is None:
            object.__setattr__(self, "index", np.arange(n))

    def __len__(self) -> int:
        return self.src.shape[0]

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CorrespondenceSet(
            nx.gather_rows(self.src, idx),
            nx.gather_rows(self.tgt, idx),
            nx.gather_rows(self.weights, idx),
            None if self.scores is None else self.scores[idx],
            self.index[idx],
        )


def similarity(a, b, kind: str = "cosine", scale: float = 1.0, W=None) -> Tensor:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if kind == "cosine":
        an = a / nx.reshape(nx.clamp_min(nx.norm_rows(a), 1e-12), (-1, 1))
        bn = b / nx.reshape(nx.clamp_min(nx.norm_rows(b), 1e-12), (-1, 1))
        return an @ bn.T
    if kind == "neg_sqdist":
        sa = nx.reshape((a * a).sum(axis=1), (-1, 1))
        sb = nx.reshape((b * b).sum(axis=1), (1, -1))
        return nx.clamp_min(sa + sb - 2.0 * (a @ b.T), 0.0) * (-1.0 / scale**2)
    if kind == "bilinear":
        if W is None:
            raise ValueError("bilinear similarity needs W")
        return (a @ W) @ b.T
    raise ValueError(f"unknown similarity kind {kind!r}")


def dual_softmax(s: Tensor, temperature: float) -> Tensor:
    z = s * (1.0 / temperature)
    return nx.softmax_rows(z) * nx.softmax_rows(z.T).T


def coarse_match(
    F_src,
    F_tgt,
    temperature: float = 0.1,
    kind: str = "cosine",
    scale: float = 1.0,
    layers=(),
) -> MatchMatrix:
    """``m_ij = softmax_row(s / t)_ij * softmax_col(s / t)_ij``.

    ``layers`` is an optional sequence of (src, tgt) feature pairs, one per
    encoder block, each turned into its own matrix with the same rule.
    """
    F_src, F_tgt = nx.as_tensor(F_src), nx.as_tensor(F_tgt)
    if F_src.shape[0] == 0 or F_tgt.shape[0] == 0:
        raise EmptyFeatures("coarse matching needs non-empty feature sets")
    M = dual_softmax(similarity(F_src, F_tgt, kind, scale), temperature)
    P = tuple(dual_softmax(similarity(a, b, kind, scale), temperature) for a, b in layers)
    return MatchMatrix(M, P)


def _topk_mask(S: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k membership; ties go to the lower column index."""
    n, m = S.shape
    mask = np.zeros((n, m), dtype=bool)
    if m == 0:
        return mask
    cols = np.arange(m)
    for i in range(n):
        order = np.lexsort((cols, -S[i]))
        mask[i, order[: min(k, m)]] = True
    return mask


def extract_coarse_pairs(M, top_k: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mutual top-k pairs ``(i, j, m_ij)``, sorted by (i, j)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    S = M.values if isinstance(M, MatchMatrix) else np.asarray(M, dtype=np.float64)
    keep = _topk_mask(S, top_k) & _topk_mask(S.T, top_k).T
    i, j = np.nonzero(keep)
    return i, j, S[i, j]


def detect_keypoints(
    h: Hierarchy,
    score_weights: Tensor | None = None,
    sigma_head: tuple[Tensor, Tensor] | None = None,
    desc_proj: Tensor | None = None,
    nodes=None,
) -> KeypointSet:
    """One keypoint per selected semi-dense node.

    Each keypoint is a softmax-weighted average of the node's fine-level
    children, so it stays inside their convex hull. Attention logits are
    ``child_features @ score_weights``; without ``score_weights`` the weights are
    uniform and the keypoint is the children's centroid. ``sigma`` is
    ``softplus(node_features @ W + b) + 1e-6`` (1 without a head) and
    descriptors are ``node_features @ desc_proj`` (the raw features without one).
    """
    n_nodes = len(h.levels[SEMI_DENSE].points)
    nodes = np.arange(n_nodes) if nodes is None else np.unique(np.asarray(nodes, dtype=np.int64))
    slot = np.full(n_nodes, -1)
    slot[nodes] = np.arange(nodes.size)
    parent = h.levels[FINE].parent
    kids = np.flatnonzero(slot[parent] >= 0)
    seg = slot[parent[kids]]
    pos = h.levels[FINE].points[kids]
    if score_weights is None:
        logits = nx.Tensor(np.zeros((kids.size, 1)))
    else:
        logits = nx.gather_rows(h.feature(FINE), kids) @ score_weights
    alpha = nx.segment_softmax(logits, seg, nodes.size)
    positions = nx.segment_sum(alpha * pos, seg, nodes.size)
    if sigma_head is None and desc_proj is None:
        node_feat = None
    else:
        node_feat = nx.gather_rows(h.feature(SEMI_DENSE), nodes)
    if sigma_head is None:
        sigma = nx.Tensor(np.ones(nodes.size))
    else:
        W, b = sigma_head
        sigma = nx.reshape(nx.softplus(node_feat @ W + b), (-1,)) + 1e-6
    descriptors = positions if desc_proj is None else node_feat @ desc_proj
    return KeypointSet(positions, sigma, descriptors, nodes)


def soft_match(
    d_src,
    d_tgt,
    tgt_pos,
    temperature: float = 0.1,
    kind: str = "bilinear",
    scale: float = 1.0,
    W=None,
) -> tuple[Tensor, Tensor]:
    """Attention-weighted virtual targets ``y_hat`` and their peak weights."""
    s = similarity(d_src, d_tgt, kind, scale, W)
    alpha = nx.softmax_rows(s * (1.0 / temperature))
    return alpha @ nx.as_tensor(tgt_pos), nx.Tensor(alpha.data.max(axis=1))


def match_keypoints(
    kp_src: KeypointSet,
    kp_tgt: KeypointSet,
    W=None,
    temperature: float = 0.1,
    kind: str = "bilinear",
    scale: float = 1.0,
) -> CorrespondenceSet:
    """Virtual correspondence ``(x_i, y_hat_i)`` for every source keypoint.

    The weight of a pair is the largest attention weight of its row.
    """
    if len(kp_src) == 0 or len(kp_tgt) == 0:
        raise EmptyFeatures("keypoint matching needs keypoints on both sides")
    y_hat, conf = soft_match(kp_src.descriptors, kp_tgt.descriptors, kp_tgt.positions, temperature, kind, scale, W)
    return CorrespondenceSet(kp_src.positions, y_hat, conf)


def _pair_distances(p: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)


def consistency_votes(src: np.ndarray, tgt: np.ndarray, tau_d: float) -> np.ndarray:
    """Fraction of the other pairs whose mutual length is preserved within ``tau_d``."""
    n = len(src)
    ok = np.abs(_pair_distances(src) - _pair_distances(tgt)) <= tau_d
    np.fill_diagonal(ok, False)
    return ok.sum(axis=1) / (n - 1)


def filter_consistency(c: CorrespondenceSet, tau_d: float, min_score: float = 0.5) -> CorrespondenceSet:
    """Keep pairs whose length-consistency score is at least ``min_score``.

    Scores are recomputed among the survivors until nothing changes, which
    makes the filter idempotent.
    """
    if len(c) < 2:
        raise TooFewCorrespondences(f"need at least 2 correspondences, got {len(c)}")
    src, tgt = c.src.data, c.tgt.data
    alive = np.arange(len(c))
    while True:
        if alive.size < 2:
            scores = np.zeros(alive.size)
            break
        scores = consistency_votes(src[alive], tgt[alive], tau_d)
        keep = scores >= min_score
        if keep.all():
            break
        alive = alive[keep]
    out = c.subset(alive)
    return CorrespondenceSet(out.src, out.tgt, out.weights, scores[: alive.size], out.index)


def soft_consistency(src, tgt, tau_d: float, sharpness: float = 0.25) -> Tensor:
    """Differentiable consistency score in (0, 1) per pair.

    The hard indicator ``|d_x - d_y| <= tau_d`` is replaced by
    ``sigmoid((tau_d - |d_x - d_y|) / (sharpness * tau_d))``.
    """
    src, tgt = nx.as_tensor(src), nx.as_tensor(tgt)
    n = src.shape[0]
    if n < 2:
        raise TooFewCorrespondences(f"need at least 2 correspondences, got {n}")

    def dist(p: Tensor) -> Tensor:
        diff = nx.reshape(p, (n, 1, 3)) - nx.reshape(p, (1, n, 3))
        return nx.norm_rows(diff, axis=-1)

    gap = nx.absolute(dist(src) - dist(tgt))
    c = nx.sigmoid((tau_d - gap) * (1.0 / (sharpness * tau_d)))
    off = 1.0 - np.eye(n)
    return (c * off).sum(axis=1) * (1.0 / (n - 1))


def inlier_labels(src: np.ndarray, tgt: np.ndarray, T_gt: RigidTransform, r_f: float) -> np.ndarray:
    return (np.linalg.norm(T_gt.apply(src) - tgt, axis=1) < r_f).astype(np.float64)


def fine_correspondences(
    h_src: Hierarchy,
    h_tgt: Hierarchy,
    T0: RigidTransform,
    desc_src,
    desc_tgt,
    radius: float,
    temperature: float = 0.1,
    kind: str = "cosine",
    scale: float = 1.0,
    geo_scale: float | None = None,
) -> CorrespondenceSet:
    """Dense correspondences at the fine level after pre-alignment by ``T0``.

    For each fine source node the candidates are the target fine nodes within
    ``radius`` of its aligned position. Attention logits are
    ``sim / temperature - ||x_aligned - y||^2 / (2 geo_scale^2)`` with the
    similarity shifted so its maximum is 0; the prediction is the
    attention-weighted target position and its weight is ``sum_j a_j exp(sim_j)``,
    which is 1 for a perfect descriptor match. Source nodes without candidates
    are dropped.
    """
    xs = h_src.levels[FINE].points
    ys = h_tgt.levels[FINE].points
    aligned = T0.apply(xs)
    lists = cKDTree(ys).query_ball_point(aligned, radius)
    counts = np.array([len(l) for l in lists])
    kept = np.flatnonzero(counts)
    if kept.size == 0:
        raise NoOverlap("no source point has a target neighbour within the search radius")
    seg = np.repeat(np.arange(kept.size), counts[kept])
    src_i = kept[seg]
    tgt_j = np.concatenate([np.asarray(lists[i], dtype=np.int64) for i in kept])
    a = nx.gather_rows(desc_src, src_i)
    b = nx.gather_rows(desc_tgt, tgt_j)
    if kind == "cosine":
        an = a / nx.reshape(nx.clamp_min(nx.norm_rows(a), 1e-12), (-1, 1))
        bn = b / nx.reshape(nx.clamp_min(nx.norm_rows(b), 1e-12), (-1, 1))
        sim = (an * bn).sum(axis=1) - 1.0
    elif kind == "neg_sqdist":
        d = a - b
        sim = (d * d).sum(axis=1) * (-1.0 / scale**2)
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    g = radius if geo_scale is None else geo_scale
    geo = np.sum((aligned[src_i] - ys[tgt_j]) ** 2, axis=1) / (2.0 * g * g)
    logits = nx.reshape(sim * (1.0 / temperature) - geo, (-1, 1))
    alpha = nx.segment_softmax(logits, seg, kept.size)
    y_hat = nx.segment_sum(alpha * ys[tgt_j], seg, kept.size)
    w = nx.reshape(nx.segment_sum(alpha * nx.reshape(nx.exp(sim), (-1, 1)), seg, kept.size), (-1,))
    return CorrespondenceSet(nx.Tensor(xs[kept]), y_hat, w, index=kept)


def overlap_ratios(
    h_src: Hierarchy,
    h_tgt: Hierarchy,
    T_gt: RigidTransform,
    radius: float,
    level: int | None = None,
) -> np.ndarray:
    """Symmetrized patch overlap ``o_ij`` between nodes of ``level`` (default: top).

    For every dense source point, aligned by ``T_gt``, check whether the target
    patch ``j`` has a dense point within ``radius``; ``o_ij`` averages the
    fraction of patch-i points hitting patch j and the fraction of patch-j
    points hitting patch i.
    """
    level = h_src.depth if level is None else level
    ps = T_gt.apply(h_src.levels[0].points)
    pt = h_tgt.levels[0].points
    gs = h_src.map_to(0, level)
    gt = h_tgt.map_to(0, level)
    ns, nt = len(h_src.levels[level].points), len(h_tgt.levels[level].points)
    size_s = np.bincount(gs, minlength=ns).astype(np.float64)
    size_t = np.bincount(gt, minlength=nt).astype(np.float64)

    def hits(a: np.ndarray, ga: np.ndarray, b: np.ndarray, gb: np.ndarray, na: int, nb: int) -> np.ndarray:
        H = np.zeros((na, nb))
        near = cKDTree(b).query_ball_point(a, radius)
        for p, lst in enumerate(near):
            if lst:
                H[ga[p], np.unique(gb[lst])] += 1.0
        return H

    fwd = hits(ps, gs, pt, gt, ns, nt) / np.maximum(size_s, 1)[:, None]
    bwd = hits(pt, gt, ps, gs, nt, ns) / np.maximum(size_t, 1)[:, None]
    return 0.5 * (fwd + bwd.T)


def unmatched_nodes(h_src: Hierarchy, h_tgt: Hierarchy, T_gt: RigidTransform, radius: float, level: int = SEMI_DENSE):
    """Nodes of ``level`` on each side with zero ground-truth overlap with the other cloud."""
    ps = T_gt.apply(h_src.levels[0].points)
    pt = h_tgt.levels[0].points
    ds, _ = cKDTree(pt).query(ps)
    dt, _ = cKDTree(ps).query(pt)
    gs = h_src.map_to(0, level)
    gt = h_tgt.map_to(0, level)
    hit_s = np.bincount(gs, weights=ds <= radius, minlength=len(h_src.levels[level].points))
    hit_t = np.bincount(gt, weights=dt <= radius, minlength=len(h_tgt.levels[level].points))
    return np.flatnonzero(hit_s == 0), np.flatnonzero(hit_t == 0)
