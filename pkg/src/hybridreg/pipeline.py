"""Model assembly, pairwise registration, toy training and the ablation harness."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nx
from .attention import TransformerBlockParams, cross_attention_block, init_transformer_block, self_attention_block
from .backbone import BackboneParams, Hierarchy, build_hierarchy, encode_features, init_backbone
from .errors import DivergedLoss, NoOverlap, TooFewPoints
from .estimator import weighted_procrustes, weighted_svd
from .geom import PointCloud, RigidTransform, metrics
from .losses import (
    LossWeights,
    loss_coarse,
    loss_infonce_all,
    loss_inlier,
    loss_keycorr,
    loss_keypoint,
    loss_pose,
    loss_spot,
    loss_total,
    positive_pairs,
    symmetric_bilinear,
)
from .matching import (
    FINE,
    SEMI_DENSE,
    CorrespondenceSet,
    coarse_match,
    detect_keypoints,
    extract_coarse_pairs,
    fine_correspondences,
    filter_consistency,
    inlier_labels,
    overlap_ratios,
    soft_consistency,
    soft_match,
    unmatched_nodes,
)
from .numeric import Tensor
from .serialize import CURVES, inverse_permutation, serialize
from .ssm import MambaBlockParams, init_mamba_block, mamba_block

VARIANTS = ("hybrid", "mamba_only", "transformer_only")


@dataclass
class ModelConfig:
    """Every knob of the model, matcher and optimizer; round-trips through JSON."""

    widths: tuple[int, ...] = (8, 16, 32)
    backbone_hidden: int = 16
    voxel_sizes: tuple[float, ...] = (0.03, 0.15, 0.3)
    d_model: int = 16
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    heads: int = 1
    n_blocks: int = 3
    curve: str = "zorder"
    depth: int = 16
    order_indicator: bool = False
    variant: str = "hybrid"
    hybrid_self_attention: bool = False
    d_desc: int = 16
    temperature: float = 0.1
    top_k: int = 3
    tau_d: float | None = None
    r_f: float = 0.05
    fine_radius: float | None = None
    keypoint_budget: int = 1000
    min_points: int = 100
    oracle_temperature: float = 1e-3
    oracle_gate: float = 2.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 0.5
    decay_every: int = 5
    decay_factor: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.widths = tuple(int(w) for w in self.widths)
        self.voxel_sizes = tuple(float(v) for v in self.voxel_sizes)
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.widths) != len(self.voxel_sizes) or len(self.widths) != 3:
            raise ValueError("need three feature widths and three voxel sizes (fine, semi-dense, top)")
        if min(self.widths) < 1 or min(self.d_model, self.d_state, self.d_desc, self.n_blocks) < 1:
            raise ValueError("widths and sizes must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.curve not in CURVES:
            raise ValueError(f"curve must be one of {CURVES}, got {self.curve!r}")

    @property
    def fine_voxel(self) -> float:
        return self.voxel_sizes[0]

    @property
    def tau_d_value(self) -> float:
        return 2.0 * self.fine_voxel if self.tau_d is None else self.tau_d

    @property
    def fine_radius_value(self) -> float:
        return 2.0 * self.fine_voxel if self.fine_radius is None else self.fine_radius

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["loss_weights"] = self.loss_weights.as_dict()
        for k in ("widths", "voxel_sizes", "betas"):
            doc[k] = list(doc[k])
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def toy_config(**changes) -> ModelConfig:
    """Settings for the small synthetic training runs: a faster step size and
    voxel sizes matched to the toy scenes."""
    base = dict(voxel_sizes=(0.05, 0.12, 0.25), lr=2e-3, keypoint_budget=200, r_f=0.05)
    return ModelConfig(**{**base, **changes})


# -- parameters -------------------------------------------------------------------


@dataclass
class EncoderBlock:
    mamba: MambaBlockParams
    self_attn: TransformerBlockParams
    cross: TransformerBlockParams


@dataclass
class ModelParams:
    backbone: BackboneParams
    W_in: Tensor
    b_in: Tensor
    blocks: list[EncoderBlock]
    kp_score: Tensor
    kp_sigma_W: Tensor
    kp_sigma_b: Tensor
    kp_desc: Tensor
    V: Tensor
    overlap_W: Tensor
    overlap_b: Tensor
    fine_desc: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return nx.named_parameters(self)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_model(config: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c1, c2, c3 = config.widths
    d = config.d_model
    blocks = [
        EncoderBlock(
            init_mamba_block(rng, d, config.d_state, config.expand, config.d_conv),
            init_transformer_block(rng, d, config.heads),
            init_transformer_block(rng, d, config.heads),
        )
        for _ in range(config.n_blocks)
    ]
    return ModelParams(
        backbone=init_backbone(rng, config.widths, config.backbone_hidden),
        W_in=nx.glorot(rng, c3 + 3, d),
        b_in=nx.parameter(np.zeros(d)),
        blocks=blocks,
        kp_score=nx.glorot(rng, c1, 1),
        kp_sigma_W=nx.glorot(rng, c2, 1, 0.1),
        kp_sigma_b=nx.parameter(np.zeros(1)),
        kp_desc=nx.glorot(rng, c2, config.d_desc),
        V=nx.parameter(np.eye(config.d_desc) + rng.normal(0.0, 0.01, size=(config.d_desc, config.d_desc))),
        overlap_W=nx.glorot(rng, c2, 1, 0.1),
        overlap_b=nx.parameter(np.zeros(1)),
        fine_desc=nx.glorot(rng, c1, config.d_desc),
    )


def zero_parameters(obj) -> None:
    """Set every tensor reachable from ``obj`` to zero, in place."""
    for _, t in nx.named_parameters(obj):
        t.data[...] = 0.0


def save_params(path, params: ModelParams, config: ModelConfig | None = None) -> None:
    """Flat little-endian float64 payload after an 8-byte header length and a JSON header."""
    named = params.named()
    header = {"tensors": {n: list(t.shape) for n, t in named}}
    if config is not None:
        header["config"] = config.to_json()
    head = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for _, t in named:
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path, config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n])
    if config is None:
        config = ModelConfig.from_json(header["config"]) if "config" in header else ModelConfig()
    params = init_model(config)
    named = dict(params.named())
    if list(header["tensors"]) != list(named):
        raise ValueError("parameter file does not match the model layout of this config")
    offset = 8 + n
    for name, shape in header["tensors"].items():
        t = named[name]
        if tuple(shape) != t.shape:
            raise ValueError(f"{name}: stored shape {shape} != expected {t.shape}")
        count = int(np.prod(shape, dtype=np.int64))
        t.data[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("trailing bytes in parameter file")
    return params, config


# -- encoder ------------------------------------------------------------------------


def normalized_coordinates(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=0)
    scale = np.sqrt((c * c).sum(axis=1).mean())
    return c / scale if scale > 0 else c


def _serial_mamba(p: MambaBlockParams, F: Tensor, pos: np.ndarray, config: ModelConfig) -> Tensor:
    order = serialize(PointCloud(pos), config.curve, config.depth).order
    out = mamba_block(p, nx.gather_rows(F, order), config.order_indicator)
    return nx.gather_rows(out, inverse_permutation(order))


def hybrid_encode(
    params: ModelParams, F_src, F_tgt, pos_src: np.ndarray, pos_tgt: np.ndarray, config: ModelConfig
) -> tuple[Tensor, Tensor, list[tuple[Tensor, Tensor]]]:
    """Run the encoder stack; returns final features and each block's output.

    Per block: serialize positions, reorder, Mamba, restore order (skipped for
    ``transformer_only``); self-attention (only for ``transformer_only``, or
    for ``hybrid`` when ``hybrid_self_attention`` is set); then cross-attention
    (skipped for ``mamba_only``).
    """
    Fs, Ft = nx.as_tensor(F_src), nx.as_tensor(F_tgt)
    if Fs.shape[0] != len(pos_src) or Ft.shape[0] != len(pos_tgt):
        raise ValueError("features and positions must have the same number of rows")
    v = config.variant
    layers = []
    for blk in params.blocks:
        if v != "transformer_only":
            Fs = _serial_mamba(blk.mamba, Fs, pos_src, config)
            Ft = _serial_mamba(blk.mamba, Ft, pos_tgt, config)
        if v == "transformer_only" or (v == "hybrid" and config.hybrid_self_attention):
            Fs = self_attention_block(blk.self_attn, Fs)
            Ft = self_attention_block(blk.self_attn, Ft)
        if v != "mamba_only":
            Fs, Ft = cross_attention_block(blk.cross, Fs, Ft)
        layers.append((Fs, Ft))
    return Fs, Ft, layers


@dataclass(frozen=True, eq=False)
class PairFeatures:
    h_src: Hierarchy
    h_tgt: Hierarchy
    top_src: Tensor
    top_tgt: Tensor
    layers: list


def encode_pair(params: ModelParams, config: ModelConfig, h_src: Hierarchy, h_tgt: Hierarchy) -> PairFeatures:
    hs = encode_features(h_src, params.backbone)
    ht = encode_features(h_tgt, params.backbone)

    def embed(h: Hierarchy) -> Tensor:
        top = h.top.points
        x = nx.concat([h.feature(h.depth), nx.Tensor(normalized_coordinates(top))], axis=1)
        return nx.linear(x, params.W_in, params.b_in)

    Fs, Ft, layers = hybrid_encode(params, embed(hs), embed(ht), hs.top.points, ht.top.points, config)
    return PairFeatures(hs, ht, Fs, Ft, layers)


# -- registration -------------------------------------------------------------------


def _check_size(cloud: PointCloud, config: ModelConfig, name: str) -> None:
    if len(cloud) < config.min_points:
        raise TooFewPoints(f"{name} has {len(cloud)} points; at least {config.min_points} required")


def register_pair(
    src: PointCloud,
    tgt: PointCloud,
    params: ModelParams | None,
    config: ModelConfig,
    oracle_gt: RigidTransform | None = None,
) -> tuple[RigidTransform, dict]:
    """Coarse-to-fine registration of ``src`` onto ``tgt``.

    With ``oracle_gt`` the learned descriptors are replaced by positions in the
    target frame (source positions mapped by ``oracle_gt``), which makes every
    matching stage trivially correct and isolates the geometric plumbing.
    """
    _check_size(src, config, "source")
    _check_size(tgt, config, "target")
    oracle = oracle_gt is not None
    if not oracle and params is None:
        raise ValueError("learned mode needs model parameters")
    times: dict[str, float] = {}
    counts: dict[str, int] = {}
    clock = time.perf_counter()

    def lap(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        times[name] = 1000.0 * (now - clock)
        clock = now

    vs = config.voxel_sizes
    with nx.no_grad():
        h_src = build_hierarchy(src, vs)
        h_tgt = build_hierarchy(tgt, vs)
        if oracle:
            kind, temp = "neg_sqdist", config.oracle_temperature
            top_s = nx.Tensor(oracle_gt.apply(h_src.top.points))
            top_t = nx.Tensor(h_tgt.top.points)
        else:
            kind, temp = "cosine", config.temperature
            feats = encode_pair(params, config, h_src, h_tgt)
            h_src, h_tgt = feats.h_src, feats.h_tgt
            top_s, top_t = feats.top_src, feats.top_tgt
        lap("encode")
        counts["superpoints_src"], counts["superpoints_tgt"] = top_s.shape[0], top_t.shape[0]

        M = coarse_match(top_s, top_t, temp if not oracle else config.temperature, kind, vs[2])
        ci, cj, cw = extract_coarse_pairs(M, config.top_k)
        counts["coarse_pairs"] = int(ci.size)
        lap("coarse")

        c = _keypoint_correspondences(h_src, h_tgt, params, config, oracle_gt, ci, cj, cw, counts)
        lap("keypoints")
        inliers = filter_consistency(c, config.tau_d_value)
        counts["inliers"] = len(inliers)
        if len(inliers) < 3:
            raise NoOverlap("too few geometrically consistent keypoint correspondences")
        T0 = weighted_svd(inliers)
        lap("initial")

        if oracle:
            ds = oracle_gt.apply(h_src.levels[FINE].points)
            dt = h_tgt.levels[FINE].points
            fc = fine_correspondences(h_src, h_tgt, T0, ds, dt, config.fine_radius_value,
                                      temp, "neg_sqdist", config.fine_voxel)
        else:
            ds = h_src.feature(FINE) @ params.fine_desc
            dt = h_tgt.feature(FINE) @ params.fine_desc
            fc = fine_correspondences(h_src, h_tgt, T0, ds, dt, config.fine_radius_value, config.temperature)
        counts["fine_correspondences"] = len(fc)
        T = weighted_svd(fc)
        lap("fine")

    diag = {
        "mode": "oracle" if oracle else "learned",
        "timings_ms": times,
        "counts": counts,
        "inlier_ratio": counts["inliers"] / max(counts["keypoint_correspondences"], 1),
        "initial": T0.to_json(),
    }
    return T, diag


def _keypoint_correspondences(h_src, h_tgt, params, config, oracle_gt, ci, cj, cw, counts) -> CorrespondenceSet:
    up_s = h_src.map_to(SEMI_DENSE, h_src.depth)
    up_t = h_tgt.map_to(SEMI_DENSE, h_tgt.depth)
    best_patch = np.zeros(h_src.levels[-1].points.shape[0])
    np.maximum.at(best_patch, ci, cw)
    sel_s = np.flatnonzero(np.isin(up_s, ci))
    # cap the keypoint budget, preferring nodes in confident patches
    sel_s = sel_s[np.lexsort((sel_s, -best_patch[up_s[sel_s]]))][: config.keypoint_budget]
    sel_t = np.flatnonzero(np.isin(up_t, cj))[: 4 * config.keypoint_budget]
    oracle = oracle_gt is not None
    if oracle:
        kp_s = detect_keypoints(h_src, nodes=sel_s)
        kp_t = detect_keypoints(h_tgt, nodes=sel_t)
        ds = nx.Tensor(oracle_gt.apply(kp_s.positions.data))
        dt = kp_t.positions
        W, kind, scale, temp = None, "neg_sqdist", config.voxel_sizes[1], config.oracle_temperature
    else:
        head = (params.kp_sigma_W, params.kp_sigma_b)
        kp_s = detect_keypoints(h_src, params.kp_score, head, params.kp_desc, sel_s)
        kp_t = detect_keypoints(h_tgt, params.kp_score, head, params.kp_desc, sel_t)
        ds, dt = kp_s.descriptors, kp_t.descriptors
        W, kind, scale, temp = symmetric_bilinear(params.V), "bilinear", 1.0, config.temperature
    counts["keypoints_src"], counts["keypoints_tgt"] = len(kp_s), len(kp_t)
    anc_s = up_s[kp_s.node_index]
    anc_t = up_t[kp_t.node_index]
    best_w = np.full(len(kp_s), -1.0)
    best_y = np.zeros((len(kp_s), 3))
    for a, b, m in zip(ci, cj, cw):
        rows = np.flatnonzero(anc_s == a)
        cols = np.flatnonzero(anc_t == b)
        if rows.size == 0 or cols.size == 0:
            continue
        y_hat, conf = soft_match(ds.data[rows], dt.data[cols], kp_t.positions.data[cols], temp, kind, scale, W)
        w = m * conf.data
        if oracle:
            # a source keypoint without any target keypoint nearby has no match
            d2 = ((ds.data[rows][:, None, :] - dt.data[cols][None, :, :]) ** 2).sum(-1).min(axis=1)
            w = np.where(d2 <= (config.oracle_gate * scale) ** 2, w, -1.0)
        better = w > best_w[rows]
        best_w[rows[better]] = w[better]
        best_y[rows[better]] = y_hat.data[better]
    keep = np.flatnonzero(best_w > 0)
    counts["keypoint_correspondences"] = int(keep.size)
    if keep.size < 3:
        raise NoOverlap("too few keypoint correspondences between the clouds")
    return CorrespondenceSet(kp_s.positions.data[keep], best_y[keep], best_w[keep], index=keep)


# -- training -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainSample:
    """Ground truth for one pair, precomputed once per dataset."""

    h_src: Hierarchy
    h_tgt: Hierarchy
    T_gt: RigidTransform
    gt_pairs: np.ndarray
    gt_overlap: np.ndarray
    none_src: np.ndarray
    none_tgt: np.ndarray
    kp_nodes_src: np.ndarray
    kp_nodes_tgt: np.ndarray


def prepare_sample(src: PointCloud, tgt: PointCloud, T_gt: RigidTransform, config: ModelConfig) -> TrainSample:
    vs = config.voxel_sizes
    hs, ht = build_hierarchy(src, vs), build_hierarchy(tgt, vs)
    o = overlap_ratios(hs, ht, T_gt, config.fine_voxel)
    pairs = np.argwhere(o > 0)
    none_s, none_t = unmatched_nodes(hs, ht, T_gt, config.fine_voxel)
    n_semi_s, n_semi_t = len(hs.levels[SEMI_DENSE].points), len(ht.levels[SEMI_DENSE].points)
    kp_s = np.setdiff1d(np.arange(n_semi_s), none_s)[: config.keypoint_budget]
    kp_t = np.setdiff1d(np.arange(n_semi_t), none_t)[: config.keypoint_budget]
    return TrainSample(hs, ht, T_gt, pairs, o[pairs[:, 0], pairs[:, 1]], none_s, none_t, kp_s, kp_t)


def pair_losses(params: ModelParams, config: ModelConfig, s: TrainSample) -> tuple[Tensor, dict[str, Tensor]]:
    """All training terms for one pair, with teacher forcing: keypoints come
    from ground-truth overlapping nodes and the fine stage is gated by the
    ground-truth pose."""
    feats = encode_pair(params, config, s.h_src, s.h_tgt)
    hs, ht = feats.h_src, feats.h_tgt
    R, t = s.T_gt.rotation, s.T_gt.translation
    terms: dict[str, Tensor] = {}

    P = [coarse_match(a, b, config.temperature).scores for a, b in feats.layers]
    terms["s"] = loss_spot(P, s.gt_overlap, s.gt_pairs)
    o_hat_s = nx.reshape(nx.sigmoid(hs.feature(SEMI_DENSE) @ params.overlap_W + params.overlap_b), (-1,))
    o_hat_t = nx.reshape(nx.sigmoid(ht.feature(SEMI_DENSE) @ params.overlap_W + params.overlap_b), (-1,))
    terms["c"] = loss_coarse(P[-1], s.gt_overlap, s.gt_pairs, s.none_src, s.none_tgt, o_hat_s, o_hat_t)

    head = (params.kp_sigma_W, params.kp_sigma_b)
    kp_s = detect_keypoints(hs, params.kp_score, head, params.kp_desc, s.kp_nodes_src)
    kp_t = detect_keypoints(ht, params.kp_score, head, params.kp_desc, s.kp_nodes_tgt)
    x_al = kp_s.positions @ R.T + t
    terms["p"] = loss_keypoint(x_al, kp_s.sigma, kp_t.positions, kp_t.sigma)

    W = symmetric_bilinear(params.V)
    anchors, pos = positive_pairs(x_al.data, kp_t.positions.data, config.voxel_sizes[1])
    if anchors.size >= 2:
        d_a = nx.gather_rows(kp_s.descriptors, anchors)
        terms["f"] = loss_infonce_all(d_a, kp_t.descriptors, pos, W)
        x_a = nx.gather_rows(kp_s.positions, anchors)
        y_hat, _ = soft_match(d_a, kp_t.descriptors, kp_t.positions, config.temperature, "bilinear", 1.0, W)
        terms["k"] = loss_keycorr(x_a, y_hat, s.T_gt)
        scores = soft_consistency(x_a, y_hat, config.tau_d_value)
        labels = inlier_labels(x_a.data, y_hat.data, s.T_gt, config.r_f)
        terms["i"] = loss_inlier(scores, labels)

    ds = hs.feature(FINE) @ params.fine_desc
    dt = ht.feature(FINE) @ params.fine_desc
    fc = fine_correspondences(hs, ht, s.T_gt, ds, dt, config.fine_radius_value, config.temperature)
    R_hat, t_hat = weighted_procrustes(fc.src, fc.tgt, fc.weights)
    terms["t"], terms["R"] = loss_pose(R_hat, t_hat, s.T_gt)
    return loss_total(terms, config.loss_weights), terms


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm > 0:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


@dataclass
class AdamW:
    """Adaptive moments with weight decay applied directly to the parameters."""

    params: list[Tensor]
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data)


def learning_rate(config: ModelConfig, step: int, steps_per_epoch: int) -> float:
    epoch = step // max(steps_per_epoch, 1)
    return config.lr * config.decay_factor ** (epoch // max(config.decay_every, 1))


def smooth(trace, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(trace, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, x.size + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def toy_dataset(n_pairs: int = 20, seed: int = 1, n_points: int = 256) -> list:
    """Small synthetic pairs: moderate rotation, high overlap, a 1-unit scene."""
    from .io_data import synth_pair

    return [
        synth_pair(n_points, 0.7, 30.0, 0.2, 0.002, seed=seed * 1000 + k, scene_size=1.0)
        for k in range(n_pairs)
    ]


def train_toy(
    dataset,
    config: ModelConfig,
    steps: int,
    params: ModelParams | None = None,
    log=None,
) -> tuple[ModelParams, list[float]]:
    """AdamW with global-norm clipping; one pair per step in dataset order."""
    if params is None:
        params = init_model(config)
    if steps <= 0:
        return params, []
    samples = [d if isinstance(d, TrainSample) else prepare_sample(d.src, d.tgt, d.T_gt, config) for d in dataset]
    if not samples:
        raise ValueError("empty training set")
    tensors = params.tensors()
    opt = AdamW(tensors, config.lr, config.betas, config.adam_eps, config.weight_decay)
    trace = []
    for step in range(steps):
        total, _ = pair_losses(params, config, samples[step % len(samples)])
        value = total.item()
        if not np.isfinite(value):
            raise DivergedLoss(f"loss became {value} at step {step}")
        grads = nx.grad(total, tensors)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergedLoss(f"non-finite gradient at step {step}")
        grads, _ = clip_gradients(grads, config.clip_norm)
        opt.step(grads, learning_rate(config, step, len(samples)))
        trace.append(value)
        if log is not None:
            log(step, value)
    return params, trace


# -- evaluation and ablations ---------------------------------------------------------


def evaluate(pairs, params: ModelParams | None, config: ModelConfig, oracle: bool = False,
             rot_thresh: float = 5.0, trans_thresh: float = 2.0) -> dict:
    """Registration metrics over pairs; stage failures count as unsuccessful."""
    rows = []
    for p in pairs:
        try:
            T, _ = register_pair(p.src, p.tgt, params, config, p.T_gt if oracle else None)
            m = metrics(T, p.T_gt, rot_thresh, trans_thresh)
            rows.append({"rre": m.rre, "rte": m.rte, "success": m.success, "error": None})
        except (NoOverlap, ValueError) as e:
            rows.append({"rre": None, "rte": None, "success": False, "error": type(e).__name__})
    done = [r for r in rows if r["rre"] is not None]
    return {
        "pairs": len(rows),
        "registered": len(done),
        "recall": sum(r["success"] for r in rows) / len(rows) if rows else 0.0,
        "mean_rre": float(np.mean([r["rre"] for r in done])) if done else None,
        "mean_rte": float(np.mean([r["rte"] for r in done])) if done else None,
        "per_pair": rows,
    }


def ablation_settings() -> list[dict]:
    """Architecture variants, then curve x order-indicator for the hybrid (each setting once)."""
    rows = [{"variant": v, "curve": "zorder", "order_indicator": False} for v in VARIANTS]
    for curve in ("zorder", "hilbert", "xyz"):
        for oi in (False, True):
            row = {"variant": "hybrid", "curve": curve, "order_indicator": oi}
            if row not in rows:
                rows.append(row)
    return rows


def run_ablation(dataset, base: ModelConfig, steps: int, eval_pairs=None, settings=None) -> list[dict]:
    """Train each setting from the same seed and report loss and registration metrics."""
    table = []
    for s in settings or ablation_settings():
        config = base.replace(**s)
        t0 = time.perf_counter()
        params, trace = train_toy(dataset, config, steps)
        sm = smooth(trace)
        row = dict(s)
        row.update(
            initial_loss=float(sm[0]) if len(sm) else None,
            final_loss=float(sm[-1]) if len(sm) else None,
            seconds=time.perf_counter() - t0,
        )
        if eval_pairs is not None:
            ev = evaluate(eval_pairs, params, config, rot_thresh=15.0, trans_thresh=0.3)
            row.update(recall=ev["recall"], mean_rre=ev["mean_rre"], mean_rte=ev["mean_rte"])
        table.append(row)
    return table


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.7g}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)
