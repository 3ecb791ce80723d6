"""Seeded finite-difference gradient checks for every differentiable stage.

Each suite maps a seed to ``(label, thunk)`` pairs; calling a thunk runs
:func:`numeric.gradcheck` and returns its report. Toy sizes are small so the
whole collection runs in seconds.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numeric as nx
from .attention import cross_attention_block, init_transformer_block, self_attention_block
from .backbone import build_hierarchy, encode_features, init_backbone
from .estimator import weighted_procrustes
from .geom import PointCloud, RigidTransform, random_rotation
from .losses import (
    loss_coarse,
    loss_infonce,
    loss_inlier,
    loss_keycorr,
    loss_keypoint,
    loss_pose,
    loss_spot,
    loss_total,
    symmetric_bilinear,
)
from .matching import SEMI_DENSE, coarse_match, detect_keypoints, soft_consistency, soft_match
from .ssm import init_mamba_block, init_selective_ssm, mamba_block, selective_ssm

TOL = 1e-4
Check = tuple[str, Callable[[], nx.GradcheckReport]]


def _param(rng, *shape, scale=1.0) -> nx.Tensor:
    return nx.parameter(rng.normal(scale=scale, size=shape))


def _check(f, params, names=None, max_entries=None, seed=0) -> nx.GradcheckReport:
    return nx.gradcheck(f, params, step=1e-5, tol=TOL, names=names, max_entries=max_entries, seed=seed)


def _tensors(obj) -> tuple[list[str], list[nx.Tensor]]:
    named = nx.named_parameters(obj)
    return [n for n, _ in named], [t for _, t in named]


def loss_suite(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    out: list[Check] = []

    x, y = _param(rng, 6, 3), _param(rng, 5, 3)
    sx, sy = _param(rng, 6), _param(rng, 5)
    out.append(("keypoint", lambda: _check(
        lambda: loss_keypoint(x, nx.softplus(sx) + 0.1, y, nx.softplus(sy) + 0.1), [x, y, sx, sy])))

    fa, fb = _param(rng, 5, 4), _param(rng, 6, 4)
    pairs = np.array([[0, 1], [2, 2], [3, 5], [4, 0]])
    o = rng.uniform(0.2, 1.0, size=4)
    out.append(("spot", lambda: _check(
        lambda: loss_spot([coarse_match(fa, fb, 0.5).scores, coarse_match(fa * fa, fb, 0.3).scores], o, pairs),
        [fa, fb])))

    zx, zy = _param(rng, 5), _param(rng, 6)
    out.append(("coarse", lambda: _check(
        lambda: loss_coarse(coarse_match(fa, fb, 0.5).scores, o, pairs, [1], [3, 4], nx.sigmoid(zx), nx.sigmoid(zy)),
        [fa, fb, zx, zy])))

    dx, dp, dn, V = _param(rng, 4, 3), _param(rng, 4, 3), _param(rng, 4, 5, 3), _param(rng, 3, 3, scale=0.5)
    out.append(("infonce", lambda: _check(
        lambda: loss_infonce(dx, dp, dn, symmetric_bilinear(V)), [dx, dp, dn, V])))

    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    ks, kt, tp = _param(rng, 5, 3), _param(rng, 7, 3), _param(rng, 7, 3)
    out.append(("keycorr", lambda: _check(
        lambda: loss_keycorr(ks, soft_match(ks, kt, tp, 0.5, "cosine")[0], T), [ks, kt, tp])))

    src, tgt = _param(rng, 8, 3), _param(rng, 8, 3)
    labels = (rng.uniform(size=8) < 0.5).astype(float)
    out.append(("inlier", lambda: _check(
        lambda: loss_inlier(soft_consistency(src, tgt, 1.5), labels), [src, tgt])))

    P = rng.normal(size=(10, 3))
    Tp = RigidTransform(random_rotation(rng), rng.normal(size=3))
    Q = nx.parameter(Tp.apply(P) + 0.05 * rng.normal(size=P.shape))
    wl = _param(rng, 10)

    def pose(which):
        def f():
            R, t = weighted_procrustes(P, Q, nx.softplus(wl))
            return loss_pose(R, t, Tp)[which]
        return f

    out.append(("translation", lambda: _check(pose(0), [Q, wl])))
    out.append(("rotation", lambda: _check(pose(1), [Q, wl])))

    terms = {k: _param(rng) for k in ("p", "s", "c", "f", "k", "i", "t", "R")}
    out.append(("total", lambda: _check(
        lambda: loss_total({k: v * v for k, v in terms.items()}), list(terms.values()))))
    return out


def ssm_suite(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    sp = init_selective_ssm(rng, 4, 3)
    xs = _param(rng, 9, 4)
    names, tensors = _tensors(sp)
    mp = init_mamba_block(rng, 6, 4, 2, 3)
    F = _param(rng, 10, 6)
    m_names, m_tensors = _tensors(mp)
    probe = rng.normal(size=(10, 6))
    return [
        ("selective_scan", lambda: _check(lambda: nx.square(selective_ssm(sp, xs)).sum(), [xs, *tensors], ["x", *names])),
        ("mamba_block", lambda: _check(lambda: (mamba_block(mp, F) * probe).sum(), [F, *m_tensors], ["F", *m_names])),
        ("mamba_block_indicator", lambda: _check(
            lambda: (mamba_block(mp, F, order_indicator=True) * probe).sum(), [F, *m_tensors], ["F", *m_names])),
    ]


def attention_suite(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    p = init_transformer_block(rng, 8, 2)
    names, tensors = _tensors(p)
    Fa, Fb = _param(rng, 6, 8), _param(rng, 5, 8)
    ra, rb = rng.normal(size=(6, 8)), rng.normal(size=(5, 8))

    def cross():
        a, b = cross_attention_block(p, Fa, Fb)
        return (a * ra).sum() + (b * rb).sum()

    return [
        ("self_block", lambda: _check(lambda: (self_attention_block(p, Fa) * ra).sum(), [Fa, *tensors], ["F", *names])),
        ("cross_block", lambda: _check(cross, [Fa, Fb, *tensors], ["Fs", "Ft", *names])),
    ]


def _toy_cloud(rng, n: int = 120) -> PointCloud:
    return PointCloud(rng.uniform(-0.5, 0.5, size=(n, 3)))


def backbone_suite(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    h = build_hierarchy(_toy_cloud(rng), (0.1, 0.2, 0.4))
    p = init_backbone(rng, (4, 6, 8), 8)
    names, tensors = _tensors(p)
    probes = [None] + [rng.normal(size=(len(h.levels[l].points), w)) for l, w in zip((1, 2, 3), (4, 6, 8))]

    def f():
        e = encode_features(h, p)
        return sum(((e.feature(l) * probes[l]).sum() for l in (1, 2, 3)), nx.Tensor(0.0))

    return [("encoder", lambda: _check(f, tensors, names, max_entries=8, seed=seed))]


def matching_suite(seed: int) -> list[Check]:
    # imported here: the pipeline depends on this module's siblings, not the reverse
    from .io_data import synth_pair
    from .pipeline import encode_pair, init_model, pair_losses, prepare_sample, toy_config

    rng = np.random.default_rng(seed)
    config = toy_config(widths=(4, 6, 8), backbone_hidden=8, d_model=8, d_state=4, d_desc=6, n_blocks=1)
    pair = synth_pair(96, 0.7, 30.0, 0.2, 0.002, seed=seed, scene_size=1.0)
    sample = prepare_sample(pair.src, pair.tgt, pair.T_gt, config)
    params = init_model(config, seed)
    names, tensors = [n for n, _ in params.named()], [t for _, t in params.named()]

    def coarse():
        feats = encode_pair(params, config, sample.h_src, sample.h_tgt)
        P = [coarse_match(a, b, config.temperature).scores for a, b in feats.layers]
        return loss_spot(P, sample.gt_overlap, sample.gt_pairs) + loss_coarse(
            P[-1], sample.gt_overlap, sample.gt_pairs)

    # two semi-dense nodes with three fine children each
    pts = np.array([[0.0, 0, 0], [0.02, 0, 0], [0, 0.03, 0], [1.0, 0, 0], [1.02, 0.01, 0], [1, 0, 0.03]])
    h2 = build_hierarchy(PointCloud(pts), (0.05, 0.3, 2.0))
    bb = init_backbone(rng, (4, 6, 8), 8)
    h2 = encode_features(h2, bb)
    kp_w = _param(rng, 4, 1)
    sig_W, sig_b = _param(rng, 6, 1, scale=0.3), _param(rng, 1, scale=0.3)
    y_kp, sy = rng.normal(scale=0.5, size=(2, 3)), np.array([0.7, 1.3])

    def keypoint():
        kp = detect_keypoints(h2, kp_w, (sig_W, sig_b))
        return loss_keypoint(kp.positions, kp.sigma, y_kp, sy)

    assert len(h2.levels[SEMI_DENSE].points) == 2
    return [
        ("coarse_stage", lambda: _check(coarse, tensors, names, max_entries=3, seed=seed)),
        ("keypoint_detection", lambda: _check(keypoint, [kp_w, sig_W, sig_b], ["score", "sigma_W", "sigma_b"])),
        ("pair_losses", lambda: _check(lambda: pair_losses(params, config, sample)[0], tensors, names,
                                        max_entries=2, seed=seed)),
    ]


SUITES: dict[str, Callable[[int], list[Check]]] = {
    "losses": loss_suite,
    "ssm": ssm_suite,
    "attention": attention_suite,
    "backbone": backbone_suite,
    "matching": matching_suite,
}
