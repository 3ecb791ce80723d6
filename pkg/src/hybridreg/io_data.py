"""Point file I/O (XYZ text, ASCII PLY) and synthetic registration pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InfeasibleOverlap, ParseError, UnsupportedPlyFeature
from .geom import PointCloud, RigidTransform, random_rotation

PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def _parse_floats(tokens: list[str], lineno: int) -> list[float]:
    if len(tokens) != 3:
        raise ParseError(f"expected 3 coordinates, got {len(tokens)}", lineno)
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"not a number in {' '.join(tokens)!r}", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("coordinates must be finite", lineno)
    return vals


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(_parse_floats(line.split(), lineno))
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    return PointCloud(np.array(rows))


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.17g")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise EmptyCloud(f"{path}: empty file")
    if lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    current = None
    end = None
    for lineno, raw in enumerate(lines[1:], 2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise UnsupportedPlyFeature(f"line {lineno}: only ASCII PLY is supported, got {' '.join(tok[1:])}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", lineno)
            current = tok[1]
            if current != "vertex":
                raise UnsupportedPlyFeature(f"line {lineno}: element {current!r} is not supported")
            try:
                n_vertex = int(tok[2])
            except ValueError:
                raise ParseError("vertex count is not an integer", lineno) from None
        elif tok[0] == "property":
            if current != "vertex":
                raise ParseError("property outside the vertex element", lineno)
            if len(tok) != 3 or tok[1] == "list":
                raise UnsupportedPlyFeature(f"line {lineno}: list properties are not supported")
            if tok[1] not in PLY_FLOAT_TYPES:
                raise UnsupportedPlyFeature(f"line {lineno}: property type {tok[1]!r} is not supported")
            props.append(tok[2])
        elif tok[0] == "end_header":
            end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if end is None:
        raise ParseError("missing end_header", len(lines))
    if props != ["x", "y", "z"]:
        raise UnsupportedPlyFeature(f"vertex properties must be exactly x y z, got {props}")
    if not n_vertex:
        raise EmptyCloud(f"{path}: no vertices")
    rows = []
    for lineno in range(end + 1, len(lines) + 1):
        tok = lines[lineno - 1].split()
        if not tok:
            continue
        if len(rows) == n_vertex:
            raise ParseError("more vertex lines than declared", lineno)
        rows.append(_parse_floats(tok, lineno))
    if len(rows) != n_vertex:
        raise ParseError(f"expected {n_vertex} vertices, found {len(rows)}", len(lines))
    return PointCloud(np.array(rows))


def write_ply(path, cloud: PointCloud) -> None:
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "w") as f:
        f.write(header)
        np.savetxt(f, cloud.points, fmt="%.17g")


def read_points(path) -> PointCloud:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_points(path, cloud: PointCloud) -> None:
    (write_ply if str(path).lower().endswith(".ply") else write_xyz)(path, cloud)


def write_transform(path, T: RigidTransform) -> None:
    Path(path).write_text(json.dumps(T.to_json(), indent=2) + "\n")


def read_transform(path) -> RigidTransform:
    return RigidTransform.from_json(json.loads(Path(path).read_text()))


# -- synthetic pairs ------------------------------------------------------------


@dataclass(frozen=True)
class SynthPair:
    src: PointCloud
    tgt: PointCloud
    T_gt: RigidTransform  # maps src into the tgt frame
    overlap: float


PRESETS = {
    "highoverlap": dict(n_points=1500, overlap_fraction=0.5, rot_max_deg=180.0, trans_max=1.0, noise_sigma=0.005),
    "lowoverlap": dict(n_points=1500, overlap_fraction=0.2, rot_max_deg=180.0, trans_max=1.0, noise_sigma=0.005),
}


def _orthonormal_frame(rng: np.random.Generator) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return Q


def base_scene(n: int, rng: np.random.Generator, size: float = 3.0) -> np.ndarray:
    """Random planar patches, sphere caps and a little uniform clutter in a ``size`` cube."""
    n_clutter = max(1, n // 20)
    n_surface = n - n_clutter
    n_planes = int(rng.integers(4, 7))
    n_spheres = int(rng.integers(2, 4))
    shares = rng.dirichlet(np.full(n_planes + n_spheres, 4.0))
    counts = np.floor(shares * n_surface).astype(int)
    counts[0] += n_surface - counts.sum()
    parts = []
    for c in counts[:n_planes]:
        Q = _orthonormal_frame(rng)
        half = rng.uniform(0.3, 0.7, size=2) * size / 2
        centre = rng.uniform(-0.35, 0.35, size=3) * size
        uv = rng.uniform(-1.0, 1.0, size=(c, 2)) * half
        parts.append(centre + uv[:, :1] * Q[:, 0] + uv[:, 1:] * Q[:, 1])
    for c in counts[n_planes:]:
        radius = rng.uniform(0.1, 0.2) * size
        centre = rng.uniform(-0.3, 0.3, size=3) * size
        d = rng.normal(size=(c, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        parts.append(centre + radius * d)
    parts.append(rng.uniform(-0.5, 0.5, size=(n_clutter, 3)) * size)
    return np.concatenate(parts)


def neighbor_overlap(a: np.ndarray, b: np.ndarray, radius: float) -> float:
    """Fraction of ``a`` with a point of ``b`` within ``radius``."""
    d, _ = cKDTree(b).query(a)
    return float(np.mean(d <= radius))


def median_spacing(p: np.ndarray) -> float:
    d, _ = cKDTree(p).query(p, 2)
    return float(np.median(d[:, 1]))


def synth_pair(
    n_points: int = 1500,
    overlap_fraction: float = 0.5,
    rot_max_deg: float = 180.0,
    trans_max: float = 1.0,
    noise_sigma: float = 0.005,
    seed: int = 0,
    scene_size: float = 3.0,
) -> SynthPair:
    """Two cropped, noisy, rigidly displaced views of one random scene.

    The scene is sliced by rank along a random direction: the source view holds
    ranks ``[0, n)`` and the target ``[n - k, 2n - k)``. The shared count ``k``
    is the smallest one whose noise-free overlap (share of source points with a
    target point within twice the median spacing) reaches the request; the
    result must land within ``[request, request + 0.05]``. A request of 1
    shares every point, so without noise or motion the two views coincide.
    """
    if not 0.0 < overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must be in (0, 1]")
    if not 0.0 <= rot_max_deg <= 180.0:
        raise ValueError("rot_max_deg must be in [0, 180]")
    if n_points < 4:
        raise ValueError("n_points must be at least 4")
    rng = np.random.default_rng(seed)
    base = base_scene(2 * n_points, rng, scene_size)
    order = np.argsort(base @ _orthonormal_frame(rng)[:, 0], kind="stable")
    base = base[order]
    n = n_points
    src_view = base[:n]
    radius = 2.0 * median_spacing(src_view)

    def overlap(k: int) -> float:
        return neighbor_overlap(src_view, base[n - k : 2 * n - k], radius)

    lo, hi = 0, n
    if overlap_fraction >= 1.0:
        lo = hi = n
    elif overlap(0) >= overlap_fraction:
        hi = 0
    while lo < hi:
        mid = (lo + hi) // 2
        if overlap(mid) >= overlap_fraction:
            hi = mid
        else:
            lo = mid + 1
    k = hi
    achieved = overlap(k)
    if not overlap_fraction <= achieved <= overlap_fraction + 0.05:
        raise InfeasibleOverlap(f"requested overlap {overlap_fraction:.3f}, closest achievable {achieved:.3f}")
    tgt_view = base[n - k : 2 * n - k]
    T_gt = RigidTransform(random_rotation(rng, rot_max_deg), _random_offset(rng, trans_max))
    src = T_gt.inverse().apply(src_view)
    src = src[rng.permutation(n)]
    tgt = tgt_view[rng.permutation(n)]
    if noise_sigma > 0:
        src = src + rng.normal(scale=noise_sigma, size=src.shape)
        tgt = tgt + rng.normal(scale=noise_sigma, size=tgt.shape)
    return SynthPair(PointCloud(src), PointCloud(tgt), T_gt, achieved)


def _random_offset(rng: np.random.Generator, trans_max: float) -> np.ndarray:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * rng.uniform(0.0, trans_max)


def synth_preset(name: str, seed: int = 0, **overrides) -> SynthPair:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return synth_pair(**{**PRESETS[name], **overrides}, seed=seed)
