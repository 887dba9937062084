"""Synthetic labelled face-flow pairs: seeded sequences, Lambertian rendering, dataset writer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotate import FlowField, PnccImage, compute_D, compute_flow_gt, compute_pncc
from .io import write_flow, write_pbm, write_ppm
from .model import (
    CameraPose,
    MorphableModel,
    ShapeCoefficients,
    eval_shape,
    pose_points,
    save_model,
)
from .raster import RasterMap, project_to_pixels, rasterize

__all__ = [
    "Lighting",
    "SequenceSpec",
    "LabeledPair",
    "sample_sequence",
    "vertex_albedo",
    "vertex_normals",
    "render_frame",
    "make_pair",
    "sequence_pairs",
    "build_dataset",
    "GAP_THRESHOLD",
]

log = logging.getLogger(__name__)

GAP_THRESHOLD = 1.0
BACKGROUND = 0.1


@dataclass(frozen=True)
class Lighting:
    """Directional Lambert light plus ambient term.

    `direction` points from the surface towards the light, in the same axes as the posed
    mesh (the camera looks along +z, so the default light sits near the camera).

    mode "head" keeps the light fixed to the face (exactly photo-consistent under pose
    changes); mode "world" keeps it fixed to the camera.
    """

    mode: str = "head"
    direction: tuple = (0.3, -0.4, -1.0)
    ambient: float = 0.35

    def __post_init__(self):
        if self.mode not in ("head", "world"):
            raise ValueError("lighting mode must be 'head' or 'world'")


@dataclass(frozen=True, eq=False)
class SequenceSpec:
    seed: int
    identity: np.ndarray  # (n_i,)
    expressions: np.ndarray  # (F, n_e)
    poses: np.ndarray  # (F, 7): pitch, yaw, roll, tx, ty, tz, scale
    width: int
    height: int
    texture_seed: int
    lighting: Lighting = field(default_factory=Lighting)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def coefficients(self, f: int) -> ShapeCoefficients:
        return ShapeCoefficients(self.identity, self.expressions[f])

    def pose(self, f: int) -> CameraPose:
        return CameraPose.from_params(self.poses[f])


@dataclass(eq=False)
class LabeledPair:
    i1: np.ndarray  # (3, H, W) in [0, 1]
    i2: np.ndarray
    pncc: PnccImage
    flow: FlowField
    mask: np.ndarray
    metadata: dict
    rm1: RasterMap | None = None
    rm2: RasterMap | None = None


def sample_sequence(
    model: MorphableModel,
    seed: int,
    n_frames: int = 24,
    width: int = 64,
    height: int = 64,
    sigma_e: float = 0.35,
    sigma_r: float = 0.04,
    sigma_t: float = 1.2,
    sigma_s: float = 0.02,
    lighting: Lighting | None = None,
) -> SequenceSpec:
    """Seeded random walk over expression and pose.

    Per-frame steps are bounded: |de| <= sigma_e per coefficient, |d angle| <= sigma_r rad,
    |d t| <= sigma_t pixels along x and y, and relative scale change <= sigma_s.
    """
    rng = np.random.default_rng(seed)
    identity = rng.normal(size=model.n_identity)
    scale0 = 0.34 * min(width, height) * rng.uniform(0.9, 1.1)

    e = rng.normal(scale=0.5, size=model.n_expression)
    ang = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1)])
    centre = np.array([width / 2, height / 2]) + rng.uniform(-2, 2, size=2)
    scale = scale0
    ang_lim = np.array([0.4, 0.6, 0.3])
    exprs, poses = [], []
    for f in range(n_frames):
        if f:
            e = np.clip(e + rng.uniform(-sigma_e, sigma_e, size=e.shape), -2.5, 2.5)
            ang = np.clip(ang + rng.uniform(-sigma_r, sigma_r, size=3), -ang_lim, ang_lim)
            centre = np.clip(
                centre + rng.uniform(-sigma_t, sigma_t, size=2),
                [width * 3 / 8, height * 3 / 8],
                [width * 5 / 8, height * 5 / 8],
            )
            scale = float(np.clip(scale * (1 + rng.uniform(-sigma_s, sigma_s)), 0.85 * scale0, 1.15 * scale0))
        exprs.append(e.copy())
        # translation in model units so that the model origin lands on `centre`
        poses.append([*ang, centre[0] / scale, centre[1] / scale, 2.0, scale])
    return SequenceSpec(
        seed=seed,
        identity=identity,
        expressions=np.array(exprs),
        poses=np.array(poses),
        width=width,
        height=height,
        texture_seed=int(rng.integers(2**31)),
        lighting=lighting or Lighting(),
    )


def vertex_albedo(model: MorphableModel, texture_seed: int) -> np.ndarray:
    """Smooth seeded RGB albedo per vertex, (N, 3) in roughly [0.15, 0.85].

    Defined on the mean-shape x-y layout so it moves with the surface.
    """
    rng = np.random.default_rng(texture_seed)
    xy = model.mean_matrix()[:2].T
    n_terms = 6
    mag = rng.uniform(5.0, 11.0, size=n_terms)
    ang = rng.uniform(0, 2 * np.pi, size=n_terms)
    freq = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    waves = np.sin(xy @ freq.T + rng.uniform(0, 2 * np.pi, size=n_terms))  # (N, n_terms)
    shared = waves @ rng.normal(size=n_terms)
    tint = waves @ rng.normal(scale=0.5, size=(n_terms, 3))
    base = rng.uniform(0.4, 0.6, size=3)
    tex = shared[:, None] + tint
    tex = tex / (np.abs(tex).max() + 1e-12)
    return base + 0.35 * tex


def vertex_normals(S: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals (N, 3), oriented towards -z for the face cap."""
    P = np.asarray(S).T
    tri = np.asarray(triangles)
    fn = np.cross(P[tri[:, 1]] - P[tri[:, 0]], P[tri[:, 2]] - P[tri[:, 0]])
    n = np.zeros_like(P)
    for k in range(3):
        np.add.at(n, tri[:, k], fn)
    n /= np.linalg.norm(n, axis=1, keepdims=True) + 1e-12
    # Delaunay triangles are counter-clockwise in x-y, so face normals point to +z; flip
    return -n


def _vertex_colors(model, S, pose, lighting, texture_seed):
    albedo = vertex_albedo(model, texture_seed)
    n = vertex_normals(S, model.triangles)
    if lighting.mode == "world":
        n = n @ pose.rotation.T
    light = np.asarray(lighting.direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.clip(n @ light, 0.0, None)
    return albedo * (lighting.ambient + (1 - lighting.ambient) * lam)[:, None]


def _shade(rm: RasterMap, colors: np.ndarray) -> np.ndarray:
    img = np.full((rm.height, rm.width, 3), BACKGROUND)
    mask = rm.mask
    if mask.any():
        corners = colors[rm.triangles[rm.triangle_id[mask]]]  # (M, 3, 3)
        img[mask] = np.einsum("mk,mkc->mc", rm.barycentric[mask], corners)
    return np.transpose(img, (2, 0, 1))


def _render(model, coeffs, pose, lighting, texture_seed, width, height):
    S = eval_shape(model, coeffs)
    xy, z = project_to_pixels(pose_points(S, pose), width, height)
    rm = rasterize(model.triangles, xy, z, width, height)
    img = _shade(rm, _vertex_colors(model, S, pose, lighting, texture_seed))
    return np.clip(img, 0.0, 1.0), rm, S


def render_frame(model, coeffs, pose, lighting, texture_seed, width, height) -> np.ndarray:
    """Render a Gouraud-shaded Lambertian face; returns (3, H, W) in [0, 1]."""
    return _render(model, coeffs, pose, lighting or Lighting(), texture_seed, width, height)[0]


def make_pair(model: MorphableModel, spec: SequenceSpec, i: int, j: int, D: float, keep_raster: bool = False):
    """Render frames i < j and annotate them; None when the mean foreground flow is <= 1."""
    if not 0 <= i < j < spec.n_frames:
        raise ValueError(f"need 0 <= i < j < {spec.n_frames}, got ({i}, {j})")
    W, H = spec.width, spec.height
    pose1, pose2 = spec.pose(i), spec.pose(j)
    i1, rm1, S1 = _render(model, spec.coefficients(i), pose1, spec.lighting, spec.texture_seed, W, H)
    i2, rm2, S2 = _render(model, spec.coefficients(j), pose2, spec.lighting, spec.texture_seed, W, H)
    flow = compute_flow_gt(S1, S2, pose1, pose2, rm1)
    if not flow.mask.any():
        return None
    mean_flow = float(np.linalg.norm(flow.vectors[flow.mask], axis=1).mean())
    if mean_flow <= GAP_THRESHOLD:
        return None
    pncc = compute_pncc(S1, pose1, rm1, W, H, D)
    meta = {
        "sequence_seed": spec.seed,
        "frame_i": i,
        "frame_j": j,
        "width": W,
        "height": H,
        "texture_seed": spec.texture_seed,
        "lighting": spec.lighting.mode,
        "identity": spec.identity,
        "expression_i": spec.expressions[i],
        "expression_j": spec.expressions[j],
        "pose_i": spec.poses[i],
        "pose_j": spec.poses[j],
        "mean_flow": mean_flow,
    }
    return LabeledPair(
        i1, i2, pncc, flow, flow.mask, meta, rm1 if keep_raster else None, rm2 if keep_raster else None
    )


def sequence_pairs(model, spec: SequenceSpec, D: float, keep_raster: bool = False):
    """Yield pairs along a sequence, widening the frame gap while the flow is too small."""
    i = 0
    j = 1
    while j < spec.n_frames:
        pair = make_pair(model, spec, i, j, D, keep_raster)
        if pair is None:
            j += 1
            continue
        yield pair
        i, j = j, j + 1


def sequence_shapes(model, spec: SequenceSpec):
    for f in range(spec.n_frames):
        yield eval_shape(model, spec.coefficients(f)), spec.pose(f)


def _fmt(v) -> str:
    if isinstance(v, np.ndarray):
        return " ".join(repr(float(x)) for x in v.ravel())
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_pair(pair: LabeledPair, pair_dir) -> None:
    d = Path(pair_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "i1.ppm", pair.i1)
    write_ppm(d / "i2.ppm", pair.i2)
    write_flow(d / "pncc.bin", pair.pncc.values)
    write_flow(d / "flow.f3df", pair.flow)
    write_pbm(d / "mask.pbm", pair.mask)
    with open(d / "meta.txt", "w") as fh:
        for k, v in pair.metadata.items():
            fh.write(f"{k} = {_fmt(v)}\n")


def split_sequences(n: int, seed: int, train_fraction: float = 0.8):
    """Assign sequence indices to train/test by a seeded shuffle (no sequence in both)."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.ceil(train_fraction * n)) if n > 1 else n
    n_train = min(n_train, n - 1) if n > 1 else n
    train = sorted(int(k) for k in order[:n_train])
    test = sorted(int(k) for k in order[n_train:])
    return train, test


def build_dataset(model: MorphableModel, specs, out_dir, model_seed=None, split_seed: int = 0) -> dict:
    """Write pairs, the model and a manifest; returns the manifest as a dict.

    Layout: ``model.f3mm``, ``manifest.txt`` and ``pairs/NNNNNN/{i1.ppm, i2.ppm, pncc.bin,
    flow.f3df, mask.pbm, meta.txt}``. D is computed once over every frame of every sequence.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("no sequences given")
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.f3mm")
    D = compute_D(sp for spec in specs for sp in sequence_shapes(model, spec))
    train, test = split_sequences(len(specs), split_seed)
    split_of = {k: "train" for k in train} | {k: "test" for k in test}

    rows = []
    for k, spec in enumerate(specs):
        n_before = len(rows)
        for pair in sequence_pairs(model, spec, D):
            pid = len(rows)
            pair.metadata["sequence"] = k
            write_pair(pair, out / "pairs" / f"{pid:06d}")
            rows.append((pid, k, pair.metadata["frame_i"], pair.metadata["frame_j"], split_of[k]))
        if len(rows) == n_before:
            log.warning("sequence %d (seed %d) produced no pairs", k, spec.seed)
    if not rows:
        log.warning("every candidate pair was skipped by the gap rule")

    manifest = {
        "D": D,
        "model_seed": model_seed,
        "n_vertices": model.n_vertices,
        "n_identity": model.n_identity,
        "n_expression": model.n_expression,
        "split_seed": split_seed,
        "sequences": [(k, spec.seed, split_of[k]) for k, spec in enumerate(specs)],
        "pairs": rows,
    }
    write_manifest(out / "manifest.txt", manifest)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        fh.write(f"D = {manifest['D']!r}\n")
        for key in ("model_seed", "n_vertices", "n_identity", "n_expression", "split_seed"):
            fh.write(f"{key} = {manifest[key]}\n")
        for k, seed, split in manifest["sequences"]:
            fh.write(f"sequence {k} {seed} {split}\n")
        for pid, k, i, j, split in manifest["pairs"]:
            fh.write(f"pair {pid:06d} {k} {i} {j} {split}\n")


def read_manifest(path) -> dict:
    manifest = {"sequences": [], "pairs": []}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "sequence":
                manifest["sequences"].append((int(parts[1]), int(parts[2]), parts[3]))
            elif parts[0] == "pair":
                manifest["pairs"].append((int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]), parts[5]))
            elif len(parts) == 3 and parts[1] == "=":
                key, val = parts[0], parts[2]
                manifest[key] = float(val) if key == "D" else (None if val == "None" else int(val))
    if "D" not in manifest:
        raise ValueError(f"{path}: manifest has no D entry")
    return manifest


def read_meta(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if "=" not in line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            meta[key] = val
    return meta
