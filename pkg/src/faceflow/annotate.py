"""Supervision images for a frame pair: PNCC of the reference frame and ground-truth 3D flow.

Flow is stored in unnormalized image-space units (pixels for x-y, posed depth units for z),
so endpoint errors on the x-y channels read directly as optical-flow pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numba
import numpy as np

from .model import CameraPose, pose_points
from .raster import RasterMap, project_to_pixels, rasterize

__all__ = [
    "PnccImage",
    "FlowField",
    "compute_pncc",
    "pncc_from_posed",
    "compute_flow_gt",
    "flow_xy_is_optical_flow",
    "compute_D",
    "interpolate_points",
    "non_occluded_mask",
]


@dataclass(frozen=True, eq=False)
class PnccImage:
    values: np.ndarray  # (H, W, 3) in [0, 1], zero on background

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    vectors: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.vectors.shape[:2] != self.mask.shape or self.vectors.shape[2:] != (3,):
            raise ValueError("flow must be (H, W, 3) with an (H, W) mask")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def _check_raster(S, rm: RasterMap):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != 3:
        raise ValueError("shape must be a 3xN matrix")
    if len(rm.triangles) and rm.triangles.max() >= S.shape[1]:
        raise ValueError("raster map topology references more vertices than the shape has")
    return S


@numba.njit(cache=True)
def _interp_kernel(V, tris, tri_id, bary, out):
    H, W = tri_id.shape
    for r in range(H):
        for c in range(W):
            t = tri_id[r, c]
            if t < 0:
                continue
            for d in range(3):
                out[r, c, d] = (
                    bary[r, c, 0] * V[tris[t, 0], d]
                    + bary[r, c, 1] * V[tris[t, 1], d]
                    + bary[r, c, 2] * V[tris[t, 2], d]
                )


def interpolate_points(S: np.ndarray, rm: RasterMap) -> np.ndarray:
    """Barycentric interpolation of 3xN points over the visible triangle of every pixel.

    Returns (H, W, 3); background pixels are zero.
    """
    S = _check_raster(S, rm)
    out = np.zeros((rm.height, rm.width, 3))
    if len(rm.triangles):
        tris = np.ascontiguousarray(rm.triangles, dtype=np.int64)
        _interp_kernel(np.ascontiguousarray(S.T), tris, rm.triangle_id, rm.barycentric, out)
    return out


def compute_pncc(S, pose: CameraPose, rm: RasterMap, width: int, height: int, D: float) -> PnccImage:
    """PNCC(x, y) = P (R [S(t)] b + t3d) with P = diag(f/W, f/H, f/D) on foreground pixels."""
    if (rm.width, rm.height) != (width, height):
        raise ValueError("raster map size does not match the requested image size")
    if not D > 0:
        raise ValueError("D must be positive")
    # the map is affine and barycentrics sum to one, so encode vertices then interpolate
    p = np.array([pose.scale / width, pose.scale / height, pose.scale / D])
    V = ((_check_raster(S, rm).T @ pose.rotation.T) + pose.translation) * p
    return PnccImage(interpolate_points(V.T, rm))


def pncc_from_posed(posed: np.ndarray, triangles, width: int, height: int, D: float):
    """Rasterize an already posed (scale-multiplied) mesh and encode it; returns (PnccImage, RasterMap).

    This is the path taken when the mesh comes from a regressor that emits scaled
    vertices directly.
    """
    xy, z = project_to_pixels(posed, width, height)
    rm = rasterize(triangles, xy, z, width, height)
    pts = interpolate_points(posed, rm)
    return PnccImage(pts / np.array([width, height, D])), rm


def compute_flow_gt(S1, S2, pose1: CameraPose, pose2: CameraPose, rm1: RasterMap) -> FlowField:
    """Per-pixel 3D displacement of the surface point visible in frame 1.

    The same triangle and barycentrics (frame-1 visibility) index both shapes, so points
    occluded in frame 2 are still tracked.
    """
    S1 = np.asarray(S1, dtype=np.float64)
    S2 = np.asarray(S2, dtype=np.float64)
    if S1.shape != S2.shape:
        raise ValueError(f"topology mismatch: {S1.shape} vs {S2.shape}")
    mask = rm1.mask
    flow = np.zeros((rm1.height, rm1.width, 3))
    if mask.any():
        p1 = interpolate_points(S1, rm1)[mask]
        p2 = interpolate_points(S2, rm1)[mask]
        flow[mask] = pose2.scale * (p2 @ pose2.rotation.T + pose2.translation) - pose1.scale * (
            p1 @ pose1.rotation.T + pose1.translation
        )
    return FlowField(flow, mask.copy())


def flow_xy_is_optical_flow(F: FlowField, rm1: RasterMap, S2, pose2: CameraPose, tol: float = 1e-4):
    """Check that flow x-y equals frame-2 projected position minus the frame-1 pixel center.

    Returns (passed, max deviation in pixels).
    """
    mask = rm1.mask
    if not mask.any():
        return True, 0.0
    posed2 = interpolate_points(pose_points(S2, pose2), rm1)[mask][:, :2]
    rows, cols = np.nonzero(mask)
    centers = np.stack([cols + 0.5, rows + 0.5], axis=1)
    dev = np.abs(F.vectors[mask][:, :2] - (posed2 - centers)).max()
    return bool(dev <= tol), float(dev)


def compute_D(dataset: Iterable) -> float:
    """Maximum posed, scale-multiplied vertex z over an iterable of (S, pose) pairs."""
    best = None
    for S, pose in dataset:
        z = pose_points(S, pose)[2].max()
        best = z if best is None else max(best, z)
    if best is None:
        raise ValueError("empty dataset")
    if not best > 0:
        raise ValueError(f"maximum depth must be positive, got {best}")
    return float(best)


def non_occluded_mask(flow: FlowField, rm1: RasterMap, rm2: RasterMap, depth_tol: float = 0.5) -> np.ndarray:
    """Frame-1 foreground pixels whose tracked point is visible where it lands in frame 2.

    A pixel counts as visible when its bilinear footprint in frame 2 lies inside the image,
    all four footprint pixels are frame-2 foreground, and the tracked depth agrees with the
    frame-2 depth at the nearest footprint pixel within `depth_tol`.
    """
    h, w = rm1.height, rm1.width
    mask = rm1.mask
    rows, cols = np.nonzero(mask)
    vec = flow.vectors[mask]
    sx = cols + vec[:, 0]  # index-space sample position (center offset cancels)
    sy = rows + vec[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    fg2 = rm2.mask
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= fg2[y0c + dy, x0c + dx]
    xn = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
    yn = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
    z_tracked = rm1.depth[rows, cols] + vec[:, 2]
    ok &= np.abs(z_tracked - rm2.depth[yn, xn]) < depth_tol
    out = np.zeros((h, w), dtype=bool)
    out[rows[ok], cols[ok]] = True
    return out
