"""Software z-buffer rasterizer for scaled-orthographic meshes.

Conventions: vertex (x, y) are pixel coordinates (x -> column, y -> row), pixel (col, row)
is sampled at its center (col + 0.5, row + 0.5), smaller z is closer to the camera, equal
depths resolve to the lowest triangle index, and pixels lying exactly on an edge follow the
top-left fill rule so shared edges are covered once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = ["RasterMap", "project_to_pixels", "rasterize", "foreground_mask", "write_triangle_pgm"]


@dataclass(frozen=True, eq=False)
class RasterMap:
    width: int
    height: int
    triangle_id: np.ndarray  # (H, W) int32, -1 for background
    barycentric: np.ndarray  # (H, W, 3) float64, zero on background
    depth: np.ndarray  # (H, W) float64, zero on background
    triangles: np.ndarray  # (T, 3) topology the ids refer to

    @property
    def mask(self) -> np.ndarray:
        return self.triangle_id >= 0

    def vertex_ids(self) -> np.ndarray:
        """(H, W, 3) vertex indices of the visible triangle; undefined (0) on background."""
        ids = np.where(self.mask, self.triangle_id, 0)
        return self.triangles[ids] if len(self.triangles) else np.zeros(ids.shape + (3,), np.int64)


def project_to_pixels(posed: np.ndarray, width: int, height: int):
    """Posed (already scale-multiplied) 3xN points to (N, 2) pixel coords and (N,) depths.

    Nothing is clipped here; out-of-frame geometry is clipped per pixel by `rasterize`.
    """
    posed = np.asarray(posed, dtype=np.float64)
    if posed.ndim != 2 or posed.shape[0] != 3:
        raise ValueError("posed points must be a 3xN matrix")
    return np.ascontiguousarray(posed[:2].T), np.ascontiguousarray(posed[2])


@numba.njit(cache=True, inline="always")
def _top_left(ax, ay, bx, by, cx, cy):
    # edge a-b, opposite vertex c; orientation independent
    dy = by - ay
    if dy == 0.0:
        return cy > ay
    x_at = ax + (cy - ay) * (bx - ax) / dy
    return cx > x_at


@numba.njit(cache=True)
def _raster_kernel(xy, z, tris, width, height, tri_id, bary, depth):
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0 or not np.isfinite(area):
            continue
        sgn = 1.0 if area > 0.0 else -1.0
        inv_area = 1.0 / area
        lo_x = min(x0, min(x1, x2))
        hi_x = max(x0, max(x1, x2))
        lo_y = min(y0, min(y1, y2))
        hi_y = max(y0, max(y1, y2))
        c0 = max(0, int(np.ceil(lo_x - 0.5)))
        c1 = min(width - 1, int(np.floor(hi_x - 0.5)))
        r0 = max(0, int(np.ceil(lo_y - 0.5)))
        r1 = min(height - 1, int(np.floor(hi_y - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        tl0 = _top_left(x1, y1, x2, y2, x0, y0)
        tl1 = _top_left(x2, y2, x0, y0, x1, y1)
        tl2 = _top_left(x0, y0, x1, y1, x2, y2)
        z0, z1, z2 = z[i0], z[i1], z[i2]
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) * sgn
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) * sgn
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)) * sgn
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                b0 = w0 * sgn * inv_area
                b1 = w1 * sgn * inv_area
                b2 = 1.0 - b0 - b1
                zz = b0 * z0 + b1 * z1 + b2 * z2
                if zz < depth[r, c]:
                    depth[r, c] = zz
                    tri_id[r, c] = t
                    bary[r, c, 0] = b0
                    bary[r, c, 1] = b1
                    bary[r, c, 2] = b2


def rasterize(triangles, xy, depths, width: int, height: int) -> RasterMap:
    """Z-buffer rasterization of projected vertices into a RasterMap."""
    tris = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    xy = np.ascontiguousarray(np.asarray(xy, dtype=np.float64).reshape(-1, 2))
    z = np.ascontiguousarray(np.asarray(depths, dtype=np.float64).ravel())
    if len(xy) != len(z):
        raise ValueError("xy and depth counts differ")
    if tris.size and (tris.min() < 0 or tris.max() >= len(xy)):
        raise ValueError("triangle index out of range")
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    if len(tris):
        _raster_kernel(xy, z, tris, width, height, tri_id, bary, depth)
    depth[tri_id < 0] = 0.0
    for a in (tri_id, bary, depth):
        a.flags.writeable = False
    if tris.flags.writeable:
        tris = tris.copy()
        tris.flags.writeable = False
    return RasterMap(width, height, tri_id, bary, depth, tris)


def foreground_mask(rm: RasterMap) -> np.ndarray:
    return rm.triangle_id >= 0


def write_triangle_pgm(rm: RasterMap, path) -> None:
    """16-bit binary PGM of triangle ids; 0 is background, id k is stored as k + 1 (clamped)."""
    vals = np.clip(rm.triangle_id.astype(np.int64) + 1, 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{rm.width} {rm.height}\n65535\n".encode())
        fh.write(vals.tobytes())

