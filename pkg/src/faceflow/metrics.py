"""Endpoint-error metrics and spherical HSV colour coding of 3D flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AepeReport",
    "aepe3d",
    "aepe2d",
    "colorize_flow",
    "decode_flow_colors",
    "hsv_to_rgb",
    "rgb_to_hsv",
]


@dataclass(frozen=True)
class AepeReport:
    """Mean endpoint error over all foreground pixels, pooled across pairs.

    `per_pair` holds each pair's own foreground mean, `pixels` the pooled foreground count.
    """

    mean: float
    pixels: int
    per_pair: tuple
    variant: str = "3d"

    def __float__(self) -> float:
        return self.mean


def _field(x, name):
    """(vectors (H,W,3), mask or None) from a FlowField or an (H,W,3) array."""
    if hasattr(x, "vectors"):
        return np.asarray(x.vectors, dtype=np.float64), np.asarray(x.mask, dtype=bool)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected (H, W, 3) flow, got {arr.shape}")
    return arr, None


def _pairs(pred, gt, mask):
    single = hasattr(gt, "vectors") or (not isinstance(gt, (list, tuple)) and np.ndim(gt) == 3)
    if single:
        return [(pred, gt, mask)]
    masks = mask if mask is not None else [None] * len(gt)
    if not (len(pred) == len(gt) == len(masks)):
        raise ValueError("pred, gt and mask lists differ in length")
    return list(zip(pred, gt, masks))


def _aepe(pred, gt, mask, channels, variant) -> AepeReport:
    total, count, per = 0.0, 0, []
    for p, g, m in _pairs(pred, gt, mask):
        pv, _ = _field(p, "pred")
        gv, gm = _field(g, "gt")
        if pv.shape != gv.shape:
            raise ValueError(f"pred {pv.shape} and gt {gv.shape} differ in size")
        fg = np.asarray(m, dtype=bool) if m is not None else gm
        if fg is None:
            raise ValueError("a foreground mask is required for plain arrays")
        n = int(fg.sum())
        if n == 0:
            raise ValueError("empty foreground: AEPE is undefined")
        err = np.linalg.norm((pv - gv)[fg][:, channels], axis=1)
        per.append(float(err.mean()))
        total += float(err.sum())
        count += n
    return AepeReport(total / count, count, tuple(per), variant)


def aepe3d(pred, gt, mask=None) -> AepeReport:
    """Mean over foreground of the 3-vector endpoint error.

    Accepts one pair (FlowField or (H,W,3) arrays) or parallel lists of pairs; the
    foreground comes from `mask` when given, otherwise from gt's FlowField mask.
    """
    return _aepe(pred, gt, mask, [0, 1, 2], "3d")


def aepe2d(pred, gt, mask=None) -> AepeReport:
    """As `aepe3d` on the x-y displacement only."""
    return _aepe(pred, gt, mask, [0, 1], "2d")


def hsv_to_rgb(h, s, v):
    """Vectorised HSV -> RGB; h in degrees [0, 360), s and v in [0, 1]. Returns (..., 3)."""
    h = np.mod(np.asarray(h, dtype=np.float64), 360.0) / 60.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out


def rgb_to_hsv(rgb):
    """Vectorised RGB -> (h degrees, s, v); hue is 0 where undefined."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0.0)
    safe = np.where(c > 0, c, 1)
    h = np.where(
        v == r,
        np.mod((g - b) / safe, 6),
        np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(c > 0, h * 60.0, 0.0)
    return h, s, v


def colorize_flow(flow, rmax: float | None = None, mask=None) -> np.ndarray:
    """Colour-code 3D flow as RGB (H, W, 3) in [0, 1].

    Each vector is taken to spherical coordinates: azimuth atan2(dy, dx) gives the hue,
    inclination arccos(dz / r) / pi the saturation and r / rmax the value. rmax defaults
    to the largest foreground magnitude. Background is black.
    """
    vec, fmask = _field(flow, "flow")
    if mask is None:
        mask = fmask if fmask is not None else np.ones(vec.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(np.isfinite(vec[mask])):
        raise ValueError("flow contains non-finite values")
    dx, dy, dz = vec[..., 0], vec[..., 1], vec[..., 2]
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    if rmax is None:
        rmax = float(r[mask].max()) if mask.any() else 0.0
    if rmax < 0:
        raise ValueError("rmax must be non-negative")
    hue = np.mod(np.degrees(np.arctan2(dy, dx)), 360.0)
    incl = np.arccos(np.clip(np.divide(dz, r, out=np.ones_like(r), where=r > 0), -1, 1))
    val = np.clip(r / rmax, 0, 1) if rmax > 0 else np.zeros_like(r)
    rgb = hsv_to_rgb(hue, incl / np.pi, val)
    rgb[~mask] = 0.0
    return rgb


def decode_flow_colors(rgb, rmax: float) -> np.ndarray:
    """Invert `colorize_flow` for a known rmax; returns (H, W, 3) flow."""
    h, s, v = rgb_to_hsv(rgb)
    r = v * rmax
    theta = np.radians(h)
    phi = s * np.pi
    return np.stack(
        [r * np.sin(phi) * np.cos(theta), r * np.sin(phi) * np.sin(theta), r * np.cos(phi)],
        axis=-1,
    )
