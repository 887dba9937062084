"""Linear identity + expression face model, rigid SOP pose, and a synthetic model generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

__all__ = [
    "MorphableModel",
    "ShapeCoefficients",
    "CameraPose",
    "eval_shape",
    "pose_points",
    "synth_model",
    "edges_from_triangles",
    "rotation_from_euler",
    "save_model",
    "load_model",
    "write_obj",
    "read_obj",
]

MODEL_MAGIC = b"F3MM"


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def edges_from_triangles(triangles) -> np.ndarray:
    """Sorted unique undirected edges of a triangle list, as an (E, 2) int array with a < b."""
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(tris) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray  # (3N,) interleaved x, y, z
    identity_basis: np.ndarray  # (3N, n_i)
    expression_basis: np.ndarray  # (3N, n_e)
    triangles: np.ndarray  # (T, 3)
    edges: np.ndarray = field(default=None)  # (E, 2), derived when omitted

    def __post_init__(self):
        mean = _frozen(self.mean_shape, np.float64).ravel()
        ident = _frozen(self.identity_basis, np.float64)
        expr = _frozen(self.expression_basis, np.float64)
        tris = _frozen(np.asarray(self.triangles).reshape(-1, 3), np.int64)
        if mean.size % 3:
            raise ValueError("mean shape length must be a multiple of 3")
        n = mean.size // 3
        if ident.ndim != 2 or ident.shape[0] != 3 * n or ident.shape[1] < 1:
            raise ValueError(f"identity basis must be (3N, n_i>=1), got {ident.shape}")
        if expr.ndim != 2 or expr.shape[0] != 3 * n or expr.shape[1] < 1:
            raise ValueError(f"expression basis must be (3N, n_e>=1), got {expr.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= n):
            raise ValueError("triangle index out of range")
        if not (np.isfinite(mean).all() and np.isfinite(ident).all() and np.isfinite(expr).all()):
            raise ValueError("model arrays must be finite")
        edges = edges_from_triangles(tris) if self.edges is None else self.edges
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "identity_basis", ident)
        object.__setattr__(self, "expression_basis", expr)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "edges", _frozen(edges, np.int64).reshape(-1, 2))

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_identity(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[1]

    def mean_matrix(self) -> np.ndarray:
        """Mean shape as a 3xN matrix."""
        return self.mean_shape.reshape(-1, 3).T.copy()

    def zero_coefficients(self) -> "ShapeCoefficients":
        return ShapeCoefficients(np.zeros(self.n_identity), np.zeros(self.n_expression))


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    identity: np.ndarray
    expression: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "identity", _frozen(self.identity, np.float64).ravel())
        object.__setattr__(self, "expression", _frozen(self.expression, np.float64).ravel())


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Scaled orthographic camera: p -> scale * (rotation @ p + translation)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        r = _frozen(self.rotation, np.float64)
        t = _frozen(self.translation, np.float64).ravel()
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_params(cls, params) -> "CameraPose":
        """Build from the 7-vector (pitch, yaw, roll, tx, ty, tz, scale)."""
        c = np.asarray(params, dtype=np.float64).ravel()
        if c.size != 7:
            raise ValueError("camera parameter vector must have 7 entries")
        return cls(rotation_from_euler(*c[:3]), c[3:6], c[6])


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def eval_shape(model: MorphableModel, coeffs: ShapeCoefficients) -> np.ndarray:
    """Evaluate mean + identity + expression and return the 3xN shape matrix."""
    if coeffs.identity.size != model.n_identity or coeffs.expression.size != model.n_expression:
        raise ValueError(
            f"coefficient sizes ({coeffs.identity.size}, {coeffs.expression.size}) do not match "
            f"model ({model.n_identity}, {model.n_expression})"
        )
    x = model.mean_shape + model.identity_basis @ coeffs.identity + model.expression_basis @ coeffs.expression
    return x.reshape(-1, 3).T.copy()


def pose_points(S: np.ndarray, pose: CameraPose) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != 3:
        raise ValueError("points must be a 3xN matrix")
    return pose.scale * (pose.rotation @ S + pose.translation[:, None])


def _cap_layout(n: int) -> np.ndarray:
    # sunflower spiral on the unit disc: near-uniform density for any n
    k = np.arange(n) + 0.5
    r = np.sqrt(k / n)
    theta = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _smooth_field(rng, uv, n_terms, max_freq):
    freq = rng.uniform(-max_freq, max_freq, size=(n_terms, 2))
    phase = rng.uniform(0, 2 * np.pi, size=n_terms)
    amp = rng.normal(size=n_terms)
    return np.sin(uv @ freq.T + phase) @ amp


def synth_model(seed: int, N: int = 1500, n_i: int = 157, n_e: int = 28) -> MorphableModel:
    """Deterministic face-like cap with smooth, decaying identity/expression bases.

    The cap is a 60 degree spherical patch of radius 1 bulging towards -z (the camera),
    with a seeded nose-like bump and a few low-frequency seeded undulations.
    """
    if N < 4:
        raise ValueError("need at least 4 vertices to triangulate")
    if n_i < 1 or n_e < 1:
        raise ValueError("bases need at least one column")
    rng = np.random.default_rng(seed)
    uv = _cap_layout(N)
    tris = Delaunay(uv).simplices.astype(np.int64)
    tris = tris[np.argsort(tris.min(axis=1) * N + tris.max(axis=1), kind="stable")]

    rho = np.sin(np.pi / 3)
    x, y = uv[:, 0] * rho, uv[:, 1] * rho
    z = -np.sqrt(1.0 - x**2 - y**2)
    nose_c = rng.normal(scale=0.05, size=2)
    nose_h = rng.uniform(0.12, 0.22)
    z = z - nose_h * np.exp(-((x - nose_c[0]) ** 2 + (y + 0.05 - nose_c[1]) ** 2) / 0.03)
    z = z + 0.03 * _smooth_field(rng, uv, 4, 3.0)
    mean = np.stack([x, y, z], axis=1).ravel()

    def basis(n_cols, base_scale):
        cols = np.empty((3 * N, n_cols))
        for k in range(n_cols):
            fmax = 2.0 + 4.0 * min(k, 12) / 12
            d = np.stack([_smooth_field(rng, uv, 3, fmax) for _ in range(3)], axis=1).ravel()
            d /= np.sqrt(np.mean(d**2)) + 1e-12
            cols[:, k] = d * base_scale / (1.0 + k)
        return cols

    return MorphableModel(mean, basis(n_i, 0.05), basis(n_e, 0.04), tris)


def save_model(model: MorphableModel, path) -> None:
    """Binary layout: b'F3MM', u32 N, n_i, n_e, T, then float64 mean, U_id, U_exp, triangles (row-major)."""
    header = MODEL_MAGIC + struct.pack(
        "<4I", model.n_vertices, model.n_identity, model.n_expression, len(model.triangles)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (model.mean_shape, model.identity_basis, model.expression_basis, model.triangles):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> MorphableModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an F3MM model file")
    n, n_i, n_e, t = struct.unpack_from("<4I", raw, 4)
    sizes = [3 * n, 3 * n * n_i, 3 * n * n_e, 3 * t]
    if len(raw) != 20 + 8 * sum(sizes):
        raise ValueError(f"{path}: truncated or oversized payload")
    flat = np.frombuffer(raw, dtype="<f8", offset=20)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    if not np.array_equal(parts[3], np.round(parts[3])):
        raise ValueError(f"{path}: triangle indices are not integral")
    return MorphableModel(
        parts[0],
        parts[1].reshape(3 * n, n_i),
        parts[2].reshape(3 * n, n_e),
        parts[3].reshape(t, 3).astype(np.int64),
    )


def write_obj(path, S: np.ndarray, triangles) -> None:
    S = np.asarray(S)
    with open(path, "w") as fh:
        for v in S.T:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for a, b, c in np.asarray(triangles).reshape(-1, 3):
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path):
    """Read the `v`/`f` subset of OBJ; returns (3xN vertices, (T,3) zero-based triangles)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # tolerate v/vt/vn tokens, keep the vertex index
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    S = np.array(verts, dtype=np.float64).reshape(-1, 3).T
    return S, np.array(faces, dtype=np.int64).reshape(-1, 3)
