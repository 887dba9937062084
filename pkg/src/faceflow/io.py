"""Binary and netpbm file formats used by the dataset, the CLI and checkpoints.

F3DF flow:        b"F3DF", u32 LE width, height, then row-major float32 (dx, dy, dz) triples.
F1DF depth:       b"F1DF", u32 LE width, height, then row-major float32 values (single channel).
F3CK checkpoint:  b"F3CK", then per tensor: u32 name length, name bytes (utf-8), u32 rank,
                  rank x u32 dims, float32 payload; tensors follow until end of file.
PNCC preview:     16-bit binary PPM, channel value v in [0, 1] stored as round(v * 65535).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "write_flow",
    "read_flow",
    "write_depth",
    "read_depth",
    "write_ppm",
    "read_ppm",
    "write_pncc_preview",
    "write_pbm",
    "read_pbm",
    "save_checkpoint",
    "load_checkpoint",
]

FLOW_MAGIC = b"F3DF"
DEPTH_MAGIC = b"F1DF"
CKPT_MAGIC = b"F3CK"


def _write_grid(path, magic, arr, channels):
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    if channels == 1 and arr.ndim != 2 or channels > 1 and arr.shape[2:] != (channels,):
        raise ValueError(f"expected a ({'H, W' if channels == 1 else f'H, W, {channels}'}) array, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<2I", w, h))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_grid(path, magic, channels):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    w, h = struct.unpack_from("<2I", raw, 4)
    n = w * h * channels
    if len(raw) != 12 + 4 * n:
        raise ValueError(f"{path}: payload size does not match {w}x{h}x{channels}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float32)
    return data.reshape((h, w) if channels == 1 else (h, w, channels))


def write_flow(path, flow) -> None:
    """Write (H, W, 3) flow vectors, or a FlowField."""
    _write_grid(path, FLOW_MAGIC, getattr(flow, "vectors", flow), 3)


def read_flow(path) -> np.ndarray:
    return _read_grid(path, FLOW_MAGIC, 3)


def write_depth(path, depth) -> None:
    _write_grid(path, DEPTH_MAGIC, depth, 1)


def read_depth(path) -> np.ndarray:
    return _read_grid(path, DEPTH_MAGIC, 1)


def _hwc(img):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = np.transpose(img, (1, 2, 0))
    return img


def write_ppm(path, img, maxval: int = 255) -> None:
    """Binary P6 from float RGB in [0, 1], either (H, W, 3) or (3, H, W)."""
    img = np.clip(_hwc(img), 0.0, 1.0)
    h, w = img.shape[:2]
    q = np.rint(img * maxval)
    payload = q.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode())
        fh.write(payload)


def _netpbm_header(raw, n_fields):
    fields, pos = [], 2
    while len(fields) < n_fields:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    return fields, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 into float (H, W, 3) in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    (w, h, maxval), pos = _netpbm_header(raw, 3)
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(raw, dtype=dtype, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float32) / maxval


def write_pncc_preview(path, pncc) -> None:
    write_ppm(path, getattr(pncc, "values", pncc), maxval=65535)


def write_pbm(path, mask) -> None:
    """Binary P4 bitmap; foreground (True) is written as 1 (black)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        fh.write(np.packbits(mask, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P4":
        raise ValueError(f"{path}: not a binary PBM")
    (w, h), pos = _netpbm_header(raw, 2)
    row_bytes = (w + 7) // 8
    bits = np.frombuffer(raw, dtype=np.uint8, count=row_bytes * h, offset=pos).reshape(h, row_bytes)
    return np.unpackbits(bits, axis=1)[:, :w].astype(bool)


def save_checkpoint(path, tensors) -> None:
    """Write a name -> array mapping (Tensor values are unwrapped) in insertion order."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name, value in tensors.items():
            arr = np.asarray(getattr(value, "data", value), dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    out, pos = {}, 4
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise ValueError("truncated tensor payload")
            out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
