"""In-memory view of generated pairs for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import read_flow, read_pbm, read_ppm
from .synth import read_manifest

__all__ = ["FlowDataset", "load_dataset", "dataset_from_pairs"]


@dataclass(eq=False)
class FlowDataset:
    """Stacked [M, C, H, W] float32 arrays; images in [0, 1]."""

    i1: np.ndarray
    i2: np.ndarray
    pncc: np.ndarray
    flow: np.ndarray
    mask: np.ndarray  # [M, H, W] bool
    split: np.ndarray  # [M] of "train" / "test"
    D: float = 1.0

    def __post_init__(self):
        m = len(self.i1)
        for name in ("i2", "pncc", "flow", "mask", "split"):
            if len(getattr(self, name)) != m:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {m}")

    def __len__(self) -> int:
        return len(self.i1)

    @property
    def size(self) -> tuple:
        return self.i1.shape[2], self.i1.shape[3]  # (H, W)

    def subset(self, which) -> "FlowDataset":
        """Rows by split name or by index array."""
        idx = np.flatnonzero(self.split == which) if isinstance(which, str) else np.asarray(which)
        return FlowDataset(
            self.i1[idx], self.i2[idx], self.pncc[idx], self.flow[idx], self.mask[idx], self.split[idx], self.D
        )

    def batch(self, idx):
        return self.i1[idx], self.i2[idx], self.pncc[idx], self.flow[idx], self.mask[idx]


def _chw(a):
    return np.transpose(a, (2, 0, 1))


def dataset_from_pairs(pairs, split=None, D: float = 1.0) -> FlowDataset:
    """Stack LabeledPair objects; images are quantised to 8 bits like the on-disk PPMs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs given")
    q = lambda img: (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)  # noqa: E731
    return FlowDataset(
        np.stack([q(p.i1) for p in pairs]),
        np.stack([q(p.i2) for p in pairs]),
        np.stack([_chw(p.pncc.values) for p in pairs]).astype(np.float32),
        np.stack([_chw(p.flow.vectors) for p in pairs]).astype(np.float32),
        np.stack([p.mask for p in pairs]),
        np.array(split if split is not None else ["train"] * len(pairs)),
        D,
    )


def load_dataset(root) -> FlowDataset:
    """Read every pair listed in `root/manifest.txt`."""
    root = Path(root)
    manifest = read_manifest(root / "manifest.txt")
    rows = manifest["pairs"]
    if not rows:
        raise ValueError(f"{root}: manifest lists no pairs")
    i1, i2, pn, fl, mk, sp = [], [], [], [], [], []
    for pid, _, _, _, split in rows:
        d = root / "pairs" / f"{pid:06d}"
        i1.append(_chw(read_ppm(d / "i1.ppm")))
        i2.append(_chw(read_ppm(d / "i2.ppm")))
        pn.append(_chw(read_flow(d / "pncc.bin")))
        fl.append(_chw(read_flow(d / "flow.f3df")))
        mk.append(read_pbm(d / "mask.pbm"))
        sp.append(split)
    return FlowDataset(
        np.stack(i1), np.stack(i2), np.stack(pn), np.stack(fl), np.stack(mk), np.array(sp), manifest["D"]
    )
