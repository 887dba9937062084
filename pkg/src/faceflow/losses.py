"""Mesh-regression loss, multi-level endpoint + photo-consistency flow loss, Adam, LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "FlowLossWeights",
    "AdamState",
    "LrSchedule",
    "meshreg_loss",
    "flow_loss",
    "downsample_masked",
    "warp_by_flow",
    "adam_step",
]


def meshreg_loss(S_pred, S_gt, edges) -> Tensor:
    """Mean squared vertex error plus mean squared edge-length error.

    S_pred is a [3,N] or [B,3,N] tensor, S_gt the matching array; batches are averaged.
    """
    S_pred = S_pred if isinstance(S_pred, Tensor) else Tensor(S_pred)
    gt = np.asarray(S_gt, dtype=S_pred.dtype)
    if gt.shape != S_pred.shape:
        raise ValueError(f"shape mismatch: prediction {S_pred.shape} vs ground truth {gt.shape}")
    if S_pred.ndim == 2:
        S_pred = T.reshape(S_pred, (1,) + S_pred.shape)
        gt = gt[None]
    B, _, N = gt.shape
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    d = T.sub(S_pred, gt)
    loss = T.scale(T.sum_all(T.mul(d, d)), 1.0 / (B * N))
    if len(edges):
        if edges.max() >= N:
            raise ValueError("edge index out of range")
        e_pred = T.norm(T.sub(T.take(S_pred, edges[:, 0], -1), T.take(S_pred, edges[:, 1], -1)), axis=1)
        e_gt = np.linalg.norm(gt[:, :, edges[:, 0]] - gt[:, :, edges[:, 1]], axis=1)
        de = T.sub(e_pred, e_gt.astype(gt.dtype))
        loss = T.add(loss, T.scale(T.sum_all(T.mul(de, de)), 1.0 / (B * len(edges))))
    return loss


@dataclass(frozen=True)
class FlowLossWeights:
    levels: tuple = (1.0, 1.0, 1.0, 1.0)
    alpha: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(w) for w in self.levels))
        if any(w < 0 for w in self.levels) or self.alpha < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def uniform(cls, n_levels: int, alpha: float = 10.0) -> "FlowLossWeights":
        return cls((1.0,) * n_levels, alpha)


def downsample_masked(flow: np.ndarray, mask: np.ndarray):
    """Foreground-weighted 2x2 average of [B,3,H,W] flow; returns (flow, mask) at half size.

    Each coarse pixel averages only the foreground pixels of its block, so background zeros
    never bleed into the supervision.
    """
    B, C, H, W = flow.shape
    m = mask.astype(np.float64).reshape(B, 1, H // 2, 2, W // 2, 2)
    num = (flow.reshape(B, C, H // 2, 2, W // 2, 2) * m).sum(axis=(3, 5))
    cnt = m.sum(axis=(3, 5))
    out = np.where(cnt > 0, num / np.maximum(cnt, 1), 0.0)
    return out.astype(flow.dtype), cnt[:, 0] > 0


def _batched(x, dtype, what):
    """Accept [B,C,H,W] / [C,H,W] arrays or HWC images carried by FlowField / PnccImage."""
    if hasattr(x, "vectors"):
        x = np.transpose(x.vectors, (2, 0, 1))
    elif hasattr(x, "values"):
        x = np.transpose(x.values, (2, 0, 1))
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"{what}: expected [B,C,H,W] or [C,H,W], got {x.shape}")
    return x


def warp_by_flow(flow: Tensor, pncc: np.ndarray, I2: np.ndarray, fg_mask: np.ndarray):
    """Backward-warp I2 onto frame 1 through the 3D points encoded in the PNCC.

    Frame-1 points are recovered by undoing the width/height normalisation of the PNCC,
    displaced by the predicted flow, projected orthographically (drop z) and used to
    bilinearly sample I2. Returns (warped [B,3,H,W] tensor, validity mask [B,H,W]) where
    a pixel is valid if it is foreground and lands inside the frame.
    """
    B, _, H, W = I2.shape
    base = np.empty((B, 2, H, W), dtype=I2.dtype)
    base[:, 0] = pncc[:, 0] * W - 0.5
    base[:, 1] = pncc[:, 1] * H - 0.5
    coords = T.add(base, T.take(flow, [0, 1], axis=1))
    cx, cy = coords.data[:, 0], coords.data[:, 1]
    inside = (cx >= 0) & (cx <= W - 1) & (cy >= 0) & (cy <= H - 1)
    return T.bilinear_sample(I2, coords), fg_mask & inside


def flow_loss(pred_flows, F_gt, pncc, I1, I2, weights: FlowLossWeights, mask=None):
    """Weighted multi-level endpoint error plus alpha times the photo-consistency error.

    The endpoint term at each level is the mean over foreground pixels of the per-pixel
    Euclidean error against the foreground-weighted downsampled ground truth. The photo
    term is the mean over valid (foreground, in-frame) pixels of the squared RGB error
    between I1 and I2 warped by the finest prediction. Returns (loss, breakdown dict).
    """
    preds = list(pred_flows)
    if len(preds) != len(weights.levels):
        raise ValueError(f"{len(preds)} flow levels but {len(weights.levels)} weights")
    dtype = preds[-1].dtype
    if mask is None:
        if not hasattr(F_gt, "mask"):
            raise ValueError("a foreground mask is required when F_gt is a plain array")
        mask = F_gt.mask
    gt = _batched(F_gt, dtype, "F_gt")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    pn, i1, i2 = (_batched(x, dtype, n) for x, n in ((pncc, "pncc"), (I1, "I1"), (I2, "I2")))
    if preds[-1].shape != gt.shape:
        raise ValueError(f"finest prediction {preds[-1].shape} does not match ground truth {gt.shape}")

    pyramid = {gt.shape[2]: (gt, mask)}
    g, m = gt, mask
    while g.shape[2] > min(p.shape[2] for p in preds):
        g, m = downsample_masked(g, m)
        pyramid[g.shape[2]] = (g, m)

    total = None
    level_terms = []
    epe = 0.0
    for w, pred in zip(weights.levels, preds):
        g, m = pyramid[pred.shape[2]]
        count = int(m.sum())
        if count == 0 or w == 0:
            level_terms.append(0.0)
            continue
        err = T.norm(T.sub(pred, g), axis=1)
        term = T.scale(T.sum_all(T.mul(err, m.astype(dtype))), w / count)
        level_terms.append(term.item())
        epe += term.item()
        total = term if total is None else T.add(total, term)

    photo = 0.0
    if weights.alpha > 0:
        warped, valid = warp_by_flow(preds[-1], pn, i2, mask)
        count = int(valid.sum())
        if count:
            diff = T.sub(i1, warped)
            vm = np.repeat(valid[:, None], 3, axis=1).astype(dtype)
            term = T.scale(T.sum_all(T.mul(T.mul(diff, diff), vm)), weights.alpha / count)
            photo = term.item()
            total = term if total is None else T.add(total, term)
    if total is None:
        total = T.scale(T.sum_all(preds[-1]), 0.0)
    return total, {"epe": epe, "photo": photo, "levels": level_terms}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict | None = None) -> dict:
    """One bias-corrected Adam update; parameters are rebound to new arrays.

    `grads` maps parameter names to arrays; when omitted each tensor's `.grad` is used.
    Parameters without a gradient are skipped.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return params


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate: the rate of the last breakpoint at or before an epoch."""

    breakpoints: tuple = ((0, 1e-4), (10, 2e-5), (20, 4e-6), (30, 8e-7))

    def __post_init__(self):
        bps = tuple((int(e), float(r)) for e, r in self.breakpoints)
        if not bps:
            raise ValueError("schedule needs at least one breakpoint")
        if any(b[0] <= a[0] for a, b in zip(bps, bps[1:])):
            raise ValueError("breakpoint epochs must be strictly increasing")
        if any(r <= 0 for _, r in bps):
            raise ValueError("rates must be positive")
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def step_decay(cls, base: float = 1e-4, factor: float = 0.2, every: int = 10, epochs: int = 40):
        return cls(tuple((e, base * factor ** (e // every)) for e in range(0, max(epochs, 1), every)))

    def rate(self, epoch: int) -> float:
        r = self.breakpoints[0][1]
        for e, rate in self.breakpoints:
            if epoch >= e:
                r = rate
        return r
