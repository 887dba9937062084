"""Flow network (correlation encoder-decoder with a PNCC branch) and a small mesh regressor.

Parameters live in plain ``dict[str, Tensor]`` mappings so they can be checkpointed by
name and handed to the optimizer directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DffnetConfig",
    "MeshRegConfig",
    "init_dffnet",
    "dffnet_forward",
    "init_meshreg",
    "meshreg_forward",
]


@dataclass(frozen=True)
class DffnetConfig:
    width: int = 64
    height: int = 64
    base: int = 16
    max_disp: int = 4
    levels: int = 4
    predict: tuple = None  # per decoder level, coarsest first; finest must be on
    pncc_mode: str = "full"  # "full" or "z" (x-y PNCC channels zeroed at the input)
    corr_gain: float = 32.0  # fixed scale on the channel-normalized cost volume

    def __post_init__(self):
        if self.predict is None:
            object.__setattr__(self, "predict", (True,) * self.levels)
        object.__setattr__(self, "predict", tuple(bool(p) for p in self.predict))
        if self.levels < 2:
            raise ValueError("need at least 2 decoder levels")
        if self.width % 2**self.levels or self.height % 2**self.levels:
            raise ValueError(f"input size must be divisible by 2**levels = {2 ** self.levels}")
        if self.max_disp < 1:
            raise ValueError("max_disp must be >= 1")
        if self.base < 2:
            raise ValueError("base width must be >= 2")
        if len(self.predict) != self.levels or not self.predict[-1]:
            raise ValueError("predict needs one flag per level and the finest level enabled")
        if not self.corr_gain > 0:
            raise ValueError("corr_gain must be positive")
        if self.pncc_mode not in ("full", "z"):
            raise ValueError("pncc_mode must be 'full' or 'z'")

    @property
    def n_outputs(self) -> int:
        return sum(self.predict)


def _enc_channels(cfg: DffnetConfig, s: int) -> int:
    """Channels of the encoder feature map at resolution 1/2**s (s >= 2)."""
    return cfg.base * min(2 ** (s - 1), 8)


def _skip_channels(cfg: DffnetConfig, s: int) -> int:
    c = cfg.base
    if s == 0:
        return 6  # I1 and PNCC
    if s == 1:
        return c + max(c // 2, 1)
    return _enc_channels(cfg, s)


def _dec_channels(cfg: DffnetConfig, s: int) -> int:
    if s == 0:
        return max(cfg.base // 2, 2)
    return min(_enc_channels(cfg, max(s, 2)), 4 * cfg.base)


def _dffnet_layout(cfg: DffnetConfig):
    """[(name, kind, in_ch, out_ch, k)] in creation order; kind is "conv" or "deconv"."""
    c = cfg.base
    cp = max(c // 2, 1)
    n_corr = (2 * cfg.max_disp + 1) ** 2
    layers = [
        ("stem1", "conv", 3, c, 5),
        ("stem2", "conv", c, 2 * c, 5),
        ("pncc1", "conv", 3, cp, 5),
        ("pncc2", "conv", cp, c, 5),
        ("fuse", "conv", n_corr + c + 2 * c, 2 * c, 3),
    ]
    prev = 2 * c
    for s in range(3, cfg.levels + 1):
        ch = _enc_channels(cfg, s)
        layers.append((f"enc{s}a", "conv", prev, ch, 3))
        layers.append((f"enc{s}b", "conv", ch, ch, 3))
        prev = ch
    have_flow = False
    for k in range(1, cfg.levels + 1):
        s = cfg.levels - k
        dch = _dec_channels(cfg, s)
        layers.append((f"dec{k}", "deconv", prev, dch, 3))
        cat = dch + _skip_channels(cfg, s)
        if have_flow:
            layers.append((f"upflow{k}", "deconv", 3, 3, 3))
            cat += 3
        if cfg.predict[k - 1]:
            layers.append((f"flow{k}", "conv", cat, 3, 3))
        have_flow = cfg.predict[k - 1]
        prev = cat
    return layers


def _init_layers(layout, seed, dtype):
    rng = np.random.default_rng(seed)
    params = {}
    for name, kind, cin, cout, k in layout:
        if kind == "conv":
            std = np.sqrt(2.0 / (cin * k * k))
            w = rng.normal(scale=std, size=(cout, cin, k, k))
            if name.startswith("flow"):
                w *= 0.1
            params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w")
            params[f"{name}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"{name}.b")
        else:
            # deconv maps cin -> cout with a conv-layout kernel [cin, cout, k, k]
            std = np.sqrt(2.0 / (cin * k * k / 4))
            w = rng.normal(scale=std, size=(cin, cout, k, k))
            params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w")
            params[f"{name}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"{name}.b")
    return params


def init_dffnet(cfg: DffnetConfig, seed: int = 0, dtype=np.float32) -> dict:
    return _init_layers(_dffnet_layout(cfg), seed, dtype)


def _conv(params, name, x, stride=1, act=True):
    y = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)
    return T.relu(y) if act else y


def _deconv(params, name, x, act=True):
    y = T.deconv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=2)
    return T.relu(y) if act else y


def _as_batch(x, dtype):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    return x


def dffnet_forward(params: dict, I1, I2, pncc, cfg: DffnetConfig) -> list:
    """Predict 3D flow at every enabled decoder level, coarsest to finest.

    Inputs are [B,3,H,W] (or a single [3,H,W]) with images in [0, 1]. Every returned
    tensor is [B,3,h,w]; the last one is full resolution.
    """
    dtype = params["stem1.w"].dtype
    I1, I2, pncc = (_as_batch(v, dtype) for v in (I1, I2, pncc))
    expect = (3, cfg.height, cfg.width)
    for v in (I1, I2, pncc):
        if v.shape[1:] != expect:
            raise ValueError(f"expected inputs of shape [B,{expect[0]},{expect[1]},{expect[2]}], got {v.shape}")
    if cfg.pncc_mode == "z":
        zmask = np.zeros(pncc.shape, dtype=dtype)
        zmask[:, 2] = 1
        pncc = T.mul(pncc, zmask)

    # shared stem: the same parameter tensors process both frames
    a1 = _conv(params, "stem1", I1, stride=2)
    a2 = _conv(params, "stem2", a1, stride=2)
    b1 = _conv(params, "stem1", I2, stride=2)
    b2 = _conv(params, "stem2", b1, stride=2)
    p1 = _conv(params, "pncc1", pncc, stride=2)
    p2 = _conv(params, "pncc2", p1, stride=2)
    # the cost volume is averaged over channels, which leaves it orders of magnitude below
    # the other fused inputs; a fixed gain restores unit-order activations
    corr = T.scale(T.correlate(a2, b2, cfg.max_disp), cfg.corr_gain)
    fused = _conv(params, "fuse", T.concat([corr, p2, a2]))

    skips = {0: T.concat([I1, pncc]), 1: T.concat([a1, p1]), 2: fused}
    x = fused
    for s in range(3, cfg.levels + 1):
        x = _conv(params, f"enc{s}a", x, stride=2)
        x = _conv(params, f"enc{s}b", x)
        skips[s] = x

    flows = []
    prev_flow = None
    for k in range(1, cfg.levels + 1):
        s = cfg.levels - k
        parts = [_deconv(params, f"dec{k}", x), skips[s]]
        if prev_flow is not None:
            parts.append(_deconv(params, f"upflow{k}", prev_flow, act=False))
        x = T.concat(parts)
        prev_flow = None
        if cfg.predict[k - 1]:
            prev_flow = _conv(params, f"flow{k}", x, act=False)
            flows.append(prev_flow)
    return flows


@dataclass(frozen=True)
class MeshRegConfig:
    width: int = 64
    height: int = 64
    n_vertices: int = 1500
    base: int = 8

    def __post_init__(self):
        if self.width % 16 or self.height % 16:
            raise ValueError("mesh regressor input size must be divisible by 16")
        if self.n_vertices < 1:
            raise ValueError("n_vertices must be positive")


def _meshreg_layout(cfg: MeshRegConfig):
    b = cfg.base
    return [
        ("m1", "conv", 3, b, 3),
        ("m2", "conv", b, 2 * b, 3),
        ("m3", "conv", 2 * b, 4 * b, 3),
        ("m4", "conv", 4 * b, 4 * b, 3),
        ("m5", "conv", 4 * b, 4 * b, 3),
    ]


def init_meshreg(cfg: MeshRegConfig, seed: int = 0, dtype=np.float32, template=None) -> dict:
    """Initialise the regressor; `template` (3xN) seeds the head bias so training starts at it."""
    params = _init_layers(_meshreg_layout(cfg), seed, dtype)
    rng = np.random.default_rng(seed + 1)
    feat = 4 * cfg.base * (cfg.height // 16) * (cfg.width // 16)
    out = 3 * cfg.n_vertices
    w = rng.normal(scale=np.sqrt(1.0 / feat), size=(out, feat)) * 0.1
    bias = np.zeros(out) if template is None else np.asarray(template, dtype=np.float64).reshape(out)
    params["head.w"] = Tensor(w.astype(dtype), requires_grad=True, name="head.w")
    params["head.b"] = Tensor(bias.astype(dtype), requires_grad=True, name="head.b")
    return params


def meshreg_forward(params: dict, I1, cfg: MeshRegConfig) -> Tensor:
    """Regress scaled vertex coordinates: returns [B,3,N] (or [3,N] for a single image).

    The head's 3N outputs are laid out row-major as a 3xN matrix.
    """
    dtype = params["m1.w"].dtype
    single = not isinstance(I1, Tensor) and np.ndim(I1) == 3 or isinstance(I1, Tensor) and I1.ndim == 3
    x = _as_batch(I1, dtype)
    if x.shape[1:] != (3, cfg.height, cfg.width):
        raise ValueError(f"expected [B,3,{cfg.height},{cfg.width}] input, got {x.shape}")
    for name in ("m1", "m2", "m3", "m4"):
        x = _conv(params, name, x, stride=2)
    x = _conv(params, "m5", x)
    B = x.shape[0]
    x = T.reshape(x, (B, -1))
    if params["head.w"].shape[1] != x.shape[1]:
        raise ValueError("head size does not match the configuration")
    out = T.reshape(T.linear(x, params["head.w"], params["head.b"]), (B, 3, cfg.n_vertices))
    return T.reshape(out, (3, cfg.n_vertices)) if single else out
