"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the flow network, the mesh regressor and their losses need are
provided, and none of them broadcast. Image-like tensors are [B, C, H, W]; the spatial
ops also accept a single [C, H, W] sample.

Ops record onto the innermost active `Tape`; outside a tape they just compute values.
Storage follows the input dtype (float32 for training, float64 for gradient checks);
scalar reductions accumulate in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numba
import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_nan_check",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sum_all",
    "reshape",
    "take",
    "norm",
    "concat",
    "downsample_avg",
    "conv2d",
    "deconv2d",
    "correlate",
    "bilinear_sample",
    "linear",
]

_TAPES: list["Tape"] = []
_NAN_CHECK = False


def set_nan_check(enabled: bool) -> None:
    """Raise FloatingPointError whenever an op produces a non-finite value."""
    global _NAN_CHECK
    _NAN_CHECK = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution record for one differentiation pass.

    Use as a context manager; ops run inside it are appended in execution order, which is
    a valid topological order for the reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; leaf tensors with requires_grad get `.grad` set."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    if _NAN_CHECK and not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite value produced")
    tracked = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), back))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _record(np.where(on, a.data, 0).astype(a.dtype), (a,), lambda g: (g * on,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    shape = a.shape
    return _record(total, (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, indices, axis: int) -> Tensor:
    """Gather along one axis (repeated indices accumulate their gradients)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    shape = a.shape

    def back(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)

    return _record(np.take(a.data, idx, axis=axis), (a,), back)


def norm(a, axis: int) -> Tensor:
    """Euclidean norm along `axis` (axis removed); the gradient at a zero vector is taken as 0."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, dtype=np.float64)).astype(a.dtype)

    def back(g):
        safe = np.where(n > 0, n, 1)
        coef = np.where(n > 0, g / safe, 0)
        return (a.data * np.expand_dims(coef, axis),)

    return _record(n, (a,), back)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def _lift(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def _drop(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def downsample_avg(a) -> Tensor:
    """2x2 mean pooling; H and W must be even."""
    a = _as_tensor(a)
    x, sq = _lift(a)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("downsample_avg needs even spatial size")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)
        return (up,)

    return _drop(_record(out.astype(x.dtype), (x,), back), sq)


# ----------------------------------------------------------------------------- convolution


@numba.njit(cache=True)
def _im2col(xp, kh, kw, stride, ho, wo):
    """Padded [B,C,Hp,Wp] -> columns [C*kh*kw, B*Ho*Wo]."""
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((C * kh * kw, B * ho * wo), dtype=xp.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for b in range(B):
                    base = b * ho * wo
                    for y in range(ho):
                        yy = y * stride + i
                        off = base + y * wo
                        for x in range(wo):
                            cols[row, off + x] = xp[b, c, yy, x * stride + j]
    return cols


@numba.njit(cache=True)
def _col2im(cols, B, C, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of _im2col: scatter-add columns back into a padded [B,C,Hp,Wp] array."""
    xp = np.zeros((B, C, hp, wp), dtype=cols.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for b in range(B):
                    base = b * ho * wo
                    for y in range(ho):
                        yy = y * stride + i
                        off = base + y * wo
                        for x in range(wo):
                            xp[b, c, yy, x * stride + j] += cols[row, off + x]
    return xp


def _conv_fwd(x, w, stride, pad):
    """Returns (output [B,K,Ho,Wo], columns) for kernel [K,C,kh,kw]."""
    b, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (w.reshape(k, -1) @ cols).reshape(k, b, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def _to_rows(g):
    """[B,K,Ho,Wo] -> [K, B*Ho*Wo]."""
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(g.shape[1], -1)


def _conv_grad_input(g, w, stride, pad, in_hw):
    """Adjoint of _conv_fwd w.r.t. its input: [B,K,Ho,Wo] -> [B,C,H,W]."""
    b, k, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    gcols = w.reshape(k, -1).T @ _to_rows(g)
    gp = _col2im(gcols, b, c, h + 2 * pad, wd + 2 * pad, kh, kw, stride, ho, wo)
    return gp[:, :, pad : pad + h, pad : pad + wd]


def _conv_grad_weight(cols, g, kshape):
    """Weight gradient from forward columns [C*kh*kw, B*Ho*Wo] and output grad [B,K,Ho,Wo]."""
    return (_to_rows(g) @ cols.T).reshape(kshape)


def _check_kernel(x, w, op, in_axis):
    if w.ndim != 4:
        raise ValueError(f"{op}: kernel must be 4-D, got {w.shape}")
    if w.shape[in_axis] != x.shape[1]:
        raise ValueError(f"{op}: kernel expects {w.shape[in_axis]} input channels, got {x.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError(f"{op}: kernel size must be odd")


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation with kernel [K, C, kh, kw]; padding defaults to (k - 1) // 2."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    x4, sq = _lift(x)
    _check_kernel(x4, w, "conv2d", 1)
    pad = (w.shape[2] - 1) // 2 if padding is None else padding
    out, cols = _conv_fwd(x4.data, w.data, stride, pad)
    inputs = [x4, w]
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[0],):
            raise ValueError("conv2d: bias must have one entry per output channel")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    in_hw = x4.shape[2:]
    wd = w.data

    def back(g):
        gx = _conv_grad_input(g, wd, stride, pad, in_hw) if x4.requires_grad else None
        gw = _conv_grad_weight(cols, g, wd.shape) if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _drop(_record(out, inputs, back), sq)


def deconv2d(x, w, b=None, stride: int = 2, padding: int | None = None) -> Tensor:
    """Transposed convolution: the exact adjoint of `conv2d(., w, stride, padding)`.

    `w` has the conv layout [K, C, kh, kw] and maps K input channels to C outputs; the
    spatial size grows by `stride`.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    x4, sq = _lift(x)
    _check_kernel(x4, w, "deconv2d", 0)
    pad = (w.shape[2] - 1) // 2 if padding is None else padding
    h, wd_ = x4.shape[2] * stride, x4.shape[3] * stride
    if (h + 2 * pad - w.shape[2]) // stride + 1 != x4.shape[2]:
        raise ValueError("deconv2d: kernel/padding do not invert to the input size")
    wd = w.data
    out = _conv_grad_input(x4.data, wd, stride, pad, (h, wd_))
    inputs = [x4, w]
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[1],):
            raise ValueError("deconv2d: bias must have one entry per output channel")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    xd = x4.data

    def back(g):
        gx, gcols = _conv_fwd(g, wd, stride, pad)
        # the deconv input plays the conv-output role, its output grad the conv-input role
        gw = _conv_grad_weight(gcols, xd, wd.shape) if w.requires_grad else None
        res = [gx if x4.requires_grad else None, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _drop(_record(np.ascontiguousarray(out), inputs, back), sq)


# ----------------------------------------------------------------------------- matching / warping


def correlate(f1, f2, max_disp: int) -> Tensor:
    """Cost volume: channel (v + d) * (2d + 1) + (u + d) holds <f1(y, x), f2(y + v, x + u)> / C.

    f2 is zero outside the image.
    """
    f1 = _as_tensor(f1)
    f2 = _as_tensor(f2, f1)
    _same_shape(f1, f2, "correlate")
    a, sq = _lift(f1)
    bt, _ = _lift(f2)
    d = int(max_disp)
    if d < 0:
        raise ValueError("max_disp must be non-negative")
    B, C, H, W = a.shape
    inv_c = a.dtype.type(1.0 / C)
    ad = a.data
    bp = np.pad(bt.data, ((0, 0), (0, 0), (d, d), (d, d)))
    n = 2 * d + 1
    out = np.empty((B, n * n, H, W), dtype=a.dtype)
    for k in range(n * n):
        v, u = divmod(k, n)
        out[:, k] = np.einsum("bchw,bchw->bhw", ad, bp[:, :, v : v + H, u : u + W]) * inv_c

    def back(g):
        ga = np.zeros_like(ad)
        gbp = np.zeros_like(bp)
        for k in range(n * n):
            v, u = divmod(k, n)
            gk = g[:, k][:, None] * inv_c
            ga += gk * bp[:, :, v : v + H, u : u + W]
            gbp[:, :, v : v + H, u : u + W] += gk * ad
        return ga, gbp[:, :, d : d + H, d : d + W]

    return _drop(_record(out, (a, bt), back), sq)


def bilinear_sample(image, coords) -> Tensor:
    """Sample image [B,C,H,W] at coords [B,2,Ho,Wo] (channel 0 = column x, 1 = row y).

    Coordinates are in pixel-index units (integer coords hit pixel values exactly); taps
    outside the image read zero.
    """
    image = _as_tensor(image)
    coords = _as_tensor(coords, image)
    img, sq = _lift(image)
    crd, _ = _lift(coords)
    B, C, H, W = img.shape
    if crd.shape[0] != B or crd.shape[1] != 2:
        raise ValueError(f"coords must be [B,2,H,W] matching the image batch, got {crd.shape}")
    Ho, Wo = crd.shape[2:]
    x, y = crd.data[:, 0], crd.data[:, 1]
    x0f, y0f = np.floor(x), np.floor(y)
    wx, wy = (x - x0f).astype(img.dtype), (y - y0f).astype(img.dtype)
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    bidx = np.arange(B)[:, None, None]
    flat = img.data.reshape(B, C, H * W)

    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            lin = np.where(inside, yi * W + xi, 0)
            vals = flat[bidx[:, None], np.arange(C)[None, :, None, None], lin[:, None]]  # [B,C,Ho,Wo]
            vals = vals * inside[:, None]
            wgt_x = wx if dx else 1 - wx
            wgt_y = wy if dy else 1 - wy
            taps.append((lin, inside, vals, wgt_x, wgt_y, dx, dy))

    out = np.zeros((B, C, Ho, Wo), dtype=img.dtype)
    for _, _, vals, gx_, gy_, _, _ in taps:
        out += vals * (gx_ * gy_)[:, None]

    def back(g):
        gimg = None
        if img.requires_grad:
            gimg = np.zeros(B * C * H * W, dtype=np.float64)
            base = (np.arange(B)[:, None] * C + np.arange(C)[None, :]) * (H * W)  # [B,C]
            for lin, inside, _, gx_, gy_, _, _ in taps:
                contrib = g * ((gx_ * gy_) * inside)[:, None]
                idx = base[:, :, None, None] + lin[:, None]
                gimg += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=gimg.size)
            gimg = gimg.reshape(B, C, H, W).astype(img.dtype)
        gcrd = None
        if crd.requires_grad:
            gcx = np.zeros((B, Ho, Wo), dtype=np.float64)
            gcy = np.zeros((B, Ho, Wo), dtype=np.float64)
            for _, _, vals, gx_, gy_, dx, dy in taps:
                s = np.einsum("bchw,bchw->bhw", g, vals)
                gcx += s * gy_ * (1 if dx else -1)
                gcy += s * gx_ * (1 if dy else -1)
            gcrd = np.stack([gcx, gcy], axis=1).astype(crd.dtype)
        return gimg, gcrd

    return _drop(_record(out, (img, crd), back), sq)


def linear(x, w, b=None) -> Tensor:
    """Fully connected layer: x [B, F] @ w[O, F].T (+ b[O])."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data.T
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (w.shape[0],):
            raise ValueError("linear: bias must have one entry per output")
        out = out + b.data
        inputs.append(b)
    xd, wd = x.data, w.data

    def back(g):
        res = [g @ wd, g.T @ xd]
        if b is not None:
            res.append(g.sum(axis=0))
        return res

    return _record(out, inputs, back)
