"""Independent reference implementations used by the tests.

Everything here is written as plain loops or closed forms so it shares no code path with
the package under test.
"""

from __future__ import annotations

import math

import numpy as np

# ---------------------------------------------------------------- rasterization


def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L = dx * dx + dy * dy
    t = 0.0 if L == 0 else min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / L))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)


def brute_force_raster(tris, xy, z, width, height, edge_eps=1e-6):
    """Per-pixel point-in-triangle test over all triangles, min depth wins, ties to lower index.

    Returns (triangle id (H,W), depth (H,W), ambiguous (H,W) bool) where ambiguous marks
    pixel centers within edge_eps of any projected edge of a non-degenerate triangle.
    """
    tid = np.full((height, width), -1, dtype=np.int64)
    depth = np.zeros((height, width))
    amb = np.zeros((height, width), dtype=bool)
    for r in range(height):
        for c in range(width):
            px, py = c + 0.5, r + 0.5
            best = math.inf
            for t, (a, b, d) in enumerate(tris):
                A = np.array([[xy[a, 0] - xy[d, 0], xy[b, 0] - xy[d, 0]], [xy[a, 1] - xy[d, 1], xy[b, 1] - xy[d, 1]]])
                if abs(np.linalg.det(A)) < 1e-12:
                    continue
                for u, v in ((a, b), (b, d), (d, a)):
                    if _seg_dist(px, py, xy[u, 0], xy[u, 1], xy[v, 0], xy[v, 1]) < edge_eps:
                        amb[r, c] = True
                l0, l1 = np.linalg.solve(A, [px - xy[d, 0], py - xy[d, 1]])
                l2 = 1.0 - l0 - l1
                if min(l0, l1, l2) < 0:
                    continue
                zz = l0 * z[a] + l1 * z[b] + l2 * z[d]
                if zz < best:
                    best = zz
                    tid[r, c] = t
                    depth[r, c] = zz
    return tid, depth, amb


def brute_force_raster_vec(tris, xy, z, width, height, edge_eps=1e-6):
    """Same contract as `brute_force_raster`, vectorised over pixels for larger suites.

    Barycentrics come from Cramer's rule on each triangle's 2x2 system; triangles are
    visited in index order with a strict depth comparison, so ties keep the lower index.
    """
    cy, cx = np.mgrid[0:height, 0:width] + 0.5
    tid = np.full((height, width), -1, dtype=np.int64)
    depth = np.zeros((height, width))
    best = np.full((height, width), np.inf)
    amb = np.zeros((height, width), dtype=bool)
    for t, (a, b, d) in enumerate(tris):
        (ax, ay), (bx, by), (dx, dy) = xy[a], xy[b], xy[d]
        det = (ax - dx) * (by - dy) - (bx - dx) * (ay - dy)
        if abs(det) < 1e-12:
            continue
        for (ux, uy), (vx, vy) in (((ax, ay), (bx, by)), ((bx, by), (dx, dy)), ((dx, dy), (ax, ay))):
            ex, ey = vx - ux, vy - uy
            s = np.clip(((cx - ux) * ex + (cy - uy) * ey) / (ex * ex + ey * ey), 0, 1)
            amb |= np.hypot(cx - ux - s * ex, cy - uy - s * ey) < edge_eps
        rx, ry = cx - dx, cy - dy
        l0 = (rx * (by - dy) - (bx - dx) * ry) / det
        l1 = ((ax - dx) * ry - rx * (ay - dy)) / det
        l2 = 1.0 - l0 - l1
        zz = l0 * z[a] + l1 * z[b] + l2 * z[d]
        win = (np.minimum(np.minimum(l0, l1), l2) >= 0) & (zz < best)
        best[win] = zz[win]
        depth[win] = zz[win]
        tid[win] = t
    return tid, depth, amb


def random_mesh(rng, width, height, n_tri, n_vert=None):
    n_vert = n_vert or max(5, int(n_tri * 1.5))
    xy = rng.uniform([-4, -4], [width + 4, height + 4], size=(n_vert, 2))
    z = rng.uniform(0.5, 10.0, size=n_vert)
    # distinct vertex sets: duplicated triangles are coplanar and their depths tie only up
    # to rounding, which makes the winner arbitrary
    seen, tris = set(), []
    while len(tris) < n_tri:
        t = rng.choice(n_vert, 3, replace=False)
        if frozenset(t.tolist()) not in seen:
            seen.add(frozenset(t.tolist()))
            tris.append(t)
    return np.array(tris), xy, z


# ---------------------------------------------------------------- finite differences


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar f() with respect to array x (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, rel=1e-3, floor=1e-6):
    """Max over entries of |a - n| / max(|a|, |n|, floor) < rel. Returns (ok, worst)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    # entries where both sides are tiny compare absolutely against the floor
    tiny = np.maximum(np.abs(a), np.abs(n)) < floor
    err = np.where(tiny, np.abs(a - n) / floor, err)
    worst = float(err.max()) if err.size else 0.0
    return worst < rel, worst


def dffnet_fd(seed, cfg, h):
    """Worst FD relative error of a DFFNet over sampled parameter entries (float64)."""
    from faceflow import tensor as T
    from faceflow.networks import dffnet_forward, init_dffnet

    rng = np.random.default_rng(seed)
    params = init_dffnet(cfg, seed=seed, dtype=np.float64)
    for p in params.values():  # non-zero biases so every bias gradient is exercised
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    i1, i2, pn = (rng.uniform(0, 1, size=(1, 3, cfg.height, cfg.width)) for _ in range(3))
    R = [rng.normal(size=f.shape) for f in dffnet_forward(params, i1, i2, pn, cfg)]

    def scalar():
        return float(sum((f.data * r).sum() for f, r in zip(dffnet_forward(params, i1, i2, pn, cfg), R)))

    with T.Tape() as tape:
        flows = dffnet_forward(params, i1, i2, pn, cfg)
        total = None
        for f, r in zip(flows, R):
            term = T.sum_all(T.mul(f, T.Tensor(r)))
            total = term if total is None else T.add(total, term)
    tape.backward(total)
    worst = 0.0
    for name in sorted(params)[seed % 3 :: 3]:  # a third of the tensors per instance, rotating
        p = params[name]
        idx = rng.choice(p.data.size, size=min(6, p.data.size), replace=False)
        flat = p.data.reshape(-1)
        num = []
        for k in idx:
            x = np.array([0.0])

            def f_k():
                old = flat[k]
                flat[k] = old + x[0]
                v = scalar()
                flat[k] = old
                return v

            num.append(numeric_grad(f_k, x, h=h)[0])
        _, w = grad_close(p.grad.reshape(-1)[idx], np.array(num))
        worst = max(worst, w)
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def off_integer(rng, shape, lo, hi, margin=0.02):
    c = rng.uniform(lo, hi, size=shape)
    frac = c - np.floor(c)
    return np.where(frac < margin, c + margin, np.where(frac > 1 - margin, c - margin, c))


# ---------------------------------------------------------------- scalar layer references


def conv2d_loops(x, w, b, stride, pad):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo))
    for n in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0 if b is None else b[k]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - pad
                                q = j * stride + v - pad
                                if 0 <= r < H and 0 <= q < W:
                                    s += x[n, c, r, q] * w[k, c, u, v]
                    out[n, k, i, j] = s
    return out


def deconv2d_scatter(x, w, b, stride, pad):
    """Transposed convolution as an explicit scatter of every input pixel."""
    B, Cin, H, W = x.shape
    _, Cout, kh, kw = w.shape
    Ho, Wo = H * stride, W * stride
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    for k in range(Cout):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - pad
                                q = j * stride + v - pad
                                if 0 <= r < Ho and 0 <= q < Wo:
                                    out[n, k, r, q] += x[n, c, i, j] * w[c, k, u, v]
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def correlate_loops(f1, f2, d):
    B, C, H, W = f1.shape
    D = 2 * d + 1
    out = np.zeros((B, D * D, H, W))
    for n in range(B):
        for v in range(-d, d + 1):
            for u in range(-d, d + 1):
                k = (v + d) * D + (u + d)
                for y in range(H):
                    for x in range(W):
                        if 0 <= y + v < H and 0 <= x + u < W:
                            out[n, k, y, x] = np.dot(f1[n, :, y, x], f2[n, :, y + v, x + u]) / C
    return out


def bilinear_loops(img, coords):
    B, C, H, W = img.shape
    _, _, Ho, Wo = coords.shape
    out = np.zeros((B, C, Ho, Wo))
    for n in range(B):
        for i in range(Ho):
            for j in range(Wo):
                x, y = coords[n, 0, i, j], coords[n, 1, i, j]
                x0, y0 = math.floor(x), math.floor(y)
                for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
                    for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
                        if 0 <= yy < H and 0 <= xx < W:
                            out[n, :, i, j] += wy * wx * img[n, :, yy, xx]
    return out


# ---------------------------------------------------------------- optimizer


def scalar_adam(x0, grads_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-rolled scalar Adam; grads_fn(x, t) gives the gradient at step t (1-based)."""
    x, m, v = float(x0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grads_fn(x, t)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(x)
    return trace


def gradcheck(fn, inputs, rng, h=1e-3, rel=1e-3, floor=1e-6, which=None):
    """Compare tape gradients of sum(fn(*tensors) * R) against central differences.

    `inputs` are float64 arrays; `fn` maps Tensors to a Tensor. A fixed random projection R
    turns any output into a scalar. Returns the worst relative error over all inputs.
    """
    from faceflow import tensor as T

    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    which = range(len(arrays)) if which is None else which
    out0 = fn(*[T.Tensor(a) for a in arrays])
    R = rng.normal(size=out0.shape)

    def scalar():
        return float((fn(*[T.Tensor(a) for a in arrays]).data * R).sum())

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
        loss = T.sum_all(T.mul(out, T.Tensor(R)))
    tape.backward(loss)
    worst = 0.0
    for k in which:
        num = numeric_grad(scalar, arrays[k], h)
        ana = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k])
        _, w = grad_close(ana, num, rel, floor)
        worst = max(worst, w)
    return worst
