"""Differentiable primitives.

Every function takes/returns Tensor and registers an explicit backward
closure. Convolutions use zero padding; local stride-1 pooling uses replicate
padding so constants pass through unchanged. No strided convs, no dilation.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, astensor, make


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to the given (broadcast-source) shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = astensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = astensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return make(out, (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return make(out, (a,), backward, "sqrt")


def absolute(a) -> Tensor:
    a = astensor(a)
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return make(out, (a,), backward, "abs")


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make(out, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(g):
        return (g * mask,)

    return make(out, (a,), backward, "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    a = astensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return make(out, (a,), backward, "clip")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = astensor(a), astensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return make(out, (a, b), backward, "maximum")


def expm1_over_x(a) -> Tensor:
    """phi1(x) = (e^x - 1)/x with a Taylor branch below |x| = 1e-4.

    Series: 1 + x/2 + x^2/6 + x^3/24. Derivative closed form
    (e^x (x - 1) + 1)/x^2, series 1/2 + x/3 + x^2/8 + x^3/30.
    """
    a = astensor(a)
    x = a.data
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)  # dodge 0/0 in the closed branch
    closed = np.expm1(xs) / xs
    series = 1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0
    out = np.where(small, series, closed)

    def backward(g):
        d_closed = (np.exp(xs) * (xs - 1.0) + 1.0) / (xs * xs)
        d_series = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
        return (g * np.where(small, d_series, d_closed),)

    return make(out, (a,), backward, "expm1_over_x")


# -- reductions / shape -------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return make(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return make(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return make(out, (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = astensor(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return make(out, (a,), backward, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(out, tuple(tensors), backward, "concat")


def sorted_stack_sum(tensors) -> Tensor:
    """Elementwise sum of equal-shape tensors, accumulated in per-element
    ascending value order so the result is exactly invariant under any
    permutation of the inputs."""
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("sorted_stack_sum: need at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"sorted_stack_sum: {t.data.shape} != {shape}")
    if len(tensors) == 1:
        out = tensors[0].data.copy()
    else:
        stack = np.stack([t.data for t in tensors], axis=0)
        stack.sort(axis=0)
        out = np.add.reduce(stack, axis=0)

    def backward(g):
        return tuple(g for _ in tensors)

    return make(out, tuple(tensors), backward, "sorted_stack_sum")


def index_last(a, k: int) -> Tensor:
    """x[..., k] as a differentiable slice."""
    a = astensor(a)
    out = a.data[..., k]

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[..., k] = g
        return (dx,)

    return make(out, (a,), backward, "index_last")


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Reorder along the last axis.

    idx is (N,) shared across the batch or (B, N) per sample; per-sample
    indexing assumes the leading tensor axis is the batch.
    """
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        out = a.data[..., idx]

        def backward(g):
            dx = np.zeros_like(a.data)
            np.add.at(np.moveaxis(dx, -1, 0), idx, np.moveaxis(g, -1, 0))
            return (dx,)

        return make(out, (a,), backward, "gather_last")
    if idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"gather_last: index shape {idx.shape} does not fit input {a.data.shape}")
    expand = (slice(None),) + (None,) * (a.data.ndim - 2) + (slice(None),)
    idx_b = np.broadcast_to(idx[expand], a.data.shape[:-1] + (idx.shape[1],))
    out = np.take_along_axis(a.data, idx_b, axis=-1)

    def backward(g):
        dx = np.zeros_like(a.data)
        grids = np.meshgrid(*[np.arange(s) for s in g.shape[:-1]], indexing="ij")
        lead = tuple(gr[..., None] for gr in grids)
        np.add.at(dx, lead + (idx_b,), g)
        return (dx,)

    return make(out, (a,), backward, "gather_last")


# -- linear maps --------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """y = x @ w.T (+ b); x is (..., in), w is (out, in)."""
    x, w = astensor(x), astensor(w)
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} does not match weight {w.data.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, w.data.shape[0])
        x2 = x.data.reshape(-1, w.data.shape[1])
        gx = (g @ w.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, _unbroadcast(g, b.data.shape)

    return make(out, tuple(parents), backward, "linear")


def channel_project(x, w, b=None) -> Tensor:
    """Pointwise (1x1) channel mixing: x is (B, Cin, *spatial), w is (Cout, Cin)."""
    x, w = astensor(x), astensor(w)
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"channel_project: input channels {x.data.shape[1]} of {x.data.shape} "
            f"do not match weight {w.data.shape}")
    out = np.einsum("oc,bc...->bo...", w.data, x.data)
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        out = out + b.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
        parents.append(b)

    def backward(g):
        gx = np.einsum("oc,bo...->bc...", w.data, g)
        g3 = g.reshape(g.shape[0], g.shape[1], -1)
        x3 = x.data.reshape(x.data.shape[0], x.data.shape[1], -1)
        gw = np.einsum("bos,bcs->oc", g3, x3)
        if b is None:
            return gx, gw
        gb = g.sum(axis=tuple(ax for ax in range(g.ndim) if ax != 1))
        return gx, gw, gb

    return make(out, tuple(parents), backward, "channel_project")


# -- convolution / padding / pooling ------------------------------------------

def conv2d_depthwise(x, kernel) -> Tensor:
    """Per-channel 2D conv, zero-padded to keep spatial dims; kernel is (C, kh, kw)."""
    x, kernel = astensor(x), astensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 3:
        raise ShapeError(f"conv2d_depthwise: need (B,C,H,W) and (C,kh,kw), "
                         f"got {x.data.shape} and {kernel.data.shape}")
    B, C, H, W = x.data.shape
    kc, kh, kw = kernel.data.shape
    if kc != C:
        raise ShapeError(f"conv2d_depthwise: kernel channels {kc} do not match input "
                         f"channels {C} (input {x.data.shape}, kernel {kernel.data.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d_depthwise: even kernel {kernel.data.shape} unsupported")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, C, H, W))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + H, j:j + W] * kernel.data[:, i, j][None, :, None, None]

    def backward(g):
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gk[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + H, j:j + W] += g * kernel.data[:, i, j][None, :, None, None]
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        return gx, gk

    return make(out, (x, kernel), backward, "conv2d_depthwise")


def replicate_pad(x, p: int) -> Tensor:
    x = astensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"replicate_pad: need (B,C,H,W), got {x.data.shape}")
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    H, W = x.data.shape[2:]

    def backward(g):
        # fold padded-border gradient back onto the edge rows / cols it copied
        gy = np.zeros(g.shape[:2] + (H, g.shape[3]))
        gy[:, :, 0] = g[:, :, :p + 1].sum(axis=2)
        gy[:, :, -1] += g[:, :, -(p + 1):].sum(axis=2) - (g[:, :, p] if H == 1 else 0)
        if H > 1:
            gy[:, :, 1:-1] = g[:, :, p + 1:p + H - 1]
        gx = np.zeros(g.shape[:2] + (H, W))
        gx[:, :, :, 0] = gy[:, :, :, :p + 1].sum(axis=3)
        gx[:, :, :, -1] += gy[:, :, :, -(p + 1):].sum(axis=3) - (gy[:, :, :, p] if W == 1 else 0)
        if W > 1:
            gx[:, :, :, 1:-1] = gy[:, :, :, p + 1:p + W - 1]
        return (gx,)

    return make(out, (x,), backward, "replicate_pad")


def _window_mean_valid(x, k: int) -> Tensor:
    """Valid k x k stride-1 window mean on an already padded (B,C,H,W) tensor."""
    x = astensor(x)
    B, C, H, W = x.data.shape
    oh, ow = H - k + 1, W - k + 1
    out = np.zeros((B, C, oh, ow))
    for i in range(k):
        for j in range(k):
            out += x.data[:, :, i:i + oh, j:j + ow]
    out /= k * k

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + oh, j:j + ow] += gk
        return (gx,)

    return make(out, (x,), backward, "window_mean")


def _window_max_valid(x, k: int) -> Tensor:
    """Valid k x k stride-1 window max; ties route to the first window offset."""
    x = astensor(x)
    B, C, H, W = x.data.shape
    oh, ow = H - k + 1, W - k + 1
    best = x.data[:, :, 0:oh, 0:ow].copy()
    arg = np.zeros((B, C, oh, ow), dtype=np.int64)
    for idx in range(1, k * k):
        i, j = divmod(idx, k)
        cand = x.data[:, :, i:i + oh, j:j + ow]
        better = cand > best
        best = np.where(better, cand, best)
        arg = np.where(better, idx, arg)

    def backward(g):
        gx = np.zeros_like(x.data)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i:i + oh, j:j + ow] += g * (arg == idx)
        return (gx,)

    return make(best, (x,), backward, "window_max")


def pool2d(x, kind: str = "avg", k: int | None = None) -> Tensor:
    """Pooling. k=None pools globally to (B,C,1,1); otherwise local stride-1
    same-size pooling with replicate padding (constants pass through)."""
    x = astensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d: need (B,C,H,W), got {x.data.shape}")
    if kind not in ("avg", "max"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    if k is None:
        if kind == "avg":
            return tmean(x, axis=(2, 3), keepdims=True)
        return _global_max(x)
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"pool2d: local window must be odd and positive, got {k}")
    H, W = x.data.shape[2:]
    if k > H + 2 * (k // 2) or k > W + 2 * (k // 2):
        raise ShapeError(f"pool2d: window {k} exceeds padded input {x.data.shape}")
    xp = replicate_pad(x, k // 2)
    if kind == "avg":
        return _window_mean_valid(xp, k)
    return _window_max_valid(xp, k)


def _global_max(x) -> Tensor:
    x = astensor(x)
    B, C, H, W = x.data.shape
    flat = x.data.reshape(B, C, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(B, C, 1, 1)

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g.reshape(B, C, 1), axis=-1)
        return (gf.reshape(x.data.shape),)

    return make(out, (x,), backward, "global_max")


def upsample_bilinear(x, out_hw: tuple) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping."""
    x = astensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear: need (B,C,H,W), got {x.data.shape}")
    H, W = x.data.shape[2:]
    oh, ow = out_hw

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0f = np.floor(src)
        t = src - i0f
        i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
        return i0, i1, t

    y0, y1, ty = axis_weights(H, oh)
    x0, x1, tx = axis_weights(W, ow)
    wy0, wy1 = (1 - ty)[:, None], ty[:, None]
    wx0, wx1 = (1 - tx)[None, :], tx[None, :]
    corners = [(y0, x0, wy0 * wx0), (y0, x1, wy0 * wx1),
               (y1, x0, wy1 * wx0), (y1, x1, wy1 * wx1)]
    out = np.zeros(x.data.shape[:2] + (oh, ow))
    for iy, ix, w in corners:
        out += x.data[:, :, iy[:, None], ix[None, :]] * w

    def backward(g):
        gx = np.zeros_like(x.data)
        gx_flat = np.moveaxis(gx.reshape(gx.shape[:2] + (H * W,)), -1, 0)
        for iy, ix, w in corners:
            idx = (iy[:, None] * W + ix[None, :]).reshape(-1)
            contrib = np.moveaxis((g * w).reshape(g.shape[:2] + (oh * ow,)), -1, 0)
            np.add.at(gx_flat, idx, contrib)
        return (np.moveaxis(gx_flat, 0, -1).reshape(x.data.shape),)

    return make(out, (x,), backward, "upsample_bilinear")


# -- composite norms ----------------------------------------------------------

def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """GroupNorm from primitives (batch-free, per-sample statistics)."""
    x = astensor(x)
    B, C, H, W = x.data.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: channels {C} not divisible by groups {num_groups}")
    xg = reshape(x, (B, num_groups, C // num_groups * H * W))
    mu = tmean(xg, axis=2, keepdims=True)
    cen = sub(xg, mu)
    var = tmean(mul(cen, cen), axis=2, keepdims=True)
    norm = div(cen, sqrt(add(var, eps)))
    norm = reshape(norm, (B, C, H, W))
    gview = reshape(gamma, (1, C, 1, 1))
    bview = reshape(beta, (1, C, 1, 1))
    return add(mul(norm, gview), bview)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel batch-statistics normalization (no running averages)."""
    x = astensor(x)
    C = x.data.shape[1]
    mu = tmean(x, axis=(0, 2, 3), keepdims=True)
    cen = sub(x, mu)
    var = tmean(mul(cen, cen), axis=(0, 2, 3), keepdims=True)
    norm = div(cen, sqrt(add(var, eps)))
    gview = reshape(gamma, (1, C, 1, 1))
    bview = reshape(beta, (1, C, 1, 1))
    return add(mul(norm, gview), bview)


def conv2d(x, kernel, mode: str = "depthwise", bias=None) -> Tensor:
    """Dispatch wrapper: pointwise (1x1 dense channel mix) or depthwise (per
    channel, same zero padding)."""
    if mode == "pointwise":
        k = astensor(kernel)
        if k.data.ndim == 4:
            if k.data.shape[2:] != (1, 1):
                raise ShapeError(f"conv2d pointwise: kernel {k.data.shape} is not 1x1")
            k = reshape(k, k.data.shape[:2])
        return channel_project(x, k, bias)
    if mode == "depthwise":
        k = astensor(kernel)
        if k.data.ndim == 4:
            if k.data.shape[1] != 1:
                raise ShapeError(f"conv2d depthwise: kernel {k.data.shape} must have "
                                 f"a singleton second axis")
            k = reshape(k, (k.data.shape[0],) + k.data.shape[2:])
        out = conv2d_depthwise(x, k)
        if bias is not None:
            out = add(out, reshape(bias, (1, -1, 1, 1)))
        return out
    raise ValueError(f"conv2d: unknown mode {mode!r}")


def stack_last(tensors) -> Tensor:
    """Stack a list of (..., ) tensors into (..., N) along a new last axis."""
    cols = [reshape(t, t.data.shape + (1,)) for t in tensors]
    return concat(cols, axis=-1)
