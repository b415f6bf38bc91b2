"""
Differentiable kernels: elementwise suite, shape ops, matmul, conv2d,
nearest upsampling, bilinear sampling and the two logit losses.

Axis order is C-before-spatial ([N,C,H,W] or [C,H,W]) everywhere.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import DimensionError
from .tensor import Tensor, make_result

ArrayLike = Union[Tensor, np.ndarray, float, int]


def _as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)

    def _backward(g):
        return (g * factor,)

    return make_result("scale", a.data * factor, (a,), _backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _backward(g):
        return (g * mask,)

    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), _backward)


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -a.data)).astype(a.dtype)

    def _backward(g):
        return (g * out * (1 - out),)

    return make_result("sigmoid", out, (a,), _backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _backward(g):
        return (g * out,)

    return make_result("exp", out, (a,), _backward)


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)

    def _backward(g):
        return (g * sign,)

    return make_result("abs", np.abs(a.data), (a,), _backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return make_result("sum", out, (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def _backward(g):
        return (g.reshape(a.shape),)

    return make_result("reshape", a.data.reshape(shape), (a,), _backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (g.transpose(inverse),)

    return make_result("transpose", a.data.transpose(axes), (a,), _backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return make_result("getitem", np.asarray(a.data[index]), (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: contraction axis mismatch, a axis -1 = {a.shape[-1]} vs b axis -2 = {b.shape[-2]}"
        )

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result("matmul", a.data @ b.data, (a, b), _backward)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation over [C,H,W] or [N,C,H,W] input."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [C_out,C_in,kh,kw], got {weight.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input axis C_in={c} does not match weight axis C_in={c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes kh={kh}, kw={kw} must be odd")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis {bias.shape} does not match weight axis C_out={c_out}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride={stride} must be >= 1 and pad={pad} >= 0")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d: spatial axes H={h}, W={w} too small for kernel {kh}x{kw} with pad {pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def _backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(n, h_out, w_out, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=np.result_type(gcols.dtype, xp.dtype))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, _backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def _backward(g):
        shape = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(shape).sum(axis=(-3, -1)),)

    return make_result("upsample_nearest2x", out, (x,), _backward)


# ---------------------------------------------------------------- sampling

def bilinear_sample(features: Tensor, points: Tensor) -> Tensor:
    """Sample features[..., C, H, W] at continuous (x, y) points[..., P, 2].

    Integer coordinates are cell centers. Points outside [0, W-1] x [0, H-1]
    clamp to the edge and receive zero coordinate gradient on that axis.
    Returns [..., P, C].
    """
    f = features.data
    p = points.data
    if f.ndim < 3:
        raise DimensionError(f"bilinear_sample features must be [..., C, H, W], got {features.shape}")
    lead = f.shape[:-3]
    c, h, w = f.shape[-3:]
    if p.ndim != len(lead) + 2 or p.shape[:-2] != lead or p.shape[-1] != 2:
        raise DimensionError(
            f"bilinear_sample points must be [..., P, 2] with leading axes {lead}, got {points.shape}"
        )
    n_points = p.shape[-2]
    m = int(np.prod(lead)) if lead else 1
    fm = f.reshape(m, c, h, w)
    pm = p.reshape(m, n_points, 2)

    x = pm[..., 0]
    y = pm[..., 1]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x_in = ((x >= 0) & (x <= w - 1)).astype(p.dtype)
    y_in = ((y >= 0) & (y <= h - 1)).astype(p.dtype)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0)[..., None]
    wy = (yc - y0)[..., None]

    ft = fm.transpose(0, 2, 3, 1)
    batch = np.broadcast_to(np.arange(m)[:, None], (m, n_points))
    v00 = ft[batch, y0, x0]
    v01 = ft[batch, y0, x1]
    v10 = ft[batch, y1, x0]
    v11 = ft[batch, y1, x1]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    out = out.reshape(lead + (n_points, c))

    def _backward(g):
        gm = g.reshape(m, n_points, c)
        flat = np.zeros((m * h * w, c), dtype=np.result_type(gm.dtype, f.dtype))
        corners = (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        )
        for yy, xx, weight in corners:
            idx = ((batch * h + yy) * w + xx).reshape(-1)
            np.add.at(flat, idx, (weight * gm).reshape(-1, c))
        gf = flat.reshape(m, h, w, c).transpose(0, 3, 1, 2).reshape(f.shape)
        dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
        dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
        gx = (gm * dx).sum(axis=-1) * x_in
        gy = (gm * dy).sum(axis=-1) * y_in
        gp = np.stack([gx, gy], axis=-1).reshape(p.shape)
        return gf, gp

    return make_result("bilinear_sample", out, (features, points), _backward)


# ---------------------------------------------------------------- losses

def sigmoid_focal_loss(logits: Tensor, targets: ArrayLike, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Per-element focal loss on logits, stable for extreme values."""
    z = logits.data
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=z.dtype)
    softplus_pos = np.logaddexp(0, z)      # -log(1 - p)
    softplus_neg = np.logaddexp(0, -z)     # -log(p)
    p = np.exp(-softplus_neg)
    q = np.exp(-softplus_pos)
    pos_w = alpha * q ** gamma
    neg_w = (1 - alpha) * p ** gamma
    out = t * pos_w * softplus_neg + (1 - t) * neg_w * softplus_pos

    def _backward(g):
        d_pos = pos_w * (-gamma * p * softplus_neg - q)
        d_neg = neg_w * (gamma * q * softplus_pos + p)
        return (g * (t * d_pos + (1 - t) * d_neg),)

    return make_result("sigmoid_focal_loss", out.astype(z.dtype), (logits,), _backward)


def binary_cross_entropy_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    z = logits.data
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=z.dtype)
    out = t * np.logaddexp(0, -z) + (1 - t) * np.logaddexp(0, z)
    p = np.exp(-np.logaddexp(0, -z))

    def _backward(g):
        return (g * (p - t),)

    return make_result("bce_with_logits", out.astype(z.dtype), (logits,), _backward)


def binary_entropy(targets: np.ndarray) -> np.ndarray:
    """H(t) in nats; the floor of BCE for soft targets."""
    t = np.clip(np.asarray(targets, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(t > 0, t * np.log(t), 0.0) + np.where(t < 1, (1 - t) * np.log(1 - t), 0.0))
    return h
