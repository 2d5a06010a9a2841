"""Differentiable image and attention operations on NCHW tensors."""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError
from .tensor import Tensor, _count_flops, add, make_result, matmul, transpose


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {n + 2 * padding}")
    return span // stride + 1


# -- convolution -------------------------------------------------------------


def _conv_dense(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    """groups=1 convolution on a padded input; returns (out, backward closure)."""
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    wm = w.reshape(o, -1)
    if kh == 1 and kw == 1:
        xs = xp[:, :, : stride * ho : stride, : stride * wo : stride]
        out = np.tensordot(wm, xs, axes=([1], [1])).transpose(1, 0, 2, 3)

        def back(g):
            gx_s = np.tensordot(wm, g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if stride == 1:
                gxp = gx_s
            else:
                gxp = np.zeros_like(xp)
                gxp[:, :, : stride * ho : stride, : stride * wo : stride] = gx_s
            gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3])).reshape(w.shape)
            return gxp, gw

        return np.ascontiguousarray(out), back

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        # scatter in channel-major layout so every source slice is contiguous
        dcols = np.tensordot(w, g, axes=([0], [1]))  # (C, kh, kw, N, Ho, Wo)
        gxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        return gxp.transpose(1, 0, 2, 3), gw

    return np.ascontiguousarray(out), back


def _conv_depthwise(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    kh, kw = w.shape[2:]
    wk = w[:, 0]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * wk[
                None, :, i, j, None, None
            ]

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                      slice(j, j + stride * wo, stride))
                gxp[sl] += g * wk[None, :, i, j, None, None]
                gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        return gxp, gw

    return out, back


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels {c}->{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(wd, kw, stride, padding)
    _count_flops(2 * n * o * ho * wo * cg * kh * kw)

    xp = _pad(x.data, padding)
    wdata = w.data
    if groups == 1:
        out, back = _conv_dense(xp, wdata, stride, ho, wo)
    elif groups == c and o == c:
        out, back = _conv_depthwise(xp, wdata, stride, ho, wo)
    else:
        og = o // groups
        parts = [
            _conv_dense(xp[:, k * cg : (k + 1) * cg], wdata[k * og : (k + 1) * og], stride, ho, wo)
            for k in range(groups)
        ]
        out = np.concatenate([p[0] for p in parts], axis=1)

        def back(g):
            gxp = np.empty_like(xp)
            gw = np.empty_like(wdata)
            for k, (_, bk) in enumerate(parts):
                gx_k, gw_k = bk(g[:, k * og : (k + 1) * og])
                gxp[:, k * cg : (k + 1) * cg] = gx_k
                gw[k * og : (k + 1) * og] = gw_k
            return gxp, gw

    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]

    def grad_fn(g):
        gxp, gw = back(g)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, grad_fn)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T + b over the last axis; ``w`` is [out, in]."""
    y = matmul(x, transpose(w, (1, 0)))
    return add(y, b) if b is not None else y


# -- pooling ------------------------------------------------------------------


def _check_window(x: Tensor, window: int, stride: int):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than input {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    stride = window if stride is None else stride
    ho, wo = _check_window(x, window, stride)
    xd = x.data
    n, c = xd.shape[:2]
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(xd)
        for k in range(window * window):
            i, j = divmod(k, window)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == k)
        return (gx,)

    return make_result(out, (x,), grad_fn)


def avg_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    stride = window if stride is None else stride
    ho, wo = _check_window(x, window, stride)
    xd = x.data
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(-2, -1)).astype(xd.dtype)
    inv = xd.dtype.type(1.0 / (window * window))

    def grad_fn(g):
        gx = np.zeros_like(xd)
        gs = g * inv
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gx,)

    return make_result(out, (x,), grad_fn)


def pool2d(kind: str, x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "avg":
        return avg_pool2d(x, window, stride)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg expects NCHW input, got {x.shape}")
    xd = x.data
    hw = xd.shape[2] * xd.shape[3]
    inv = xd.dtype.type(1.0 / hw)
    out = xd.sum(axis=(2, 3), keepdims=True) * inv
    return make_result(out, (x,), lambda g: (np.broadcast_to(g * inv, xd.shape).copy(),))


def _adaptive_bounds(n: int, g: int):
    return [((i * n) // g, -((-(i + 1) * n) // g)) for i in range(g)]


def adaptive_pool2d(kind: str, x: Tensor, grid: int) -> Tensor:
    """Pool an NCHW tensor onto a grid x grid lattice of (possibly uneven) cells."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive pooling expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if grid < 1 or grid > h or grid > w:
        raise ShapeError(f"grid {grid} does not fit a {h}x{w} feature map")
    if h % grid == 0 and w % grid == 0 and h == w:
        k = h // grid
        if k == 1:
            return make_result(x.data.copy(), (x,), lambda g: (g,))
        return pool2d(kind, x, k, k)
    xd = x.data
    rows, cols = _adaptive_bounds(h, grid), _adaptive_bounds(w, grid)
    out = np.empty(xd.shape[:2] + (grid, grid), dtype=xd.dtype)
    picks = {}
    for a, (r0, r1) in enumerate(rows):
        for b, (c0, c1) in enumerate(cols):
            cell = xd[:, :, r0:r1, c0:c1]
            if kind == "avg":
                out[:, :, a, b] = cell.mean(axis=(2, 3))
            else:
                flat = cell.reshape(cell.shape[0], cell.shape[1], -1)
                arg = flat.argmax(axis=-1)
                picks[a, b] = arg
                out[:, :, a, b] = np.take_along_axis(flat, arg[..., None], -1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(xd)
        for a, (r0, r1) in enumerate(rows):
            for b, (c0, c1) in enumerate(cols):
                ga = g[:, :, a, b]
                if kind == "avg":
                    gx[:, :, r0:r1, c0:c1] += (ga / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
                else:
                    arg = picks[a, b]
                    cw = c1 - c0
                    sub = np.zeros(xd.shape[:2] + ((r1 - r0) * cw,), dtype=xd.dtype)
                    np.put_along_axis(sub, arg[..., None], ga[..., None], -1)
                    gx[:, :, r0:r1, c0:c1] += sub.reshape(xd.shape[:2] + (r1 - r0, cw))
        return (gx,)

    return make_result(out, (x,), grad_fn)


# -- resampling ----------------------------------------------------------------------


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"resize expects NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid output size {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    dt = x.dtype.str
    ry = _interp_matrix(h, out_h, dt)
    rx = _interp_matrix(w, out_w, dt)
    out = ry @ (x.data @ rx.T)

    def grad_fn(g):
        return ((ry.T @ g) @ rx,)

    return make_result(out, (x,), grad_fn)


# -- softmax ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax received non-finite input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), grad_fn)


# -- batch normalisation -------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the running statistics tensors are refreshed (their
    ``data`` is replaced, never written into) with the batch moments.
    """
    c = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm parameter shape {t.shape} does not match {c} channels")
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    gd = gamma.data.reshape(bshape)
    dt = xd.dtype.type
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1 / np.sqrt(var + dt(eps))
        xhat = xc * inv
        mom = running_mean.dtype.type(momentum)
        running_mean.data = (1 - mom) * running_mean.data + mom * mu.reshape(c).astype(running_mean.dtype)
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_var.data = (1 - mom) * running_var.data + mom * unbiased.astype(running_var.dtype)

        def grad_fn(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (gxhat - s1 / m - xhat * (s2 / m))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1 / np.sqrt(running_var.data.reshape(bshape).astype(xd.dtype) + dt(eps))
        xhat = (xd - running_mean.data.reshape(bshape).astype(xd.dtype)) * inv

        def grad_fn(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return make_result(out, (x, gamma, beta), grad_fn)
