"""Convolution / pooling primitives with hand-derived backward passes.

Everything operates on batched arrays (N, C, H, W); the public single-sample
wrappers at the bottom expose the (C, H, W) signatures used elsewhere. All
spatial ops use SAME padding at stride 1 (zeros for convolutions, -inf for
max pooling) so spatial dims are preserved.

Convolutions are cross-correlations evaluated by shift-and-accumulate over
the k x k offsets: each offset is one contiguous-slice multiply (depthwise)
or one batched matmul over channels (dense/pointwise), which keeps the hot
loop inside BLAS / vectorized numpy without materializing im2col buffers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check_odd(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")


def pad_same(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * p, w + 2 * p), value, dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


# ------------------------------------------------------------- dense conv2d


def conv2d_forward(x, w, b=None):
    """x (N,C,H,W), w (K,C,k,k) -> out (N,K,H,W) plus the padded-input cache."""
    n, c, h, wd = x.shape
    k_out, c_w, k, k2 = w.shape
    _check_odd(k)
    if k != k2:
        raise ValueError(f"filters must be square, got {k}x{k2}")
    if c_w != c:
        raise ValueError(f"filter channels {c_w} != input channels {c}")
    p = k // 2
    xp = pad_same(x, p)
    out = np.zeros((n, k_out, h, wd), dtype=x.dtype)
    hw = h * wd
    for u in range(k):
        for v in range(k):
            sl = xp[:, :, u : u + h, v : v + wd].reshape(n, c, hw)
            out += np.matmul(w[:, :, u, v], sl).reshape(n, k_out, h, wd)
    if b is not None:
        out += np.asarray(b, dtype=x.dtype)[None, :, None, None]
    return out, xp


def conv2d_backward(g, xp, w):
    """Gradients of dense conv. Returns (dx, dw, db)."""
    n, k_out, h, wd = g.shape
    k = w.shape[2]
    c = w.shape[1]
    hw = h * wd
    g2 = g.reshape(n, k_out, hw)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for u in range(k):
        for v in range(k):
            sl = xp[:, :, u : u + h, v : v + wd].reshape(n, c, hw)
            dw[:, :, u, v] = np.matmul(g2, sl.transpose(0, 2, 1)).sum(axis=0)
            dxp[:, :, u : u + h, v : v + wd] += np.matmul(
                w[:, :, u, v].T, g2
            ).reshape(n, c, h, wd)
    p = k // 2
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


# --------------------------------------------------------------- depthwise


def depthwise_forward(x, wd):
    """Per-channel spatial conv. x (N,C,H,W), wd (C,k,k) -> (N,C,H,W), cache."""
    n, c, h, w = x.shape
    c_w, k, k2 = wd.shape
    _check_odd(k)
    if k != k2:
        raise ValueError(f"depthwise filters must be square, got {k}x{k2}")
    if c_w != c:
        raise ValueError(f"depthwise channels {c_w} != input channels {c}")
    p = k // 2
    xp = pad_same(x, p)
    out = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            out += xp[:, :, u : u + h, v : v + w] * wd[:, u, v][None, :, None, None]
    return out, xp


def depthwise_backward(g, xp, wd):
    n, c, h, w = g.shape
    k = wd.shape[1]
    dxp = np.zeros_like(xp)
    dwd = np.zeros_like(wd)
    for u in range(k):
        for v in range(k):
            sl = xp[:, :, u : u + h, v : v + w]
            dwd[:, u, v] = (g * sl).sum(axis=(0, 2, 3))
            dxp[:, :, u : u + h, v : v + w] += g * wd[:, u, v][None, :, None, None]
    p = k // 2
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return dx, dwd


# --------------------------------------------------------------- pointwise


def pointwise_forward(x, w, b=None):
    """1x1 conv over channels: x (N,C,H,W), w (K,C) -> (N,K,H,W)."""
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"pointwise channels {w.shape[1]} != input channels {c}")
    out = np.matmul(w, x.reshape(n, c, h * wd)).reshape(n, w.shape[0], h, wd)
    if b is not None:
        out += np.asarray(b, dtype=x.dtype)[None, :, None, None]
    return out


def pointwise_backward(g, x, w):
    n, k_out, h, wd = g.shape
    c = x.shape[1]
    hw = h * wd
    g2 = g.reshape(n, k_out, hw)
    x2 = x.reshape(n, c, hw)
    dw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
    db = g.sum(axis=(0, 2, 3))
    dx = np.matmul(w.T, g2).reshape(n, c, h, wd)
    return dx, dw, db


# ------------------------------------------------------------------ maxpool


def maxpool3x3_forward(x):
    """3x3 SAME max pool, -inf padding. Returns (out, argmax cache).

    Ties resolve to the first occurrence in row-major window order, so the
    backward scatter is deterministic.
    """
    n, c, h, w = x.shape
    xp = pad_same(x, 1, value=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3)).reshape(n, c, h, w, 9)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    return out, am


def maxpool3x3_backward(g, am):
    n, c, h, w = g.shape
    hp, wp = h + 2, w + 2
    u = am // 3
    v = am % 3
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    ii = np.arange(h)[None, None, :, None]
    jj = np.arange(w)[None, None, None, :]
    lin = ((nn * c + cc) * hp + (ii + u)) * wp + (jj + v)
    dxp = np.zeros(n * c * hp * wp, dtype=g.dtype)
    np.add.at(dxp, lin.ravel(), g.ravel())
    return dxp.reshape(n, c, hp, wp)[:, :, 1 : 1 + h, 1 : 1 + w]


class MaxPool3x3:
    """Stateful wrapper caching the argmax for the backward pass."""

    def __init__(self):
        self._am = None

    def forward(self, x):
        out, self._am = maxpool3x3_forward(np.asarray(x))
        return out

    def backward(self, g):
        if self._am is None:
            raise RuntimeError("backward called before forward")
        return maxpool3x3_backward(np.asarray(g), self._am)


# ------------------------------------------------- single-sample public ops


def conv2d(x, w, b=None):
    """Dense SAME convolution on one sample: (C,H,W) x (K,C,k,k) -> (K,H,W)."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"expected (C,H,W) and (K,C,k,k), got {x.shape}, {w.shape}")
    out, _ = conv2d_forward(x[None], w, b)
    return out[0]


def sepconv(x, depthwise, pointwise, bias=None):
    """Depthwise-separable SAME convolution on one sample.

    Accepts depthwise as (C,k,k) or (C,1,k,k) and pointwise as (K,C) or
    (K,C,1,1).
    """
    x = np.asarray(x)
    dw = np.asarray(depthwise)
    pw = np.asarray(pointwise)
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W) input, got {x.shape}")
    c = x.shape[0]
    if dw.ndim == 4:
        if dw.shape[1] != 1:
            raise ValueError(f"depthwise (C,1,k,k) expected, got {dw.shape}")
        dw = dw.reshape(dw.shape[0], dw.shape[2], dw.shape[3])
    if pw.ndim == 4:
        if pw.shape[2:] != (1, 1):
            raise ValueError(f"pointwise (K,C,1,1) expected, got {pw.shape}")
        pw = pw.reshape(pw.shape[0], pw.shape[1])
    if dw.shape[0] != c or pw.shape[1] != c:
        raise ValueError(
            f"channel mismatch: input {c}, depthwise {dw.shape[0]}, "
            f"pointwise {pw.shape[1]}"
        )
    mid, _ = depthwise_forward(x[None], dw)
    return pointwise_forward(mid, pw, bias)[0]


def maxpool3x3(x):
    """3x3 SAME max pool on one sample (C,H,W)."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W) input, got {x.shape}")
    out, _ = maxpool3x3_forward(x[None])
    return out[0]
