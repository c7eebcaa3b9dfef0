"""Tensor kernels: dilated/strided convolution, transposed convolution,
ReLU, and per-plane normalization, each with an exact reverse-mode twin.

Tensors are numpy arrays in (batch, channels, height, width) layout.
Convolutions run as im2col + GEMM: the column matrix is laid out in
(channel, kernel row, kernel col) order and each output element is one
dot product, so results are deterministic run-to-run for a fixed machine
and thread count. Kernels preserve the input dtype (float64 in the
gradient-check harness, float32 in training).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def out_dim(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4D (N, C, H, W), got ndim={x.ndim}")


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """(C·kh·kw, oh·ow) column matrix of one padded sample (C, Hp, Wp)."""
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(c, kh, kw, oh, ow),
        strides=(sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(c * kh * kw, oh * ow)


def _col2im_add(cols: np.ndarray, out: np.ndarray, stride: int, dilation: int) -> None:
    """Scatter-add (C, kh, kw, oh, ow) columns back onto the padded canvas."""
    _, kh, kw, oh, ow = cols.shape
    for u in range(kh):
        ys = slice(u * dilation, u * dilation + stride * (oh - 1) + 1, stride)
        for v in range(kw):
            xs = slice(v * dilation, v * dilation + stride * (ow - 1) + 1, stride)
            out[:, ys, xs] += cols[:, u, v]


def conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding.

    out(n,o,i,j) = bias(o) + sum_{c,u,v} w(o,c,u,v) · x(n,c, i·s−p+u·d, j·s−p+v·d)
    with weights shaped (out_channels, in_channels, kh, kw).
    """
    _check_4d(x, "x")
    n, c, h, width = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"input has {c} channels, kernel expects {c2}")
    oh = out_dim(h, kh, stride, dilation, padding)
    ow = out_dim(width, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output dims {oh}x{ow} for input {h}x{width}")
    wm = w.reshape(o, c * kh * kw)
    y = np.empty((n, o, oh, ow), dtype=x.dtype)
    for i in range(n):
        xp = _pad_hw(x[i], padding)
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
        y[i] = (wm @ cols).reshape(o, oh, ow)
    if bias is not None:
        y += bias.reshape(1, o, 1, 1)
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                    stride: int = 1, dilation: int = 1, padding: int = 0) -> tuple:
    """Reverse-mode of conv2d: (dx, dw, db) for upstream gradient g.

    dw is the correlation of the input with g; dx is the exact adjoint
    scatter back onto the input (valid also where the forward floor-divides
    away border pixels). Batch items accumulate in index order.
    """
    n, c, h, width = x.shape
    o, _, kh, kw = w.shape
    if g.shape[:2] != (n, o):
        raise ValueError(f"upstream gradient shape {g.shape} mismatches {(n, o)}")
    oh, ow = g.shape[2], g.shape[3]
    wm = w.reshape(o, c * kh * kw)
    dw = np.zeros((o, c * kh * kw), dtype=x.dtype)
    dx = np.empty_like(x)
    hp, wp = h + 2 * padding, width + 2 * padding
    for i in range(n):
        xp = _pad_hw(x[i], padding)
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
        gf = g[i].reshape(o, oh * ow)
        dw += gf @ cols.T
        dcols = (wm.T @ gf).reshape(c, kh, kw, oh, ow)
        dxp = np.zeros((c, hp, wp), dtype=x.dtype)
        _col2im_add(dcols, dxp, stride, dilation)
        dx[i] = dxp[:, padding:hp - padding, padding:wp - padding] if padding else dxp
    db = g.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), db


def conv2d_transposed(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                      stride: int = 1, padding: int = 0) -> np.ndarray:
    """Transposed convolution (learnable upsampling), weights (in, out, kh, kw).

    Each input pixel scatters its kernel onto the output; with identical
    (kernel, stride, padding) this is the linear adjoint of conv2d. Output
    spatial dims are (H−1)·stride − 2·padding + k.
    """
    _check_4d(x, "x")
    n, ci, h, width = x.shape
    ci2, co, kh, kw = w.shape
    if ci != ci2:
        raise ValueError(f"input has {ci} channels, kernel expects {ci2}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (width - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output dims {oh}x{ow} for input {h}x{width}")
    hp = (h - 1) * stride + kh  # canvas before padding crop
    wp = (width - 1) * stride + kw
    wm = w.reshape(ci, co * kh * kw)
    y = np.empty((n, co, oh, ow), dtype=x.dtype)
    for i in range(n):
        cols = (wm.T @ x[i].reshape(ci, h * width)).reshape(co, kh, kw, h, width)
        canvas = np.zeros((co, hp, wp), dtype=x.dtype)
        _col2im_add(cols, canvas, stride, 1)
        y[i] = canvas[:, padding:hp - padding, padding:wp - padding] if padding else canvas
    if bias is not None:
        y += bias.reshape(1, co, 1, 1)
    return y


def conv2d_transposed_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                               stride: int = 1, padding: int = 0) -> tuple:
    """Reverse-mode of conv2d_transposed: (dx, dw, db)."""
    n, ci, h, width = x.shape
    _, co, kh, kw = w.shape
    if g.shape[:2] != (n, co):
        raise ValueError(f"upstream gradient shape {g.shape} mismatches {(n, co)}")
    # input gradient gathers: the converse map is a strided conv2d with the
    # same weight array read as (O=in, C=out, kh, kw)
    dx = conv2d(g, w, bias=None, stride=stride, dilation=1, padding=padding)
    dw = np.zeros((ci, co * kh * kw), dtype=x.dtype)
    for i in range(n):
        gp = _pad_hw(g[i], padding)
        gcols = _im2col(gp, kh, kw, stride, 1, h, width)
        dw += x[i].reshape(ci, h * width) @ gcols.T
    db = g.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(pre: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (pre > 0)


def plane_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize each (sample, channel) plane to zero mean, unit variance."""
    _check_4d(x, "x")
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def plane_norm_backward(x: np.ndarray, g: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    g_mean = g.mean(axis=(2, 3), keepdims=True)
    gy_mean = (g * y).mean(axis=(2, 3), keepdims=True)
    return inv * (g - g_mean - y * gy_mean)
