"""Convolution family: plain, transposed, masked, and GDN/IGDN.

Convolutions go through an im2col matrix product.  Kernels are laid out as
``(out_ch, in_ch, kh, kw)`` for :func:`conv2d` and ``(in_ch, out_ch, kh, kw)``
for :func:`conv_transpose2d`, so one array serves as a matched adjoint pair.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _result, add, as_tensor, mul, sqrt, square, div

MASK_TYPES = ("A", "B")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = shape[:2]
    cols = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with symmetric zero padding."""
    x = as_tensor(x)
    kernel = as_tensor(kernel, x)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ValueError(f"kernel expects {ic} input channels, input has {c}")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(oc, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, oc).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias, x)
        out = out + bias.data.reshape(1, oc, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gx = gk = None
        if x.requires_grad:
            gp = _col2im(gm @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gp[:, :, padding : padding + h, padding : padding + w] if padding else gp
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(kernel.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward)


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` ("deconvolution").

    Output extent is ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0 or not 0 <= output_padding < stride:
        raise ValueError("invalid padding/output_padding")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    ic, oc, kh, kw = kernel.shape
    if ic != c:
        raise ValueError(f"kernel expects {ic} input channels, input has {c}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise ValueError("transposed convolution output would be empty")
    full_h = max((h - 1) * stride + kh, padding + ho)
    full_w = max((w - 1) * stride + kw, padding + wo)

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = kernel.data.reshape(ic, -1)
    full = _col2im(xm @ wmat, (b, oc, full_h, full_w), kh, kw, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias, x)
        out = out + bias.data.reshape(1, oc, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((b, oc, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        cols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gk = None
        if x.requires_grad:
            gx = (cols @ wmat.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gk = (xm.T @ cols).reshape(kernel.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward)


def causal_mask(kh: int, kw: int, mask_type: str = "A") -> np.ndarray:
    """Spatial raster-order mask: 1 on taps preceding the center (type A),
    or preceding-or-equal (type B)."""
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"masked convolution needs odd kernel extents, got {kh}x{kw}")
    if mask_type not in MASK_TYPES:
        raise ValueError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
    mask = np.zeros((kh, kw))
    center = (kh // 2) * kw + kw // 2
    flat = mask.reshape(-1)
    flat[: center + (mask_type == "B")] = 1.0
    return mask


def masked_conv2d(
    x: Tensor, kernel: Tensor, mask_type: str = "A", bias: Tensor | None = None
) -> Tensor:
    """Same-size convolution whose output at a site only sees raster predecessors."""
    kernel = as_tensor(kernel, as_tensor(x))
    kh, kw = kernel.shape[2:]
    mask = causal_mask(kh, kw, mask_type).astype(kernel.dtype)
    return conv2d(x, mul(kernel, mask), bias, stride=1, padding=kh // 2)


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization.

    ``y_j = x_j / sqrt(beta_j + sum_i gamma_ji x_i^2)``; the inverse variant
    multiplies by the same factor.  ``beta`` may be per-channel ``(C,)`` or
    per-sample ``(B, C)``; ``gamma`` is ``(C, C)``.
    """
    x = as_tensor(x)
    beta = as_tensor(beta, x)
    gamma = as_tensor(gamma, x)
    if np.any(beta.data <= 0):
        raise ValueError("GDN requires strictly positive effective beta")
    c = x.shape[1]
    if gamma.shape != (c, c):
        raise ValueError(f"gamma must be {(c, c)}, got {gamma.shape}")
    pool = conv2d(square(x), gamma.reshape(c, c, 1, 1))
    shift = beta.reshape(1, c, 1, 1) if beta.ndim == 1 else beta.reshape(beta.shape[0], c, 1, 1)
    norm = sqrt(add(pool, shift))
    return mul(x, norm) if inverse else div(x, norm)
