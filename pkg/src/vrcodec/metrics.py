"""PSNR and MS-SSIM on images scaled to [0, 1].

``ms_ssim`` is built from tensor ops so it can serve as a training loss; pass
plain arrays to get a float back.
"""

from __future__ import annotations

import math

import numpy as np

from .conv import conv2d
from .tensor import Tensor, add, as_tensor, clamp_min, div, mean, mul, power, sub

PEAK = 1.0
K1, K2 = 0.01, 0.03
WINDOW = 11
SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# negative structure terms are clipped here; a strictly positive floor keeps x**w differentiable
CS_FLOOR = 1e-12


def psnr(a, b, peak: float = PEAK) -> float:
    """10 log10(peak^2 / MSE); ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def max_scales(height: int, width: int, window: int = WINDOW) -> int:
    """Largest scale count the image supports (0 if even one scale does not fit)."""
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and min(height, width) >= window * 2**n:
        n += 1
    return n


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _blur(x: Tensor, g: np.ndarray) -> Tensor:
    k = len(g)
    h = conv2d(x, g.reshape(1, 1, 1, k).astype(x.dtype))
    return conv2d(h, g.reshape(1, 1, k, 1).astype(x.dtype))


def _downsample(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    x = x[:, :, : h - h % 2, : w - w % 2]
    return mean(x.reshape(n, c, h // 2, 2, w // 2, 2), axis=(3, 5))


def _ssim_terms(x: Tensor, y: Tensor, g: np.ndarray, peak: float) -> tuple[Tensor, Tensor]:
    """Per-(image, channel) luminance and contrast-structure means."""
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    mx, my = _blur(x, g), _blur(y, g)
    mxx, myy, mxy = mul(mx, mx), mul(my, my), mul(mx, my)
    sxx = sub(_blur(mul(x, x), g), mxx)
    syy = sub(_blur(mul(y, y), g), myy)
    sxy = sub(_blur(mul(x, y), g), mxy)
    cs = div(add(mul(sxy, 2.0), c2), add(add(sxx, syy), c2))
    lum = div(add(mul(mxy, 2.0), c1), add(add(mxx, myy), c1))
    return mean(lum, axis=(2, 3)), mean(cs, axis=(2, 3))


def ms_ssim(a, b, scales: int | None = None, peak: float = PEAK, reduce: bool = True):
    """Multi-scale SSIM of ``(C, H, W)`` or ``(B, C, H, W)`` images.

    ``scales=None`` uses as many of the five canonical scales as fit; the
    weights are renormalized to sum to one.  Tensor inputs give a tensor
    (differentiable) result, array inputs a float.  With ``reduce=False``
    the per-image values are returned.
    """
    plain = not isinstance(a, Tensor) and not isinstance(b, Tensor)
    if plain:
        a = Tensor(np.asarray(a, dtype=np.float64))
        b = Tensor(np.asarray(b, dtype=np.float64))
    like = a if isinstance(a, Tensor) else b
    x, y = as_tensor(a, like), as_tensor(b, like)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x.reshape((1,) + x.shape), y.reshape((1,) + y.shape)
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W) images, got {x.shape}")
    n, c, h, w = x.shape
    available = max_scales(h, w)
    if scales is None:
        scales = available
    if scales < 1 or scales > len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    if scales > available:
        raise ValueError(
            f"{h}x{w} image too small for {scales} scales (needs min side >= {WINDOW * 2 ** (scales - 1)})"
        )
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    g = gaussian_window()
    x, y = x.reshape(n * c, 1, h, w), y.reshape(n * c, 1, h, w)
    value = None
    for s in range(scales):
        lum, cs = _ssim_terms(x, y, g, peak)
        term = power(clamp_min(cs, CS_FLOOR), float(weights[s]))
        if s == scales - 1:
            term = mul(term, power(clamp_min(lum, CS_FLOOR), float(weights[s])))
        value = term if value is None else mul(value, term)
        if s < scales - 1:
            x, y = _downsample(x), _downsample(y)
    per_image = mean(value.reshape(n, c), axis=1)
    out = mean(per_image) if reduce else per_image
    if plain:
        return float(out.data) if reduce else out.data.copy()
    return out
