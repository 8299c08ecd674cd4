"""Deterministic and universal (dithered) quantization, and bin-size mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, as_tensor, straight_through


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero (same rule on every code path)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _delta_array(delta, like: np.ndarray) -> np.ndarray:
    d = np.asarray(delta, dtype=like.dtype)
    if np.any(d <= 0):
        raise ValueError(f"bin size must be positive, got {delta}")
    if d.ndim == 1 and like.ndim > 1:
        d = d.reshape((-1,) + (1,) * (like.ndim - 1))
    return d


def quantize_symbols(x, delta) -> np.ndarray:
    """Integer bin indices round(x / delta)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    return round_half_away(x / _delta_array(delta, x)).astype(np.int64)


def round_delta(x, delta):
    """delta * round(x / delta), elementwise.

    Accepts arrays or tensors; a tensor result carries no gradient.
    """
    if isinstance(x, Tensor):
        return Tensor(round_delta(x.data, delta))
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    d = _delta_array(delta, x)
    return (round_half_away(x / d) * d).astype(x.dtype)


def universal_quantize(x: Tensor, delta, rng: np.random.Generator) -> tuple[Tensor, np.ndarray | float]:
    """Dithered quantization ``z = round_delta(x + u) - u`` with one shared ``u``.

    A scalar ``delta`` draws one scalar ``u ~ U[-delta/2, delta/2]`` for the
    whole tensor.  A per-sample ``delta`` of shape ``(B,)`` draws one ``u`` per
    batch element.  The backward pass is the identity.
    """
    x = as_tensor(x)
    d = _delta_array(delta, x.data)
    if np.ndim(delta) == 0:
        u = float(rng.uniform(-0.5, 0.5)) * float(delta)
        u_arr = np.asarray(u, dtype=x.dtype)
    else:
        u = rng.uniform(-0.5, 0.5, size=np.shape(delta)) * np.asarray(delta, dtype=np.float64)
        u_arr = u.astype(x.dtype).reshape(d.shape)
    z = round_half_away((x.data + u_arr) / d) * d - u_arr
    return straight_through(x, z.astype(x.dtype)), u


def additive_noise(x: Tensor, delta, rng: np.random.Generator) -> Tensor:
    """Independent uniform noise per element (the classic training relaxation)."""
    x = as_tensor(x)
    d = _delta_array(delta, x.data)
    noise = (rng.uniform(-0.5, 0.5, size=x.shape) * d).astype(x.dtype)
    return add(x, noise)


@dataclass(frozen=True)
class BinMixingPolicy:
    """Delta = base ** b with b ~ U[exponent_low, exponent_high]."""

    exponent_low: float = -1.0
    exponent_high: float = 1.0
    base: float = 2.0

    def __post_init__(self):
        if self.exponent_low > self.exponent_high:
            raise ValueError("exponent_low must not exceed exponent_high")
        if self.base <= 0:
            raise ValueError("base must be positive")

    @classmethod
    def fixed(cls) -> "BinMixingPolicy":
        return cls(0.0, 0.0)

    @property
    def delta_range(self) -> tuple[float, float]:
        return self.base**self.exponent_low, self.base**self.exponent_high


def sample_bin_size(policy: BinMixingPolicy, rng: np.random.Generator) -> float:
    if policy.exponent_low == policy.exponent_high:
        return float(policy.base**policy.exponent_low)
    return float(policy.base ** rng.uniform(policy.exponent_low, policy.exponent_high))
