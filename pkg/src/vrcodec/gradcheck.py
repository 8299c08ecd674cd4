"""Central finite differences as an independent oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric, eps: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + eps)


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float, index=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place and restored.  ``index`` restricts the
    probe to a subset of flat positions (the rest of the result stays 0).
    """
    flat = array.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if index is None else index
    for k in positions:
        orig = flat[k]
        flat[k] = orig + step
        up = float(fn())
        flat[k] = orig - step
        down = float(fn())
        flat[k] = orig
        out[k] = (up - down) / (2.0 * step)
    return out.reshape(array.shape)


def finite_difference_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    *,
    upstream: np.ndarray | None = None,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
    eps: float = 1e-8,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` may return any shape; it is reduced against a fixed
    random ``upstream`` cotangent so every output element participates.
    ``max_probes`` samples that many coordinates per input instead of all.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = fn(*inputs)
    if upstream is None:
        upstream = rng.standard_normal(out.shape)
    upstream = np.asarray(upstream, dtype=np.float64)

    for t in inputs:
        t.grad = None
    out.backward(upstream.astype(out.dtype))

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * upstream))

    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        index = None
        if max_probes is not None and t.size > max_probes:
            index = rng.choice(t.size, size=max_probes, replace=False)
        numeric = numeric_gradient(scalar, t.data, step, index)
        if index is None:
            err = relative_error(analytic, numeric, eps)
        else:
            err = relative_error(analytic.reshape(-1)[index], numeric.reshape(-1)[index], eps)
        worst = max(worst, float(np.max(err)) if err.size else 0.0)
    return worst
