"""Probability models for the latents and their bridge to the range coder.

Both latents are coded symbol-by-symbol with probabilities that integrate a
density over the quantization bin ``[v - delta/2, v + delta/2]``:

* z: Gaussian with autoregressive mean/scale (see :mod:`vrcodec.model`);
* w: a learned per-channel monotone CDF, one parameter bank per lambda.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .nn import Module, Parameter
from .rangecoder import TOTAL, CdfTable
from .tensor import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    log2,
    matmul,
    mul,
    ndtr,
    neg,
    sigmoid,
    softplus,
    sub,
    tabs,
    tanh,
    take,
    tsum,
)

P_FLOOR = 2.0**-16
SIGMA_FLOOR = 1e-3
GAUSSIAN_SPAN = 8.0
TAIL_QUANTILE = 1e-6
MAX_ALPHABET = 1 << 15
ESCAPE_BITS = 16


@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor


def _delta_like(delta, x: Tensor):
    d = np.asarray(delta, dtype=x.dtype)
    if d.ndim == 1 and x.ndim > 1:
        d = d.reshape((-1,) + (1,) * (x.ndim - 1))
    return d


def gaussian_bin_prob(z, mu, sigma, delta, floor: float | None = P_FLOOR) -> Tensor:
    """Mass of N(mu, sigma^2) on the bin of width ``delta`` centred at ``z``.

    Evaluated on the side of the mean that keeps both CDF arguments
    non-positive, which avoids cancellation in the tails.
    """
    z = as_tensor(z)
    mu, sigma = as_tensor(mu, z), as_tensor(sigma, z)
    half = 0.5 * _delta_like(delta, z)
    dist = tabs(sub(z, mu))
    upper = ndtr(sub(half, dist) / sigma)
    lower = ndtr(neg(add(dist, half)) / sigma)
    p = sub(upper, lower)
    return clamp_min(p, floor) if floor else p


def gaussian_bin_prob_np(z, mu, sigma, delta) -> np.ndarray:
    """Float64 evaluation of :func:`gaussian_bin_prob` without the floor."""
    z, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (z, mu, sigma))
    half = 0.5 * np.asarray(delta, dtype=np.float64)
    dist = np.abs(z - mu)
    return special.ndtr((half - dist) / sigma) - special.ndtr(-(dist + half) / sigma)


def bits(probs: Tensor, axis=None) -> Tensor:
    """Code length -sum(log2 p) in bits."""
    return neg(tsum(log2(probs), axis=axis))


class FactorizedDensity(Module):
    """Per-channel learned CDF built from monotone affine + nonlinearity stages.

    Each stage is ``h <- softplus(H) h + b`` followed (except the last) by
    ``h <- h + tanh(a) * tanh(h)``.  Positive matrices and ``tanh(a) > -1``
    keep every stage increasing, so ``sigmoid(logits(x))`` is a CDF.  Biases
    start at zero, which makes the initial logit map odd and the density
    symmetric about 0.
    """

    def __init__(self, channels: int, n_lambdas: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0):
        self.channels = channels
        self.n_lambdas = n_lambdas
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices, self.biases, self.factors = [], [], []
        for k in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[k + 1]))
            self.matrices.append(Parameter(np.full((n_lambdas, channels, dims[k + 1], dims[k]), init)))
            self.biases.append(Parameter(np.zeros((n_lambdas, channels, dims[k + 1], 1))))
            if k < len(self.filters):
                self.factors.append(Parameter(np.zeros((n_lambdas, channels, dims[k + 1], 1))))

    def logits(self, x: Tensor, lambda_index) -> Tensor:
        """``x``: ``(B, C, N)`` values; ``lambda_index``: ``(B,)``. Returns ``(B, C, N)``."""
        x = as_tensor(x)
        idx = np.asarray(lambda_index, dtype=np.intp).reshape(-1)
        b, c, n = x.shape
        h = x.reshape(b, c, 1, n)
        for k, (m, bias) in enumerate(zip(self.matrices, self.biases)):
            h = add(matmul(softplus(take(m, idx, axis=0)), h), take(bias, idx, axis=0))
            if k < len(self.factors):
                h = add(h, mul(tanh(take(self.factors[k], idx, axis=0)), tanh(h)))
        return h.reshape(b, c, n)

    def cdf(self, x: Tensor, lambda_index) -> Tensor:
        return sigmoid(self.logits(x, lambda_index))

    def bin_prob(self, w, lambda_index, delta, floor: float | None = P_FLOOR) -> Tensor:
        """Bin masses for ``w`` of shape ``(B, C, H, W)``; ``delta`` scalar or ``(B,)``."""
        w = as_tensor(w)
        b, c = w.shape[:2]
        flat = w.reshape(b, c, -1)
        half = 0.5 * _delta_like(delta, flat)
        n = flat.shape[2]
        both = self.logits(concat([sub(flat, half), add(flat, half)], axis=2), lambda_index)
        lower, upper = both[:, :, :n], both[:, :, n:]
        # evaluate in the tail where the sigmoid is small
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0).astype(w.dtype)
        p = tabs(sub(sigmoid(mul(upper, sign)), sigmoid(mul(lower, sign))))
        p = p.reshape(w.shape)
        return clamp_min(p, floor) if floor else p

    # -- inference helpers (no graph) ---------------------------------------
    def cdf_np(self, x: np.ndarray, lambda_index: int) -> np.ndarray:
        """CDF for every channel at the points ``x`` of shape ``(C, N)``."""
        x = np.asarray(x, dtype=np.float64)
        lam = int(lambda_index)
        h = x[:, None, :]
        for k, (m, bias) in enumerate(zip(self.matrices, self.biases)):
            h = np.logaddexp(0.0, m.data[lam].astype(np.float64)) @ h + bias.data[lam]
            if k < len(self.factors):
                h = h + np.tanh(self.factors[k].data[lam].astype(np.float64)) * np.tanh(h)
        return special.expit(h[:, 0, :])

    def quantiles(self, lambda_index: int, q: float = TAIL_QUANTILE, iters: int = 60) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel values where the CDF equals ``q`` and ``1 - q`` (bisection)."""
        out = []
        for target in (q, 1.0 - q):
            lo = np.full((self.channels, 1), -1.0)
            hi = np.full((self.channels, 1), 1.0)
            while np.any(self.cdf_np(lo, lambda_index) > target):
                lo = np.where(self.cdf_np(lo, lambda_index) > target, lo * 2, lo)
            while np.any(self.cdf_np(hi, lambda_index) < target):
                hi = np.where(self.cdf_np(hi, lambda_index) < target, hi * 2, hi)
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                below = self.cdf_np(mid, lambda_index) < target
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            out.append(0.5 * (lo + hi)[:, 0])
        return out[0], out[1]


# -- CDF tables --------------------------------------------------------------------


def quantize_pmf(probs: np.ndarray) -> np.ndarray:
    """Integer counts summing to 2**16 with every symbol at least 1.

    Rows of a 2-D array are independent alphabets; entries that are NaN mark
    padding and receive count 0.  Rounding slack goes to each row's most
    probable symbol.  Only elementwise float math is used, so a row's counts
    do not depend on which other rows share the batch.
    """
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == 1
    p = np.atleast_2d(probs)
    valid = ~np.isnan(p)
    n = valid.sum(axis=1)
    if np.any(n > MAX_ALPHABET):
        raise ValueError(f"alphabet of {int(n.max())} symbols exceeds the {MAX_ALPHABET}-symbol limit")
    if np.any(n < 1):
        raise ValueError("every table needs at least one symbol")
    free = (TOTAL - n)[:, None]
    clean = np.where(valid, np.clip(p, 0.0, 1.0), 0.0)
    counts = np.where(valid, 1 + np.floor(clean * free), 0).astype(np.int64)
    slack = TOTAL - counts.sum(axis=1)
    top = np.argmax(np.where(valid, clean, -1.0), axis=1)
    counts[np.arange(len(p)), top] += slack
    if np.any(counts[valid] < 1):
        raise AssertionError("table quantization produced an empty symbol")
    return counts[0] if squeeze else counts


def build_cdf_table(probs: Sequence[float], symbol_offset: int = 0) -> CdfTable:
    """Quantize a probability vector over a contiguous alphabet into a CdfTable."""
    counts = quantize_pmf(np.asarray(probs, dtype=np.float64))
    return CdfTable(tuple(np.concatenate([[0], np.cumsum(counts)]).tolist()), symbol_offset)


@dataclass
class SymbolTables:
    """A batch of CDF tables, one per coded element, each ending in an escape.

    ``cumulative[i, :counts_len[i] + 1]`` is element i's table; symbol
    ``offset[i] + j`` maps to column j and the last column is the escape.
    """

    cumulative: np.ndarray
    offset: np.ndarray
    size: np.ndarray  # alphabet length excluding the escape

    def __len__(self) -> int:
        return len(self.offset)

    def row(self, i: int) -> np.ndarray:
        return self.cumulative[i, : self.size[i] + 2]

    def table(self, i: int) -> CdfTable:
        return CdfTable(tuple(self.row(i).tolist()), int(self.offset[i]))


def _tables_from_masses(masses: np.ndarray, tails: np.ndarray, offset: np.ndarray, size: np.ndarray) -> SymbolTables:
    width = masses.shape[1]
    cols = np.arange(width + 1)[None, :]
    probs = np.full((len(offset), width + 1), np.nan)
    probs[:, :width] = np.where(cols[:, :width] < size[:, None], masses, np.nan)
    probs[np.arange(len(offset)), size] = tails
    counts = quantize_pmf(probs)
    cumulative = np.zeros((len(offset), width + 2), dtype=np.int64)
    cumulative[:, 1:] = np.cumsum(counts, axis=1)
    # padding columns repeat the total so searchsorted never lands there
    return SymbolTables(cumulative, offset.astype(np.int64), size.astype(np.int64))


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray, delta: float, span: float = GAUSSIAN_SPAN) -> SymbolTables:
    """Tables over symbols covering ``mu +- span*sigma`` (in bin units) plus escape.

    This is the decoder's per-position hot path, so the quantization of
    :func:`quantize_pmf` is inlined here with the same elementwise rules.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    delta = float(delta)
    half_cap = (MAX_ALPHABET - 2) // 2
    centre = np.round(mu / delta)
    lo = np.maximum(np.floor((mu - span * sigma) / delta), centre - half_cap)
    hi = np.minimum(np.ceil((mu + span * sigma) / delta), centre + half_cap)
    size = (hi - lo).astype(np.int64) + 1
    width = int(size.max())
    cols = np.arange(width + 2)
    # edge j is the lower edge of symbol lo + j, in standard units
    edges = ((lo[:, None] + cols - 0.5) * delta - mu[:, None]) / sigma[:, None]
    # one tail evaluation per edge; each bin is formed on its own side of the mean
    tail = special.ndtr(-np.abs(edges))
    neg = edges < 0
    lower_cdf = np.where(neg, tail, 1.0 - tail)
    upper_sf = np.where(neg, 1.0 - tail, tail)
    right = (edges[:, :-1] + edges[:, 1:]) > 0
    probs = np.where(right, upper_sf[:, :-1] - upper_sf[:, 1:], lower_cdf[:, 1:] - lower_cdf[:, :-1])
    rows = np.arange(len(mu))
    probs[rows, size] = lower_cdf[:, 0] + upper_sf[rows, size]  # escape takes both tails
    valid = cols[None, :-1] <= size[:, None]
    free = (TOTAL - size - 1)[:, None]
    counts = np.where(valid, 1 + np.floor(np.clip(probs, 0.0, 1.0) * free), 0).astype(np.int64)
    top = np.argmax(np.where(valid, probs, -1.0), axis=1)
    counts[rows, top] += TOTAL - counts.sum(axis=1)
    cumulative = np.zeros((len(mu), width + 2), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cumulative[:, 1:])
    return SymbolTables(cumulative, lo.astype(np.int64), size)


def factorized_tables(density: FactorizedDensity, lambda_index: int, delta: float) -> SymbolTables:
    """One table per w channel covering the density's [1e-6, 1 - 1e-6] quantiles."""
    delta = float(delta)
    q_lo, q_hi = density.quantiles(lambda_index)
    half_cap = (MAX_ALPHABET - 2) // 2
    lo = np.floor(q_lo / delta).astype(np.int64)
    hi = np.ceil(q_hi / delta).astype(np.int64)
    hi = np.minimum(hi, lo + 2 * half_cap)
    size = hi - lo + 1
    width = int(size.max())
    k = lo[:, None] + np.arange(width)[None, :]
    upper = density.cdf_np(k * delta + 0.5 * delta, lambda_index)
    lower = density.cdf_np(k * delta - 0.5 * delta, lambda_index)
    masses = upper - lower
    below = density.cdf_np(((lo - 0.5) * delta)[:, None], lambda_index)[:, 0]
    above = 1.0 - density.cdf_np(((hi + 0.5) * delta)[:, None], lambda_index)[:, 0]
    return _tables_from_masses(masses, below + above, lo, size)
