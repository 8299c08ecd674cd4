"""Lambda-conditioned convolutions.

A conditional convolution computes ``Y_j = s_j(lam) * sum_i X_i * W_ij + b_j(lam)``
with ``s_j = softplus(u_j . onehot(lam))`` and ``b_j = v_j . onehot(lam)``.
The bin size never reaches these layers; it only affects quantization and
the entropy model's integration width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conv import causal_mask, conv2d, conv_transpose2d
from .nn import Module, Parameter, kaiming_uniform
from .tensor import Tensor, add, matmul, mul, softplus, as_tensor

DEFAULT_LAMBDAS = tuple(10.0**e for e in (-1.5, -2.0, -2.5, -3.0, -3.5))
DELTA_RANGE = (0.5, 2.0)
# softplus^-1(1): conditional scales start at exactly 1
UNIT_SCALE_LOGIT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple[float, ...] = DEFAULT_LAMBDAS

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if not values:
            raise ValueError("lambda grid must not be empty")
        if any(v <= 0 for v in values):
            raise ValueError("lambda values must be positive")
        diffs = np.diff(values)
        if len(values) > 1 and not (np.all(diffs < 0) or np.all(diffs > 0)):
            raise ValueError("lambda grid must be strictly ordered with distinct values")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> float:
        return self.values[index]


@dataclass(frozen=True)
class ConditioningContext:
    lambda_index: int
    delta: float = 1.0

    def validate(self, grid: LambdaGrid, delta_range: tuple[float, float] = DELTA_RANGE) -> "ConditioningContext":
        if not 0 <= self.lambda_index < len(grid):
            raise ValueError(f"lambda_index {self.lambda_index} out of range for |grid|={len(grid)}")
        lo, hi = delta_range
        if not lo <= self.delta <= hi:
            raise ValueError(f"delta {self.delta} outside [{lo}, {hi}]")
        return self


def onehot_lambda(ctx: ConditioningContext | int, grid: LambdaGrid | int) -> np.ndarray:
    """Indicator vector of length |grid| with a 1 at the context's lambda index."""
    index = ctx.lambda_index if isinstance(ctx, ConditioningContext) else int(ctx)
    n = grid if isinstance(grid, int) else len(grid)
    if not 0 <= index < n:
        raise IndexError(f"lambda index {index} out of range for grid of size {n}")
    out = np.zeros(n)
    out[index] = 1.0
    return out


def onehot_rows(indices: Sequence[int], n: int, dtype=np.float32) -> np.ndarray:
    """Stack of one-hot rows, one per batch element."""
    indices = np.asarray(indices, dtype=np.intp).reshape(-1)
    if np.any(indices < 0) or np.any(indices >= n):
        raise IndexError(f"lambda indices {indices.tolist()} out of range for grid of size {n}")
    out = np.zeros((indices.size, n), dtype=dtype)
    out[np.arange(indices.size), indices] = 1
    return out


def cond_scale_bias(u: Tensor, v: Tensor, onehot) -> tuple[Tensor, Tensor]:
    """Per-channel scale and bias for each one-hot row.

    ``u``, ``v`` are ``(|grid|, C)``; ``onehot`` is ``(|grid|,)`` or ``(B, |grid|)``.
    """
    onehot = np.asarray(onehot)
    squeeze = onehot.ndim == 1
    rows = as_tensor(np.atleast_2d(onehot), as_tensor(u))
    scale = softplus(matmul(rows, u))
    bias = matmul(rows, v)
    if squeeze:
        return scale.reshape(-1), bias.reshape(-1)
    return scale, bias


class CondConv2d(Module):
    """Conditional convolution in plain, transposed, or masked flavor."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        n_lambdas: int,
        stride: int = 1,
        padding: int | None = None,
        transposed: bool = False,
        mask_type: str | None = None,
        output_padding: int = 0,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if mask_type is not None and (transposed or stride != 1):
            raise ValueError("masked convolutions are stride-1 and not transposed")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.transposed = transposed
        self.mask_type = mask_type
        self.output_padding = output_padding
        if transposed:
            shape = (in_ch, out_ch, kernel, kernel)
            fan_in = in_ch * kernel * kernel // (stride * stride)
        else:
            shape = (out_ch, in_ch, kernel, kernel)
            fan_in = in_ch * kernel * kernel
        if mask_type is not None:
            self.mask = causal_mask(kernel, kernel, mask_type)
            fan_in = max(1, int(in_ch * self.mask.sum()))
        else:
            self.mask = None
        self.kernel = Parameter(kaiming_uniform(rng, shape, max(fan_in, 1)))
        self.u = Parameter(np.full((n_lambdas, out_ch), UNIT_SCALE_LOGIT))
        self.v = Parameter(np.zeros((n_lambdas, out_ch)))

    def effective_kernel(self) -> Tensor:
        if self.mask is None:
            return self.kernel
        return mul(self.kernel, self.mask.astype(self.kernel.dtype))

    def plain(self, x: Tensor) -> Tensor:
        """The unconditioned convolution sum_i X_i * W_ij."""
        if self.transposed:
            return conv_transpose2d(x, self.kernel, None, self.stride, self.padding, self.output_padding)
        return conv2d(x, self.effective_kernel(), None, self.stride, self.padding)

    def forward(self, x: Tensor, onehot: np.ndarray) -> Tensor:
        y = self.plain(x)
        scale, bias = cond_scale_bias(self.u, self.v, onehot)
        b, c = scale.shape if scale.ndim == 2 else (1, scale.shape[0])
        return add(mul(y, scale.reshape(b, c, 1, 1)), bias.reshape(b, c, 1, 1))
