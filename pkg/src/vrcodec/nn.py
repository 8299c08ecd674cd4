"""Parameters, a small module system, and the unconditioned GDN layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .conv import gdn
from .tensor import Tensor, take, square, add

GDN_FLOOR = 2.0**-10


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own Adam moments."""

    __slots__ = ("adam",)

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype if dtype is not None else np.float32), requires_grad=True)
        self.adam = AdamState(np.zeros_like(self.data), np.zeros_like(self.data))

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value)
        if value.shape != self.shape:
            raise ValueError(f"shape mismatch assigning {value.shape} into {self.shape}")
        self.data = value.astype(self.dtype, copy=True)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.adam.m = self.adam.m.astype(dtype)
        self.adam.v = self.adam.v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


class Module:
    """Attribute-traversing container, in the spirit of ``torch.nn.Module``."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            unexpected = state.keys() - own.keys()
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in own:
                own[name].assign(value)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GDN(Module):
    """GDN/IGDN with squared-plus-floor reparameterization.

    Effective ``beta = beta_raw**2 + 2**-10`` and ``gamma = gamma_raw**2``, so
    positivity holds for any raw value.  With ``n_lambdas`` set, beta comes
    from a per-lambda bank selected by the one-hot conditioning rows.
    """

    def __init__(self, channels: int, inverse: bool = False, n_lambdas: int | None = None):
        self.channels = channels
        self.inverse = inverse
        self.n_lambdas = n_lambdas
        beta0 = np.sqrt(1.0 - GDN_FLOOR)
        if n_lambdas is None:
            self.beta = Parameter(np.full(channels, beta0))
        else:
            self.beta = Parameter(np.full((n_lambdas, channels), beta0))
        self.gamma = Parameter(np.sqrt(0.1) * np.eye(channels))

    def effective_beta(self, onehot: np.ndarray | None = None) -> Tensor:
        beta = add(square(self.beta), GDN_FLOOR)
        if self.n_lambdas is None:
            return beta
        return take(beta, np.argmax(onehot, axis=1), axis=0)

    def forward(self, x: Tensor, onehot: np.ndarray | None = None) -> Tensor:
        return gdn(x, self.effective_beta(onehot), square(self.gamma), inverse=self.inverse)
