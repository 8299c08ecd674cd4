"""Adam with a step-indexed learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # (step, learning_rate) pairs; the rate switches once the step is reached
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.schedule = [(int(s), float(lr)) for s, lr in self.schedule]
        steps = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        if any(lr <= 0 for _, lr in self.schedule):
            raise ValueError("scheduled learning rates must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.learning_rate
        for boundary, value in self.schedule:
            if step >= boundary:
                lr = value
        return lr


def adam_step(params: Iterable[Parameter], config: OptimizerConfig, step: int | None = None) -> float:
    """Apply one bias-corrected Adam update to every parameter.

    Coordinates whose gradient is exactly zero are left unchanged, so a zero
    gradient is a fixed point even with momentum built up; this keeps the
    rows of lambda-indexed parameter banks that a batch did not touch.

    ``step`` selects the scheduled learning rate (defaults to the first
    parameter's own counter).  All gradients are validated before any
    parameter is touched, so a NaN aborts the whole step.  Returns the rate used.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter #{i} {p.shape} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter #{i} {p.shape}; step aborted")
    if step is None:
        step = params[0].adam.step if params else 0
    lr = config.lr_at(step)
    b1, b2 = config.beta1, config.beta2
    for p in params:
        st = p.adam
        g = p.grad
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * g * g
        m_hat = st.m / (1 - b1**st.step)
        v_hat = st.v / (1 - b2**st.step)
        # entries with an exactly zero gradient hold still (moments still decay)
        update = np.where(g != 0, lr * m_hat / (np.sqrt(v_hat) + config.epsilon), 0.0)
        p.data = (p.data - update).astype(p.dtype)
        st.m = st.m.astype(p.dtype)
        st.v = st.v.astype(p.dtype)
    return lr
