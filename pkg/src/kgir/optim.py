"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    """Adam over a ``{name: Tensor}`` parameter dict.

    ``lr_multipliers`` maps a name prefix to a factor on the base rate,
    e.g. ``{"text.": 0.1}`` slows every text-encoder parameter tenfold.
    Parameters whose gradient is unset are skipped (update is a no-op).
    """

    params: dict[str, Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_multipliers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.state = {name: AdamState.zeros_like(p.data) for name, p in self.params.items()}

    def _lr_for(self, name: str) -> float:
        factor = 1.0
        for prefix, mult in self.lr_multipliers.items():
            if name.startswith(prefix):
                factor = mult
        return self.lr * factor

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name], self._lr_for(name),
                      self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
