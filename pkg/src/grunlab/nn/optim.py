"""SGD and Adam updates over lists of Tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


def optimizer_step(
    state: OptimizerState,
    params: Sequence[Tensor],
    grads: Mapping[Tensor, np.ndarray],
) -> Sequence[Tensor]:
    """Update ``params`` in place from ``grads`` and advance the step counter."""
    missing = [i for i, p in enumerate(params) if p not in grads]
    if missing:
        raise ContractError(f"optimizer_step: no gradient for parameter(s) {missing}")
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.data -= (lr * grads[p]).astype(p.dtype)
        state.step += 1
        return params

    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = grads[p]
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-5, **kw):
        self.params = list(params)
        self.state = OptimizerState(kind=kind, learning_rate=lr, **kw)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        optimizer_step(self.state, self.params, grads)
