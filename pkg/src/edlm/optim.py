"""Adam optimizer with bias correction and optional decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerHyper:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigError("epsilon must be positive and weight_decay non-negative")


@dataclass
class AdamState:
    first_moment: list[Tensor]
    second_moment: list[Tensor]
    step_count: int = 0

    @classmethod
    def init(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            first_moment=[Tensor(np.zeros_like(p.data)) for p in params],
            second_moment=[Tensor(np.zeros_like(p.data)) for p in params],
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | Tensor],
    state: AdamState,
    hyper: OptimizerHyper,
    lr_override: float | None = None,
) -> tuple[list[Tensor], AdamState]:
    """One Adam update, in place on `params`. `lr_override` serves warmup schedules."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and state must have the same length")
    lr = hyper.learning_rate if lr_override is None else lr_override
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        garr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.data.dtype)
        if garr.shape != p.data.shape:
            raise ShapeError(f"gradient shape {garr.shape} != parameter shape {p.data.shape}")
        if m.data.shape != p.data.shape:
            raise ShapeError("optimizer state shape does not match its parameter")
        m.data[...] = hyper.beta1 * m.data + (1.0 - hyper.beta1) * garr
        v.data[...] = hyper.beta2 * v.data + (1.0 - hyper.beta2) * garr * garr
        update = lr * (m.data / bc1) / (np.sqrt(v.data / bc2) + hyper.epsilon)
        if hyper.weight_decay > 0.0:
            update = update + lr * hyper.weight_decay * p.data
        p.data[...] = p.data - update
    return params, state
