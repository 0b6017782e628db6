"""Adam optimizer on flat parameter vectors."""

from dataclasses import dataclass

import numpy as np

from .params import LayoutError, ParamVector


@dataclass(frozen=True)
class TrainConfig:
    """Local-training hyperparameters shared by all clients."""

    learning_rate: float = 0.01
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 300
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)

    def copy(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), step=self.step)


def adam_step(
    params: ParamVector, gradient: ParamVector, state: AdamState, config: TrainConfig
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if not params.same_layout(gradient):
        raise LayoutError("gradient layout does not match parameters")
    if state.m.size != params.values.size:
        raise LayoutError("optimizer state size does not match parameters")
    g = gradient.values
    t = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new_values = params.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps_adam)
    return ParamVector(new_values, params.layout), AdamState(m=m, v=v, step=t)
