"""SGD and Adam parameter updates."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteError, ValidationError
from .nn import Param

log = logging.getLogger("utivad.optim")

OPTIMIZERS = ("sgd", "adam")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    """Optimizer kind, learning rate and per-parameter moments keyed by name."""

    kind: str
    learning_rate: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.step < 0:
            raise ValidationError("step counter must be non-negative")


def optimizer_step(params: list[Param], state: OptimizerState) -> None:
    """Apply one update in place using each parameter's accumulated gradient.

    Every gradient is checked before anything is modified, so a
    non-finite gradient leaves the parameters untouched.
    """
    for p in params:
        if p.grad.shape != p.value.shape:
            raise DimensionError(p.name, f"gradient {p.grad.shape} != parameter {p.value.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(p.name, "non-finite gradient")

    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.value -= lr * p.grad
        return

    t = state.step
    correction1 = 1.0 - ADAM_BETA1 ** t
    correction2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        if m.shape != p.value.shape:
            raise DimensionError(p.name, f"moment shape {m.shape} != parameter {p.value.shape}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad * p.grad
        m_hat = m / correction1
        v_hat = v / correction2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
