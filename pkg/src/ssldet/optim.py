"""SGD with momentum and weight decay, plus cosine-annealed learning rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import NonFiniteError, ParamStore


@dataclass(frozen=True)
class OptimConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    eta_min: float = 0.0
    decoupled_decay: bool = False

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive: {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1): {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0: {self.weight_decay}")
        if not 0.0 <= self.eta_min <= self.lr:
            raise ValueError(f"need 0 <= eta_min <= lr: {self.eta_min}")


@dataclass
class OptimState:
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    total_steps: int = 0


def cosine_lr(t: int, total_steps: int, eta_max: float, eta_min: float = 0.0) -> float:
    """eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive: {total_steps}")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / total_steps))


def sgd_step(params: ParamStore, state: OptimState, cfg: OptimConfig, lr: float | None = None) -> None:
    """One momentum-SGD update; gradients are consumed and zeroed.

    Weight decay is added to the gradient (classical L2 coupling) unless
    cfg.decoupled_decay, in which case weights shrink by lr*decay directly.
    """
    eta = cfg.lr if lr is None else lr
    for name, p in params.items():
        g = p.grad
        if cfg.weight_decay > 0.0 and not cfg.decoupled_decay:
            g = g + cfg.weight_decay * p.value
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.value)
            state.velocities[name] = v
        v *= cfg.momentum
        v += g
        if cfg.decoupled_decay and cfg.weight_decay > 0.0:
            p.value *= 1.0 - eta * cfg.weight_decay
        p.value -= eta * v
        if not np.all(np.isfinite(p.value)):
            raise NonFiniteError(f"non-finite update for parameter {name!r}")
        p.grad[...] = 0.0
    state.t += 1
