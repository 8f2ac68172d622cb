"""SGD with momentum/weight decay and the polynomial LR schedule."""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-3
    power: float = 0.9
    total_steps: int = 1500
    batch_size: int = 8

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not self.power > 0:
            raise ValueError(f"power must be positive, got {self.power}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")


def poly_lr(step: int, cfg: OptimConfig) -> float:
    """``base_lr * (1 - step/total_steps) ** power``; clamps to 0 past the end."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.total_steps == 0 or step >= cfg.total_steps:
        if step > cfg.total_steps:
            log.warning("poly_lr: step %d beyond total_steps %d, clamping to 0", step, cfg.total_steps)
        return 0.0
    return cfg.base_lr * (1.0 - step / cfg.total_steps) ** cfg.power


def sgd_step(params, grads, lr, cfg: OptimConfig, velocity, names=None):
    """In-place momentum SGD on parallel lists of arrays.

    velocity <- momentum * velocity + (grad + weight_decay * param)
    param    <- param - lr * velocity
    ``velocity`` is a list of buffers (or ``None`` entries, filled on first use).
    """
    names = names or [f"param{i}" for i in range(len(params))]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"{names[i]}: param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(names[i])
        d = g + p.dtype.type(cfg.weight_decay) * p if cfg.weight_decay else g
        if velocity[i] is None:
            velocity[i] = d.astype(p.dtype, copy=True)
        else:
            velocity[i] *= p.dtype.type(cfg.momentum)
            velocity[i] += d
        p -= p.dtype.type(lr) * velocity[i]


class SGD:
    """Momentum SGD over a dict of named parameter tensors."""

    def __init__(self, params, cfg: OptimConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.velocity = {name: None for name in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        names = list(self.params)
        vel = [self.velocity[n] for n in names]
        sgd_step(
            [self.params[n].data for n in names],
            [self.params[n].grad for n in names],
            lr,
            self.cfg,
            vel,
            names,
        )
        for n, v in zip(names, vel):
            self.velocity[n] = v
