"""AdamW with decoupled weight decay and a warmup-cosine learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimConfig:
    lr_peak: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.05


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    config: OptimConfig = field(default_factory=OptimConfig)


def init_state(params: dict[str, Tensor], config: OptimConfig | None = None) -> OptimState:
    return OptimState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        config=config or OptimConfig(),
    )


def warmup_cosine_lr(step: int, warmup: int, total: int, lr_peak: float) -> float:
    if not (0 <= step <= total):
        raise ValueError(f"step {step} outside [0, {total}]")
    if not (0 <= warmup < total):
        raise ValueError(f"warmup {warmup} must lie in [0, total={total})")
    if step < warmup:
        return lr_peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimState,
                 lr: float) -> tuple[dict[str, Tensor], OptimState]:
    """One AdamW step; returns new parameter tensors and mutates ``state``."""
    cfg = state.config
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g.data).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new = {}
    for name, p in params.items():
        g = grads[name].data
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(cfg.beta1)
        m += dt(1.0 - cfg.beta1) * g
        v *= dt(cfg.beta2)
        v += dt(1.0 - cfg.beta2) * (g * g)
        update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.eps)) + dt(cfg.weight_decay) * p.data
        new[name] = Tensor(p.data - dt(lr) * update)
    return new, state
