"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError


@dataclass
class ScheduleConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 0
    total_steps: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr")

    @classmethod
    def with_default_warmup(cls, base_lr, total_steps, min_lr=0.0, warmup_fraction=0.1):
        warmup = min(int(round(warmup_fraction * total_steps)), total_steps - 1)
        return cls(base_lr, warmup, total_steps, min_lr)


def lr_at(step, cfg):
    """Linear ramp 0 -> base_lr over the warmup, cosine decay to min_lr after."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One AdamW update of the trainable entries of ``params`` in place.

    ``grads`` must name exactly the non-frozen parameters.
    """
    trainable = set(params.trainable())
    bad = [n for n in grads if n not in trainable]
    if bad:
        frozen = [n for n in bad if n in params]
        if frozen:
            raise ContractError(f"gradient supplied for frozen parameter(s): {frozen}")
        raise ContractError(f"gradient for unknown parameter(s): {bad}")
    missing = trainable - set(grads)
    if missing:
        raise ContractError(f"missing gradients for: {sorted(missing)}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    lr, wd = state.lr, state.weight_decay
    for name in params.trainable():
        p = params[name]
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + wd * p.data
        p.data = p.data - (lr * update).astype(p.data.dtype)
    return params
