"""Warmup + cosine schedule and a name-keyed AdamW."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..errors import InvalidInputError, NonFiniteGradientError


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float, min_lr: float = 1e-6) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to ``min_lr``."""
    if step < 0:
        raise InvalidInputError("step must be non-negative")
    if step >= total_steps:
        return min_lr
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, tensor: torch.Tensor) -> bool:
    """Weight decay applies to matrices only, never to biases or norm scales."""
    return tensor.ndim >= 2


@dataclass
class TrainState:
    params: dict  # name -> tensor (updated in place)
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, torch.zeros_like(p))
            self.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        self.check()

    def check(self):
        if self.step < 0:
            raise InvalidInputError("step must be >= 0")
        for moments in (self.exp_avg, self.exp_avg_sq):
            if set(moments) != set(self.params):
                raise InvalidInputError("moment names must mirror parameter names")
            for name, m in moments.items():
                if m.shape != self.params[name].shape:
                    raise InvalidInputError(f"moment shape mismatch for {name}")


@torch.no_grad()
def adamw_step(state: TrainState, grads: dict, lr: float, wd: float) -> TrainState:
    """One decoupled-weight-decay Adam update with bias correction, in place."""
    if set(grads) != set(state.params):
        missing = sorted(set(state.params) - set(grads))
        extra = sorted(set(grads) - set(state.params))
        raise InvalidInputError(f"gradient names differ from parameters: missing {missing}, extra {extra}")
    for name, g in grads.items():
        if g.shape != state.params[name].shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if wd and decays(name, p):
            p.mul_(1.0 - lr * wd)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    state.step = t
    return state
