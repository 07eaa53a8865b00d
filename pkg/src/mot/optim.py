"""AdamW with global-norm clipping and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup: int = 100
    clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    updates: int = field(default=0)


def warmup_lr(base: float, step: int, warmup: int) -> float:
    """Linear warmup from 0; ``step`` counts from 0."""
    if warmup <= 0:
        return base
    return base * min(1.0, step / warmup)


def clip_grads(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for g in grads:
            g *= c
    return norm


def adamw_update(state: OptimState, params: list[Tensor], grads: list[np.ndarray]) -> float:
    """One AdamW step in place; returns the learning rate used."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adamw_update")
    grads = [g.copy() for g in grads]
    clip_grads(grads, state.clip)
    lr = warmup_lr(state.lr, state.step, state.warmup)
    state.step += 1
    if lr == 0.0:
        return lr
    state.updates += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.updates
    c2 = 1.0 - b2 ** state.updates
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * (update + state.weight_decay * p.data)).astype(p.dtype)
    return lr


class AdamW:
    """Convenience wrapper pairing an :class:`OptimState` with its parameters."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, weight_decay: float = 0.01, warmup: int = 100,
                 clip: float = 1.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            lr=lr, weight_decay=weight_decay, warmup=warmup, clip=clip, betas=tuple(betas), eps=eps,
        )

    def step(self) -> float:
        return adamw_update(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
