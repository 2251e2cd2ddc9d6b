"""Adam with bias correction and the warmup / step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore


@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    lr_decay: float = 0.1
    warmup_iters: int = 1000
    warmup_factor: float = 0.2
    batch_size: int = 48
    max_iters: int = 48000
    decay_steps: list[int] = field(default_factory=lambda: [28000, 38000])
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.warmup_factor <= 1:
            raise ValueError("warmup_factor must lie in (0, 1]")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        steps = list(self.decay_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("decay_steps must be strictly increasing")
        if steps and steps[-1] >= self.max_iters:
            raise ValueError("decay_steps must be below max_iters")


def lr_at(iteration: int, cfg: OptimConfig) -> float:
    """Learning rate at ``iteration``.

    Linear warmup from ``warmup_factor * base_lr`` to ``base_lr`` over
    ``warmup_iters``; afterwards ``base_lr`` times ``lr_decay`` for every decay
    step already reached.
    """
    if iteration < cfg.warmup_iters:
        frac = iteration / cfg.warmup_iters
        return cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)
    passed = sum(1 for s in cfg.decay_steps if iteration >= s)
    return cfg.base_lr * cfg.lr_decay**passed


class Adam:
    def __init__(self, store: ParameterStore, cfg: OptimConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, lr: float, grads: dict | None = None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``.

        Parameters with no gradient are left untouched (their moments too).
        """
        if grads is None:
            grads = {n: p.grad for n, p in self.store.items() if p.grad is not None}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        adam_step(self.store, grads, lr, self.t, self.cfg, self.m, self.v)


def adam_step(store: ParameterStore, grads: dict, lr: float, t: int, cfg: OptimConfig,
              m: dict, v: dict) -> ParameterStore:
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = store[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_eps)
    return store
