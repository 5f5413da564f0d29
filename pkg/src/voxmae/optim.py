"""Decoupled-weight-decay Adam with linear warmup and cosine decay.

One fixed recipe per training stage (pretraining and fine-tuning differ in
peak rate, betas and floor), so runs are comparable across experiments.
Weight decay applies to matrices only; biases, norm gains/shifts and the
mask token are exempt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GradientMap, Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_epochs: float = 5.0
    clip_norm: float = 1.0

    def validate(self) -> None:
        if self.lr <= 0 or self.min_lr < 0:
            raise ConfigError(f"bad learning rates lr={self.lr}, min_lr={self.min_lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.warmup_epochs < 0 or self.clip_norm <= 0:
            raise ConfigError("warmup_epochs must be >= 0 and clip_norm > 0")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "min_lr": self.min_lr, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "eps": self.eps,
            "warmup_epochs": self.warmup_epochs, "clip_norm": self.clip_norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(
            lr=float(d["lr"]), min_lr=float(d["min_lr"]),
            weight_decay=float(d["weight_decay"]), betas=tuple(d["betas"]),
            eps=float(d["eps"]), warmup_epochs=float(d["warmup_epochs"]),
            clip_norm=float(d["clip_norm"]),
        )


def lr_schedule(cfg: OptimizerConfig, step: int, steps_per_epoch: int, total_epochs: int) -> float:
    """Learning rate for 0-based `step`: linear warmup over warmup_epochs,
    then cosine from peak to min_lr at the final step."""
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    total_steps = total_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: GradientMap, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = grads.total_norm()
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


class AdamW:
    """Keeps first/second-moment state per named parameter and applies the
    decoupled update in place between steps."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig,
                 steps_per_epoch: int, total_epochs: int):
        cfg.validate()
        if steps_per_epoch < 1 or total_epochs < 1:
            raise ConfigError("steps_per_epoch and total_epochs must be >= 1")
        self.params = params
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch
        self.total_epochs = total_epochs
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: GradientMap) -> float:
        """One update from a full gradient map; returns the lr used."""
        cfg = self.cfg
        clip_gradients(grads, cfg.clip_norm)
        lr = lr_schedule(cfg, self.step_count, self.steps_per_epoch, self.total_epochs)
        self.step_count += 1
        t = self.step_count
        b1, b2 = cfg.betas
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay > 0 and p.data.ndim >= 2:
                update = update + cfg.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)
        return lr
