"""Adam with global-norm gradient clipping and polynomial learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    lr_power: float = 1.0
    grad_clip: float | None = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.lr_end <= self.lr_start):
            raise ValueError("learning rates must satisfy 0 < lr_end <= lr_start")
        if not self.lr_power > 0:
            raise ValueError("lr_power must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def polynomial_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """``lr_end + (lr_start - lr_end) * (1 - step / total_steps) ** lr_power``, step clipped to ``[0, total]``."""
    if total_steps <= 0:
        return cfg.lr_start
    frac = min(max(step, 0), total_steps) / total_steps
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * (1.0 - frac) ** cfg.lr_power


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``; untouched when already below."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, step_index: int, cfg: TrainConfig, lr: float):
    """In-place bias-corrected Adam update of ``params`` at learning rate ``lr``.

    Gradients are clipped to the configured global norm first. Returns
    ``(params, state, grad_norm)``.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {name}")
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    state.step = step_index
    return params, state, norm
