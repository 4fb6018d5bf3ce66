"""AdamW with a linear warmup, then a constant learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor

# Values used for the 7B-scale runs; kept for reference and selectable via
# OptimizerConfig.full_scale().
FULL_SCALE_LR = 5e-5
FULL_SCALE_BETAS = (0.9, 0.999)
FULL_SCALE_WEIGHT_DECAY = 0.0
FULL_SCALE_WARMUP_STEPS = 1000
FULL_SCALE_BATCH_SIZE = 6
FULL_SCALE_GRAD_ACCUM = 3


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    grad_accum: int = 1
    batch_size: int = 8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def full_scale(cls) -> OptimizerConfig:
        return cls(
            lr=FULL_SCALE_LR,
            beta1=FULL_SCALE_BETAS[0],
            beta2=FULL_SCALE_BETAS[1],
            weight_decay=FULL_SCALE_WEIGHT_DECAY,
            warmup_steps=FULL_SCALE_WARMUP_STEPS,
            batch_size=FULL_SCALE_BATCH_SIZE,
            grad_accum=FULL_SCALE_GRAD_ACCUM,
        )


def warmup_lr(cfg: OptimizerConfig, step: int) -> float:
    if step < 1:
        raise ValueError("optimizer steps are 1-based")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


@dataclass
class ParamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamWState:
    slots: dict[str, ParamState] = field(default_factory=dict)

    def slot(self, name: str, like: np.ndarray) -> ParamState:
        if name not in self.slots:
            self.slots[name] = ParamState(np.zeros_like(like), np.zeros_like(like))
        return self.slots[name]

    def drop(self, prefix: str) -> None:
        for name in [n for n in self.slots if n.startswith(prefix)]:
            del self.slots[name]


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: OptimizerConfig,
    step: int,
) -> float:
    """Apply one in-place AdamW update; returns the learning rate used.

    ``step`` drives the warmup schedule. Bias correction uses each
    parameter's own update count, so moments carried over from an earlier
    stage keep their correction.
    """
    lr = warmup_lr(cfg, step)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int(g.size - np.isfinite(g).sum())
            raise NonFiniteError(f"adamw_step: step {step}: {bad} non-finite gradient entries in {name!r}")
    for name, p in params.items():
        g = grads[name]
        s = state.slot(name, p.data)
        s.t += 1
        s.m = cfg.beta1 * s.m + (1.0 - cfg.beta1) * g
        s.v = cfg.beta2 * s.v + (1.0 - cfg.beta2) * (g * g)
        m_hat = s.m / (1.0 - cfg.beta1**s.t)
        v_hat = s.v / (1.0 - cfg.beta2**s.t)
        data = p.data
        if cfg.weight_decay:
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = data - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps))
    return lr
