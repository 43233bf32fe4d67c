"""Adam with inverse-time learning-rate decay, and L1/L2 penalty accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 32
    seed: int = 7

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based): ``lr0 / (1 + decay * step)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.lr0 / (1.0 + cfg.decay * step)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, step: int | None = None) -> dict:
    """Apply one Adam update. Returns new parameter arrays; ``state`` is advanced in place.

    ``step`` picks the decayed learning rate and defaults to ``state.t``.
    Parameters without a gradient entry are left alone.
    """
    if step is None:
        step = state.t
    lr = lr_at(cfg, step)
    t = state.t + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: param {p.shape}, grad {g.shape}, state {state.m[name].shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    state.t = t
    return new


def reg_loss_and_grad(params: dict, regs: dict) -> tuple[float, dict]:
    """Penalty ``sum(l1*|w| + l2*w**2)`` over regularized tensors and its gradient.

    ``regs`` maps parameter name to ``(l1, l2)``. The L1 subgradient uses
    sign(0) = 0 and the L2 gradient is ``2*l2*w``.
    """
    penalty = 0.0
    grads = {}
    for name, (l1, l2) in regs.items():
        if l1 == 0.0 and l2 == 0.0:
            continue
        w = params[name]
        penalty += float(l1 * np.abs(w).sum() + l2 * (w * w).sum())
        grads[name] = l1 * np.sign(w) + 2.0 * l2 * w
    return penalty, grads
