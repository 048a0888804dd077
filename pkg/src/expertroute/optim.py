"""AdamW with decoupled weight decay, plus small gradient utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment estimates; `step` counts completed updates."""

    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> np.ndarray:
    """One decoupled-weight-decay Adam update; mutates `state`, returns new param.

    Rejects non-finite gradients without touching the parameter or state.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"param/grad shapes differ: {param.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; step rejected")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    elif state.m.shape != param.shape:
        raise ShapeError("optimizer state shape does not match parameter")

    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    return param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class OptimizerConfig:
    lr: float = 5e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_ratio: float = 0.06


class AdamW:
    """Tracks AdamState per named parameter and applies `adamw_step`."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.state = {name: AdamState() for name in params}

    def step(self, lr: float | None = None) -> None:
        """Update every parameter that carries a gradient, then clear grads."""
        lr = self.config.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data = adamw_step(
                p.data,
                p.grad,
                self.state[name],
                lr=lr,
                weight_decay=self.config.weight_decay,
                betas=self.config.betas,
                eps=self.config.eps,
            )
            p.grad = None


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup from 0 to `base_lr`, constant afterwards."""
    warmup_steps = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr


def clear_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
