"""SGD with momentum 0.9, zero weight decay, and a cosine-annealed
learning rate: ``v <- 0.9 v + g; p <- p - lr v``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.0
    base_lr: float = 0.045
    step: int = 0
    total_steps: int = 1


def init_state(params: dict[str, Tensor], base_lr: float,
               total_steps: int, momentum: float = 0.9) -> OptimState:
    if total_steps < 1:
        raise ContractError(f"init_state: total_steps {total_steps} < 1")
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    return OptimState(velocity=velocity, momentum=momentum,
                      base_lr=base_lr, total_steps=total_steps)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * step / total_steps))``."""
    if not 0 <= step <= total_steps:
        raise ContractError(
            f"cosine_lr: step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: OptimState) -> None:
    """One in-place momentum update; advances the step counter and uses the
    cosine schedule at the pre-update step index."""
    if state.weight_decay != 0.0:
        raise ContractError("sgd_step: weight decay must stay 0.0")
    lr = cosine_lr(state.step, state.total_steps, state.base_lr)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(
                f"sgd_step: grad shape {g.shape} != param {p.data.shape} "
                f"for '{name}'")
        v = state.velocity[name]
        if v.shape != p.data.shape:
            raise ContractError(
                f"sgd_step: velocity shape {v.shape} != param "
                f"{p.data.shape} for '{name}'")
        v *= state.momentum
        v += g
        p.data -= lr * v
    state.step += 1
