"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
               hyper: AdamWHyper) -> tuple[Sequence[np.ndarray], OptimState]:
    """One in-place AdamW update.

    The decay term is ``lr * weight_decay * param`` and never enters the
    moment estimates.  Every gradient is checked before anything mutates.
    """
    if len(params) != len(grads):
        raise ValueError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    if hyper.lr < 0:
        raise ValueError(f"adamw_step: negative learning rate {hyper.lr}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("adamw_step: optimizer state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"adamw_step: param {i} shape {p.shape} vs grad {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw_step: non-finite gradient for param {i}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps) + hyper.weight_decay * p
        p -= hyper.lr * update
    return params, state


class AdamW:
    """Stateful wrapper binding AdamW to a fixed list of Tensors."""

    def __init__(self, params: Sequence[Tensor], hyper: AdamWHyper = AdamWHyper()):
        self.params = list(params)
        self.hyper = hyper
        self.state = OptimState.for_params([p.data for p in self.params])

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        hyper = AdamWHyper(lr, self.hyper.beta1, self.hyper.beta2, self.hyper.eps,
                           self.hyper.weight_decay)
        adamw_step([p.data for p in self.params], grads, self.state, hyper)
