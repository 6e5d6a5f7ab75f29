"""AdamW with decoupled weight decay, one state per parameter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, Node


@dataclass
class AdamWState:
    """Optimizer state for a single parameter matrix."""

    m: Array
    v: Array
    step: int = 0
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_param(cls, param: Node, **hyper) -> "AdamWState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **hyper)


def adamw_step(state: AdamWState, param: Node) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update, in place.

    Deterministic: identical (state, grad) produce a bit-identical update.
    """
    grad = param.grad
    if grad is None:
        raise ValueError("adamw_step: parameter gradient is not populated")
    p = param.value
    if state.weight_decay != 0.0:
        p *= 1.0 - state.lr * state.weight_decay
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class AdamW:
    """Convenience wrapper stepping a named parameter list in fixed order."""

    def __init__(self, named_params, lr=2e-5, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.01):
        self.named_params = list(named_params)
        self.states = {
            name: AdamWState.for_param(
                p, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                weight_decay=weight_decay,
            )
            for name, p in self.named_params
        }

    def zero_grads(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.named_params:
            adamw_step(self.states[name], p)
