"""Adam optimizer state and update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init(self, params: dict) -> "AdamState":
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
        return self


def adam_step(params: dict, state: AdamState, grads: dict | None = None) -> AdamState:
    """One bias-corrected Adam update, in place.

    Gradients default to each parameter's ``.grad``. ``params`` maps names
    to Tensors; iteration follows the dict's insertion order.
    """
    if not state.m:
        state.init(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise StateError(f"shape mismatch for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None
