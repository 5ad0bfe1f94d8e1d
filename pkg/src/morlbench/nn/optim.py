from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    for k, p in params.items():
        if np.shape(grads[k]) != p.shape:
            raise ValueError(f"shape mismatch for {k}: grad {np.shape(grads[k])} vs param {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k in sorted(params):
        p, g = params[k], grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class Adam:
    """Adam bound to one module's parameters."""

    def __init__(self, module, learning_rate: float = 1e-3, **kw):
        self.module = module
        self.state = AdamState(learning_rate=learning_rate, **kw)

    def step(self):
        adam_step(self.module.parameters(), self.module.gradients(), self.state)
