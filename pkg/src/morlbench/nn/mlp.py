from __future__ import annotations

import numpy as np

from .layers import Linear, Module, make_activation


class Mlp(Module):
    """Affine layers with a shared hidden activation and an identity output.

    Parameters are named ``"<layer>.W"`` / ``"<layer>.b"`` with layers
    numbered from 0.
    """

    def __init__(self, layer_dims, activation: str = "relu", seed=0):
        super().__init__()
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"need at least input and output dims, got {layer_dims}")
        self.layer_dims = layer_dims
        self.activation = activation
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.linears = []
        self.acts = []
        for i, (a, b) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            lin = Linear(a, b, rng)
            self.children[str(i)] = lin
            self.linears.append(lin)
            last = i == len(layer_dims) - 2
            self.acts.append(make_activation("identity" if last else activation))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} does not match first layer dim {self.in_dim}")
        return x

    def predict(self, x):
        h = self._check(x)
        for lin, act in zip(self.linears, self.acts):
            h = act.predict(lin.predict(h))
        return h

    def forward(self, x):
        h = self._check(x)
        for lin, act in zip(self.linears, self.acts):
            h = act.forward(lin.forward(h))
        return h

    def backward(self, grad_out):
        """Backpropagate ``grad_out``; fills ``grads`` and returns d(loss)/d(input)."""
        g = grad_out
        for lin, act in zip(reversed(self.linears), reversed(self.acts)):
            g = lin.backward(act.backward(g))
        return g

    def copy(self) -> "Mlp":
        clone = Mlp(self.layer_dims, self.activation, seed=0)
        clone.load_parameters(self.parameters())
        return clone
