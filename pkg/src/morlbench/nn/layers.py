"""Dense layers with hand-written reverse passes.

Every layer caches what its backward pass needs during ``forward``; calling
``backward`` without a cached forward raises. ``predict`` runs the same
computation without touching the cache, so inference on a target network
never clobbers a pending backward pass.
"""
from __future__ import annotations

import numpy as np


class Module:
    """Parameter bookkeeping shared by layers and composite networks."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for cname, child in self.children.items():
            for k, v in child.parameters().items():
                out[f"{cname}.{k}"] = v
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.params.items():
            out[k] = self.grads.get(k, np.zeros_like(v))
        for cname, child in self.children.items():
            for k, v in child.gradients().items():
                out[f"{cname}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        for child in self.children.values():
            child.zero_grad()

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the existing parameter arrays (shapes must match)."""
        own = self.parameters()
        missing = set(own) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, arr in own.items():
            src = np.asarray(values[k], dtype=float)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class _NoCache(RuntimeError):
    pass


def _need(cache, name):
    if cache is None:
        raise _NoCache(f"{name}.backward called without a cached forward pass")
    return cache


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = glorot_uniform(rng, n_in, n_out)
        if bias:
            self.params["b"] = np.zeros(n_out)
        self._x = None

    def predict(self, x):
        # 2-D matmul hits BLAS; stacked N-D matmul does not
        lead = x.shape[:-1]
        y = x.reshape(-1, self.n_in) @ self.params["W"]
        if "b" in self.params:
            y += self.params["b"]
        return y.reshape(*lead, self.n_out)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        self._x = x
        return self.predict(x)

    def backward(self, g):
        x = _need(self._x, "Linear")
        x2 = x.reshape(-1, self.n_in)
        g2 = g.reshape(-1, self.n_out)
        self.grads["W"] = x2.T @ g2
        if "b" in self.params:
            self.grads["b"] = g2.sum(axis=0)
        return (g2 @ self.params["W"].T).reshape(*g.shape[:-1], self.n_in)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def predict(self, x):
        return np.maximum(x, 0.0)

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * _need(self._mask, "ReLU")


class Tanh(Module):
    def __init__(self):
        super().__init__()
        self._y = None

    def predict(self, x):
        return np.tanh(x)

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        y = _need(self._y, "Tanh")
        return g * (1.0 - y * y)


class Identity(Module):
    def predict(self, x):
        return x

    def forward(self, x):
        return x

    def backward(self, g):
        return g


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "identity": Identity}


def make_activation(name: str) -> Module:
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


def sigmoid(x):
    # split branches keep exp() from overflowing
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)
        self._cache = None

    def predict(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.eps) * self.params["gamma"] + self.params["beta"]

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, g):
        xhat, inv = _need(self._cache, "LayerNorm")
        self.grads["gamma"] = (g * xhat).reshape(-1, self.dim).sum(axis=0)
        self.grads["beta"] = g.reshape(-1, self.dim).sum(axis=0)
        gx = g * self.params["gamma"]
        n = self.dim
        return inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                          - xhat * (gx * xhat).sum(axis=-1, keepdims=True))


class Embedding(Module):
    """Lookup table; ``forward`` takes integer ids of any shape."""

    def __init__(self, num: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        super().__init__()
        self.num, self.dim = num, dim
        self.params["E"] = rng.normal(0.0, scale, size=(num, dim))
        self._ids = None

    def predict(self, ids):
        return self.params["E"][ids]

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num):
            raise ValueError(f"embedding id outside [0, {self.num})")
        self._ids = ids
        return self.params["E"][ids]

    def backward(self, g):
        ids = _need(self._ids, "Embedding")
        gE = np.zeros_like(self.params["E"])
        np.add.at(gE, ids.reshape(-1), g.reshape(-1, self.dim))
        self.grads["E"] = gE
        return None
