from __future__ import annotations

import numpy as np


def numerical_gradient(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params`` (mutated and restored)."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[k] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for k in analytic:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def check_module_gradients(module, x, h: float = 1e-5, seed: int = 0) -> float:
    """Relative error of ``module.backward`` against central differences.

    Uses the scalar loss sum(out * R) for a fixed random projection R, so
    every output coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    out = module.forward(x)
    proj = rng.normal(size=out.shape)
    module.backward(proj)
    analytic = {k: v.copy() for k, v in module.gradients().items()}

    def loss():
        return float((module.predict(x) * proj).sum())

    numeric = numerical_gradient(loss, module.parameters(), h)
    return max_relative_error(analytic, numeric)
