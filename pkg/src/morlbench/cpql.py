"""Preference-conditioned conservative Pareto Q-learning.

One network predicts a K-vector of action values per action, conditioned on
the preference. Two conditioning schemes:

``concat``
    The free simplex coordinates of the preference (the first K-1 weights)
    are appended to the state before the backbone MLP.
``preference_attention``
    The backbone sees the state only; a gate network maps the preference to
    per-unit gains ``2 * sigmoid(.)`` in (0, 2) that multiply the first
    hidden layer.

Learning is double-Q style with scalarized action selection and a vector
backup, plus a CQL penalty on the scalarized values.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import ConservatismViolation, seed_streams
from .mdp import OBJECTIVES, Dataset, PreferenceVector, preference_grid
from .nn import Adam, Linear, Mlp, Module, sigmoid, softmax
from .nn.layers import make_activation
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.losses import logsumexp
from .policies import GreedyQPolicy

VARIANTS = ("concat", "preference_attention")


class PreferenceSampler:
    """Draws one preference per training row.

    ``uniform`` samples the simplex uniformly (Dirichlet(1)) and, for K=2,
    overwrites the first rows of every batch with the ``grid_step`` grid so
    the evaluation grid is covered on every update. ``grid`` samples grid
    points only. ``fixed`` always returns ``value``.
    """

    def __init__(self, mode: str = "uniform", grid_step: float = 0.1, value=None):
        if mode not in ("uniform", "grid", "fixed"):
            raise ValueError(f"unknown sampler mode {mode!r}")
        if mode == "fixed" and value is None:
            raise ValueError("fixed sampler needs a value")
        self.mode = mode
        self.grid_step = grid_step
        self.value = None if value is None else np.asarray(value, dtype=float)

    def grid(self) -> np.ndarray:
        return np.array([p.as_array() for p in preference_grid(self.grid_step)])

    def sample(self, n: int, K: int, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "fixed":
            if len(self.value) != K:
                raise ValueError(f"fixed preference has {len(self.value)} weights, model has K={K}")
            return np.tile(self.value, (n, 1))
        if K == 1:
            return np.ones((n, 1))
        if self.mode == "grid":
            if K != 2:
                raise ValueError("grid sampling is defined for K=2")
            g = self.grid()
            return g[rng.integers(0, len(g), size=n)]
        out = rng.dirichlet(np.ones(K), size=n)
        if K == 2:
            g = self.grid()
            m = min(len(g), n)
            out[:m] = g[:m]
        return out


class VectorQNetwork(Module):
    """Maps (states (n, D), preferences (n, K)) to vector values (n, A, K)."""

    def __init__(self, dim: int, num_actions: int, K: int, conditioning: str = "concat",
                 hidden=(64, 64), activation: str = "relu", gate_hidden: int = 32, seed=0):
        super().__init__()
        if conditioning not in VARIANTS:
            raise ValueError(f"conditioning must be one of {VARIANTS}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.dim, self.num_actions, self.K = dim, num_actions, K
        self.conditioning = conditioning
        self.hidden = tuple(hidden)
        self.activation = activation
        self.gate_hidden = gate_hidden
        out = num_actions * K
        if conditioning == "concat":
            self.backbone = Mlp([dim + K - 1, *hidden, out], activation, seed=rng)
            self.children["backbone"] = self.backbone
        else:
            self.first = Linear(dim, hidden[0], rng)
            self.first_act = make_activation(activation)
            self.rest = Mlp([*hidden, out], activation, seed=rng)
            self.gate = Mlp([max(K - 1, 1), gate_hidden, hidden[0]], "tanh", seed=rng)
            self.children.update(first=self.first, rest=self.rest, gate=self.gate)
            self._cache = None

    def _pref_input(self, prefs):
        prefs = np.asarray(prefs, dtype=float)
        if self.K == 1:
            return np.zeros((len(prefs), 1 if self.conditioning != "concat" else 0))
        return prefs[:, : self.K - 1]

    def gate_gains(self, prefs) -> np.ndarray:
        return 2.0 * sigmoid(self.gate.predict(self._pref_input(prefs)))

    def _run(self, states, prefs, train):
        n = len(states)
        if self.conditioning == "concat":
            x = np.concatenate([states, self._pref_input(prefs)], axis=1)
            y = self.backbone.forward(x) if train else self.backbone.predict(x)
        else:
            p = self._pref_input(prefs)
            if train:
                h = self.first_act.forward(self.first.forward(states))
                gl = self.gate.forward(p)
            else:
                h = self.first_act.predict(self.first.predict(states))
                gl = self.gate.predict(p)
            sg = sigmoid(gl)
            gains = 2.0 * sg
            if train:
                self._cache = (h, sg)
            hg = h * gains
            y = self.rest.forward(hg) if train else self.rest.predict(hg)
        return y.reshape(n, self.num_actions, self.K)

    def forward(self, states, prefs):
        return self._run(np.atleast_2d(states), prefs, True)

    def predict(self, states, prefs):
        return self._run(np.atleast_2d(states), prefs, False)

    def backward(self, grad):
        g = grad.reshape(len(grad), -1)
        if self.conditioning == "concat":
            self.backbone.backward(g)
            return
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        h, sg = self._cache
        g_hg = self.rest.backward(g)
        g_h = g_hg * 2.0 * sg
        g_gl = g_hg * h * 2.0 * sg * (1.0 - sg)
        self.gate.backward(g_gl)
        self.first.backward(self.first_act.backward(g_h))

    def copy(self) -> "VectorQNetwork":
        clone = VectorQNetwork(self.dim, self.num_actions, self.K, self.conditioning, self.hidden,
                               self.activation, self.gate_hidden, seed=0)
        clone.load_parameters(self.parameters())
        return clone


def scalarized_values(q_vec, prefs) -> np.ndarray:
    """(n, A, K) x (n, K) -> (n, A)."""
    return np.einsum("nak,nk->na", q_vec, prefs)


class ConservativeParetoQLearning(BaseEstimator):
    """Preference-conditioned CQL over vector rewards (one model for every preference)."""

    def __init__(self, variant="concat", alpha=0.03, gamma=0.99, iterations=5000, batch_size=256,
                 target_sync_period=500, hidden=(64, 64), activation="relu", learning_rate=1e-3,
                 sampler_mode="uniform", grid_step=0.1, fixed_preference=None,
                 objectives=OBJECTIVES, seed=0):
        self.variant = variant
        self.alpha = alpha
        self.gamma = gamma
        self.iterations = iterations
        self.batch_size = batch_size
        self.target_sync_period = target_sync_period
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.sampler_mode = sampler_mode
        self.grid_step = grid_step
        self.fixed_preference = fixed_preference
        self.objectives = objectives
        self.seed = seed

    def _sampler(self) -> PreferenceSampler:
        return PreferenceSampler(self.sampler_mode, self.grid_step, self.fixed_preference)

    def fit(self, data: Dataset, y=None):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        cols = [OBJECTIVES.index(o) for o in self.objectives]
        K = len(cols)
        flat = data.flat()
        rewards = flat.rewards[:, cols]
        sampler = self._sampler()
        init_rng, batch_rng, pref_rng = seed_streams(self.seed, 3)
        A = data.num_actions
        self.num_actions_ = A
        self.K_ = K
        self.n_features_in_ = data.dim
        self.online_ = VectorQNetwork(data.dim, A, K, self.variant, self.hidden, self.activation, seed=init_rng)
        self.target_ = self.online_.copy()
        self.n_target_syncs_ = 0
        opt = Adam(self.online_, self.learning_rate)
        self.loss_history_, self.penalty_history_ = [], []
        n = len(flat)
        b = min(self.batch_size, n)
        rows = np.arange(b)
        for it in range(self.iterations):
            idx = batch_rng.integers(0, n, size=b)
            prefs = sampler.sample(b, K, pref_rng)
            s, a = flat.states[idx], flat.actions[idx]
            s2, done = flat.next_states[idx], flat.dones[idx]
            y_vec = self._vector_targets(rewards[idx], s2, done, prefs)

            q = self.online_.forward(s, prefs)
            diff = q[rows, a] - y_vec
            td = float((diff * diff).sum(axis=1).mean())
            grad = np.zeros_like(q)
            grad[rows, a] = 2.0 * diff / b

            qs = scalarized_values(q, prefs)
            pen = float(np.mean(logsumexp(qs, axis=1) - qs[rows, a]))
            if pen < -1e-12:
                raise ConservatismViolation(f"negative scalarized CQL penalty {pen}")
            g_qs = softmax(qs)
            g_qs[rows, a] -= 1.0
            grad += self.alpha * (g_qs / b)[:, :, None] * prefs[:, None, :]

            self.online_.backward(grad)
            opt.step()
            self.loss_history_.append(td + self.alpha * pen)
            self.penalty_history_.append(pen)
            if (it + 1) % self.target_sync_period == 0:
                self.target_.load_parameters(self.online_.parameters())
                self.n_target_syncs_ += 1
        return self

    def _vector_targets(self, rewards, next_states, dones, prefs):
        """Scalarized action choice on the online net, vector evaluation on the target net."""
        rows = np.arange(len(rewards))
        a_star = scalarized_values(self.online_.predict(next_states, prefs), prefs).argmax(axis=1)
        q_next = self.target_.predict(next_states, prefs)[rows, a_star]
        return rewards + self.gamma * (1.0 - dones)[:, None] * q_next

    def _prefs(self, w, n):
        check_is_fitted(self, "online_")
        arr = w.as_array() if isinstance(w, PreferenceVector) else np.asarray(w, dtype=float)
        if arr.shape[-1] != self.K_:
            raise ValueError(f"preference has {arr.shape[-1]} weights, model has K={self.K_}")
        return np.broadcast_to(arr, (n, self.K_))

    def q_vectors(self, X, w) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.online_.predict(X, self._prefs(w, len(X)))

    def q_values(self, X, w) -> np.ndarray:
        X = np.atleast_2d(X)
        return scalarized_values(self.q_vectors(X, w), self._prefs(w, len(X)))

    def policy_at(self, w, epsilon: float = 0.05) -> GreedyQPolicy:
        return policy_at(self, w, epsilon)

    def save(self, path, **metadata):
        params = self.get_params()
        params["variant"] = self.variant
        params["hidden"] = list(self.hidden)
        params["objectives"] = list(self.objectives)
        params["fixed_preference"] = None if self.fixed_preference is None else list(self.fixed_preference)
        save_checkpoint(path, self.online_.parameters(), {
            "kind": "vector_q", "K": self.K_, "dim": self.n_features_in_, "num_actions": self.num_actions_,
            "gate_hidden": self.online_.gate_hidden, "estimator_params": params, **metadata})

    @classmethod
    def load(cls, path) -> "ConservativeParetoQLearning":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "vector_q":
            raise ValueError(f"{path} is not a vector-Q checkpoint")
        kw = dict(meta["estimator_params"])
        kw["hidden"] = tuple(kw["hidden"])
        kw["objectives"] = tuple(kw["objectives"])
        if kw["fixed_preference"] is not None:
            kw["fixed_preference"] = tuple(kw["fixed_preference"])
        model = ConservativeParetoQLearning(**kw)
        net = VectorQNetwork(meta["dim"], meta["num_actions"], meta["K"], kw["variant"], kw["hidden"],
                             kw["activation"], meta["gate_hidden"], seed=0)
        net.load_parameters(params)
        model.online_ = net
        model.K_ = meta["K"]
        model.num_actions_ = meta["num_actions"]
        model.n_features_in_ = meta["dim"]
        return model


class ConditionedCPQL(ConservativeParetoQLearning):
    def __init__(self, alpha=0.03, gamma=0.99, iterations=5000, batch_size=256, target_sync_period=500,
                 hidden=(64, 64), activation="relu", learning_rate=1e-3, sampler_mode="uniform",
                 grid_step=0.1, fixed_preference=None, objectives=OBJECTIVES, seed=0):
        super().__init__("concat", alpha, gamma, iterations, batch_size, target_sync_period, hidden,
                         activation, learning_rate, sampler_mode, grid_step, fixed_preference, objectives, seed)


class AdaptiveCPQL(ConservativeParetoQLearning):
    def __init__(self, alpha=0.03, gamma=0.99, iterations=5000, batch_size=256, target_sync_period=500,
                 hidden=(64, 64), activation="relu", learning_rate=1e-3, sampler_mode="uniform",
                 grid_step=0.1, fixed_preference=None, objectives=OBJECTIVES, seed=0):
        super().__init__("preference_attention", alpha, gamma, iterations, batch_size, target_sync_period,
                         hidden, activation, learning_rate, sampler_mode, grid_step, fixed_preference,
                         objectives, seed)


def train_cpql(train: Dataset, variant: str = "concat", alpha: float = 0.03, gamma: float = 0.99,
               iterations: int = 5000, sampler: PreferenceSampler | None = None, seed: int = 0,
               **kw) -> ConservativeParetoQLearning:
    sampler = sampler or PreferenceSampler()
    fixed = None if sampler.value is None else tuple(sampler.value)
    return ConservativeParetoQLearning(variant=variant, alpha=alpha, gamma=gamma, iterations=iterations,
                                       sampler_mode=sampler.mode, grid_step=sampler.grid_step,
                                       fixed_preference=fixed, seed=seed, **kw).fit(train)


def policy_at(model: ConservativeParetoQLearning, w, epsilon: float = 0.05) -> GreedyQPolicy:
    """Epsilon-greedy policy over w^T Q(s, .; w) for a fixed preference."""
    check_is_fitted(model, "online_")
    pol = GreedyQPolicy(lambda X: model.q_values(X, w), model.num_actions_, epsilon)
    pol.kind = "conditioned"
    pol.preference = w
    return pol


def nondominated(points) -> np.ndarray:
    """Indices (ascending, i.e. input order) of the points no other point Pareto-dominates.

    Larger is better in every coordinate. Exact duplicates do not dominate
    each other. Two objectives use an O(n log n) sweep; more objectives
    fall back to a blocked pairwise test.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ValueError("points must be an (n, K) array")
    n, K = P.shape
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if K == 2:
        return _nondominated_2d(P)
    keep = np.ones(n, dtype=bool)
    for start in range(0, n, 256):
        blk = P[start:start + 256]
        ge = (P[None, :, :] >= blk[:, None, :]).all(axis=2)
        gt = (P[None, :, :] > blk[:, None, :]).any(axis=2)
        keep[start:start + 256] = ~(ge & gt).any(axis=1)
    return np.flatnonzero(keep)


def _nondominated_2d(P):
    order = np.lexsort((-P[:, 1], -P[:, 0]))  # x descending, then y descending
    keep = np.zeros(len(P), dtype=bool)
    best_y = -np.inf
    i = 0
    while i < len(order):
        x = P[order[i], 0]
        j = i
        while j < len(order) and P[order[j], 0] == x:
            j += 1
        group = order[i:j]
        gmax = P[group[0], 1]
        # within a group of equal x only the top-y points survive; they also need
        # to beat everything with strictly larger x
        if gmax > best_y:
            top = group[P[group, 1] == gmax]
            keep[top] = True
        best_y = max(best_y, gmax)
        i = j
    return np.flatnonzero(keep)
