"""Scalarized single-objective baselines: behavior cloning, offline double
DQN and conservative Q-learning.

All three follow the scikit-learn estimator protocol (constructor stores
hyperparameters only, ``fit`` learns ``*_`` attributes and returns self), so
``get_params``/``clone`` work as usual. ``fit`` accepts a
:class:`~morlbench.mdp.Dataset`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .mdp import Dataset, PreferenceVector, scalarize
from .nn import Adam, Mlp, softmax, softmax_cross_entropy, squared_error
from .nn.checkpoint import load_mlp, save_mlp
from .nn.losses import logsumexp
from .policies import GreedyQPolicy, SoftmaxPolicy, epsilon_greedy_probs

BASELINE_PREFERENCE = (0.5, 0.5)


def seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators derived from one seed; stream ``i`` does not depend on ``n``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _as_preference(p) -> PreferenceVector:
    return p if isinstance(p, PreferenceVector) else PreferenceVector(*map(float, p))


class ConservatismViolation(AssertionError):
    """The CQL penalty came out negative, which is mathematically impossible."""


class BehaviorCloning(ClassifierMixin, BaseEstimator):
    """MLP classifier of logged actions trained with cross-entropy.

    With ``validation_fraction > 0`` a random share of the transitions is
    held out and training stops once the held-out log-loss has not improved
    for ``patience`` epochs; the best epoch's weights are kept. This keeps
    the probabilities calibrated, which matters when they feed importance
    ratios.
    """

    def __init__(self, hidden=(64, 64), activation="relu", epochs=30, batch_size=256,
                 learning_rate=1e-3, num_actions=None, validation_fraction=0.0, patience=10, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.num_actions = num_actions
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.seed = seed

    def fit(self, X, y=None):
        if isinstance(X, Dataset):
            flat = X.flat()
            X, y, A = flat.states, flat.actions, X.num_actions
        else:
            X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=np.int64)
            A = self.num_actions or int(y.max()) + 1
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        init_rng, batch_rng, split_rng = seed_streams(self.seed, 3)
        self.classes_ = np.arange(A)
        self.n_features_in_ = X.shape[1]
        X_val = y_val = None
        n_val = int(round(len(X) * self.validation_fraction))
        if n_val > 0:
            perm = split_rng.permutation(len(X))
            X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
            X, y = X[perm[n_val:]], y[perm[n_val:]]
        self.net_ = Mlp([X.shape[1], *self.hidden, A], self.activation, seed=init_rng)
        opt = Adam(self.net_, self.learning_rate)
        n = len(X)
        self.loss_history_, self.validation_history_ = [], []
        best, best_params, stale = np.inf, None, 0
        for _ in range(self.epochs):
            perm = batch_rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                logits = self.net_.forward(X[idx])
                loss, g = softmax_cross_entropy(logits, y[idx])
                self.net_.backward(g)
                opt.step()
                total += loss * len(idx)
            self.loss_history_.append(total / n)
            if X_val is None:
                continue
            val, _ = softmax_cross_entropy(self.net_.predict(X_val), y_val)
            self.validation_history_.append(val)
            if val < best:
                best, best_params, stale = val, {k: v.copy() for k, v in self.net_.parameters().items()}, 0
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_params is not None:
            self.net_.load_parameters(best_params)
        self.n_epochs_ = len(self.loss_history_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return softmax(self.net_.predict(np.atleast_2d(X)))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def policy(self, epsilon: float = 0.0) -> SoftmaxPolicy:
        check_is_fitted(self, "net_")
        return SoftmaxPolicy(self.net_, len(self.classes_), epsilon)

    def save(self, path, **metadata):
        save_mlp(path, self.net_, algorithm="bc", seed=self.seed, **metadata)

    @classmethod
    def load(cls, path) -> "BehaviorCloning":
        net, meta = load_mlp(path)
        dims = meta["layer_dims"]
        model = cls(hidden=tuple(dims[1:-1]), activation=meta["activation"], seed=meta.get("seed", 0))
        model.net_ = net
        model.classes_ = np.arange(dims[-1])
        model.n_features_in_ = dims[0]
        return model


class DoubleDQN(BaseEstimator):
    """Offline double DQN on rewards scalarized with a fixed preference.

    Targets are r_w + gamma (1 - done) Q_target(s', argmax_a Q_online(s', a)),
    fit by squared error on logged transitions only. The target network is
    re-synced every ``target_sync_period`` updates.
    """

    algorithm = "ddqn"

    def __init__(self, preference=BASELINE_PREFERENCE, gamma=0.99, iterations=5000, batch_size=256,
                 target_sync_period=500, hidden=(64, 64), activation="relu", learning_rate=1e-3, seed=0):
        self.preference = preference
        self.gamma = gamma
        self.iterations = iterations
        self.batch_size = batch_size
        self.target_sync_period = target_sync_period
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.seed = seed

    # CQL overrides this to add its penalty
    def _loss(self, q_all, actions, targets):
        n = len(actions)
        q_sa = q_all[np.arange(n), actions]
        loss, g_sa = squared_error(q_sa, targets)
        grad = np.zeros_like(q_all)
        grad[np.arange(n), actions] = g_sa
        return loss, grad, {}

    def _td_targets(self, rewards, next_states, dones):
        a_star = self.online_.predict(next_states).argmax(axis=1)
        q_next = self.target_.predict(next_states)[np.arange(len(a_star)), a_star]
        return rewards + self.gamma * (1.0 - dones) * q_next

    def _sync_target(self):
        self.target_.load_parameters(self.online_.parameters())
        self.n_target_syncs_ += 1

    def fit(self, data: Dataset, y=None):
        w = _as_preference(self.preference)
        flat = data.flat()
        if len(flat) == 0:
            raise ValueError("cannot fit on an empty dataset")
        rewards = scalarize(flat.rewards, w)
        init_rng, batch_rng = seed_streams(self.seed, 2)
        A = data.num_actions
        self.num_actions_ = A
        self.n_features_in_ = data.dim
        self.online_ = Mlp([data.dim, *self.hidden, A], self.activation, seed=init_rng)
        self.target_ = self.online_.copy()
        self.n_target_syncs_ = 0
        opt = Adam(self.online_, self.learning_rate)
        self.loss_history_ = []
        self.penalty_history_ = []
        n = len(flat)
        for it in range(self.iterations):
            idx = batch_rng.integers(0, n, size=min(self.batch_size, n))
            y_td = self._td_targets(rewards[idx], flat.next_states[idx], flat.dones[idx])
            q_all = self.online_.forward(flat.states[idx])
            loss, grad, extra = self._loss(q_all, flat.actions[idx], y_td)
            self.online_.backward(grad)
            opt.step()
            self.loss_history_.append(loss)
            if "penalty" in extra:
                self.penalty_history_.append(extra["penalty"])
            if (it + 1) % self.target_sync_period == 0:
                self._sync_target()
        return self

    def q_values(self, X) -> np.ndarray:
        check_is_fitted(self, "online_")
        return self.online_.predict(np.atleast_2d(X))

    def predict(self, X):
        return self.q_values(X).argmax(axis=1)

    def policy(self, epsilon: float = 0.05) -> GreedyQPolicy:
        return greedy_policy(self, epsilon)

    def save(self, path, **metadata):
        w = _as_preference(self.preference)
        params = {k: v for k, v in self.get_params().items() if k != "preference"}
        save_mlp(path, self.online_, algorithm=self.algorithm, preference=list(w),
                 estimator_params=params, **metadata)

    @classmethod
    def load(cls, path) -> "DoubleDQN":
        """Rebuild a fitted model from :meth:`save` output (online network only)."""
        net, meta = load_mlp(path)
        kind = {"ddqn": DoubleDQN, "cql": ConservativeQLearning}[meta["algorithm"]]
        params = dict(meta["estimator_params"])
        params["hidden"] = tuple(params["hidden"])
        model = kind(preference=tuple(meta["preference"]), **params)
        model.online_ = net
        model.num_actions_ = net.out_dim
        model.n_features_in_ = net.in_dim
        return model


class ConservativeQLearning(DoubleDQN):
    """Double DQN plus alpha * mean(logsumexp_a Q(s, a) - Q(s, a_data))."""

    algorithm = "cql"

    def __init__(self, preference=BASELINE_PREFERENCE, alpha=1.0, gamma=0.99, iterations=5000,
                 batch_size=256, target_sync_period=500, hidden=(64, 64), activation="relu",
                 learning_rate=1e-3, seed=0):
        super().__init__(preference=preference, gamma=gamma, iterations=iterations, batch_size=batch_size,
                         target_sync_period=target_sync_period, hidden=hidden, activation=activation,
                         learning_rate=learning_rate, seed=seed)
        self.alpha = alpha

    def fit(self, data, y=None):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        return super().fit(data, y)

    def _loss(self, q_all, actions, targets):
        loss, grad, _ = super()._loss(q_all, actions, targets)
        pen, g_pen = conservative_penalty(q_all, actions)
        if pen < -1e-12:
            raise ConservatismViolation(f"negative CQL penalty {pen}")
        return loss + self.alpha * pen, grad + self.alpha * g_pen, {"penalty": pen}


def conservative_penalty(q_all, actions):
    """mean_i [logsumexp_a q_i(a) - q_i(a_i)] and its gradient w.r.t. ``q_all``."""
    n = len(actions)
    pen = float(np.mean(logsumexp(q_all, axis=1) - q_all[np.arange(n), actions]))
    g = softmax(q_all)
    g[np.arange(n), actions] -= 1.0
    return pen, g / n


def greedy_policy(q, epsilon: float = 0.0) -> GreedyQPolicy:
    """Epsilon-greedy policy over a fitted Q model (anything with ``q_values``) or a callable."""
    q_fn = q.q_values if hasattr(q, "q_values") else q
    A = getattr(q, "num_actions_", None)
    if A is None:
        raise ValueError("cannot infer the number of actions from the Q model")
    return GreedyQPolicy(q_fn, A, epsilon)


def train_bc(train: Dataset, epochs: int = 30, seed: int = 0, **kw) -> SoftmaxPolicy:
    return BehaviorCloning(epochs=epochs, seed=seed, **kw).fit(train).policy()


def train_ddqn(train: Dataset, w=BASELINE_PREFERENCE, gamma=0.99, iterations=5000,
               target_sync_period=500, seed=0, **kw) -> DoubleDQN:
    return DoubleDQN(preference=tuple(w), gamma=gamma, iterations=iterations,
                     target_sync_period=target_sync_period, seed=seed, **kw).fit(train)


def train_cql(train: Dataset, w=BASELINE_PREFERENCE, alpha=1.0, gamma=0.99, iterations=5000,
              seed=0, **kw) -> ConservativeQLearning:
    return ConservativeQLearning(preference=tuple(w), alpha=alpha, gamma=gamma,
                                 iterations=iterations, seed=seed, **kw).fit(train)


__all__ = [
    "BASELINE_PREFERENCE", "BehaviorCloning", "ConservativeQLearning", "ConservatismViolation",
    "DoubleDQN", "conservative_penalty", "epsilon_greedy_probs", "greedy_policy", "seed_streams",
    "train_bc", "train_cql", "train_ddqn",
]
