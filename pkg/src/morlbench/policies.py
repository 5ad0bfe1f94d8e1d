"""Stochastic discrete-action policies.

All evaluators talk to policies through three calls:

* ``trajectory_probabilities(traj)`` -> (T, A) probabilities of every action
  at every logged step, given the logged history (what WIS and FQE need);
* ``start(n)`` -> a rollout context for ``n`` parallel episodes with
  ``probs(states)`` and ``observe(actions, rewards)`` (what the simulator
  oracle needs);
* ``action_probabilities(states)`` for Markov policies.

History-dependent policies (the decision transformer) override the first
two; Markov policies only implement ``action_probabilities``.
"""
from __future__ import annotations

import numpy as np

from .nn.losses import softmax


class Policy:
    kind = "policy"
    markov = True

    def __init__(self, num_actions: int):
        self.num_actions = int(num_actions)

    def action_probabilities(self, states) -> np.ndarray:
        raise NotImplementedError

    def trajectory_probabilities(self, traj) -> np.ndarray:
        return self.action_probabilities(traj.states)

    def dataset_probabilities(self, data) -> list[np.ndarray]:
        """Per-trajectory (T, A) arrays; Markov policies batch over all transitions."""
        if self.markov:
            flat = data.flat()
            probs = self.action_probabilities(flat.states)
            bounds = np.cumsum([0] + [len(tr) for tr in data.trajectories])
            return [probs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        return [self.trajectory_probabilities(tr) for tr in data.trajectories]

    def start(self, n: int) -> "RolloutContext":
        return MarkovRollout(self)

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        return sample_actions(self.action_probabilities(states), rng)


class RolloutContext:
    """Per-episode state for ``n`` parallel rollouts.

    ``rows`` holds the indices (into the ``n`` episodes) of the episodes
    still running; ``states``/``actions``/``rewards`` are aligned with it.
    """

    def probs(self, states, rows) -> np.ndarray:
        raise NotImplementedError

    def observe(self, actions, rewards, rows) -> None:
        pass


class MarkovRollout(RolloutContext):
    def __init__(self, policy: Policy):
        self.policy = policy

    def probs(self, states, rows=None):
        return self.policy.action_probabilities(states)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def epsilon_greedy_probs(values: np.ndarray, epsilon: float) -> np.ndarray:
    """1 - eps + eps/A on the argmax (lowest id wins ties), eps/A elsewhere."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    values = np.atleast_2d(values)
    n, A = values.shape
    probs = np.full((n, A), epsilon / A)
    probs[np.arange(n), values.argmax(axis=1)] += 1.0 - epsilon
    return probs


def mix_uniform(probs: np.ndarray, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    A = probs.shape[-1]
    return (1.0 - epsilon) * probs + epsilon / A


class SoftmaxPolicy(Policy):
    """Softmax over the logits of a classifier network, optionally blended with a uniform floor."""

    kind = "bc"

    def __init__(self, net, num_actions: int, epsilon: float = 0.0):
        super().__init__(num_actions)
        self.net = net
        self.epsilon = epsilon

    def action_probabilities(self, states):
        probs = softmax(self.net.predict(np.atleast_2d(states)))
        return mix_uniform(probs, self.epsilon) if self.epsilon else probs


class GreedyQPolicy(Policy):
    """Epsilon-greedy over a state-action value function ``q_fn(states) -> (n, A)``."""

    kind = "greedy_q"

    def __init__(self, q_fn, num_actions: int, epsilon: float = 0.0):
        super().__init__(num_actions)
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
        self.q_fn = q_fn
        self.epsilon = epsilon

    def action_probabilities(self, states):
        return epsilon_greedy_probs(self.q_fn(np.atleast_2d(states)), self.epsilon)


class TabularPolicy(Policy):
    """Fixed probabilities per state id; the state id is read from ``states[:, column]``.

    Handy for finite-MDP fixtures. With ``column=None`` the same distribution
    is used everywhere.
    """

    def __init__(self, table, column: int | None = None, one_hot: bool = False):
        table = np.atleast_2d(np.asarray(table, dtype=float))
        super().__init__(table.shape[1])
        self.table = table
        self.column = column
        self.one_hot = one_hot

    def action_probabilities(self, states):
        states = np.atleast_2d(states)
        if self.one_hot:
            ids = states.argmax(axis=1)
        elif self.column is None:
            ids = np.zeros(len(states), dtype=int)
        else:
            ids = np.rint(states[:, self.column]).astype(int)
        return self.table[ids]
