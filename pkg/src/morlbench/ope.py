"""Off-policy evaluation: behavior model, weighted importance sampling,
fitted Q-evaluation and episode-level bootstrap intervals.

Weighted importance sampling uses per-horizon normalization:

    V = 1/N sum_n rho_{1:T_n} / w_{T_n} * G_n,   w_t = 1/N sum_n rho_{1:t}

where ``G_n`` is the discounted scalarized return of episode ``n``. An
episode that has ended contributes its final cumulative ratio to every
later ``w_t`` (after termination both policies act identically in the
absorbing state), so ``w_t`` always averages over all N episodes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .baselines import BehaviorCloning, seed_streams
from .mdp import Dataset, PreferenceVector, scalarize
from .nn import Adam, Mlp, squared_error
from .policies import Policy, mix_uniform


class DegenerateWeightsError(ArithmeticError):
    """Some normalizer w_t is zero, so the weighted estimate is undefined."""


class FqeDivergenceError(ArithmeticError):
    pass


class BootstrapError(RuntimeError):
    pass


# ---------------------------------------------------------------- behavior


class BehaviorModel(Policy):
    """Cloned behavior policy with every probability floored at ``p_min``.

    Several classifiers are averaged (a bagged estimate). The floor is
    applied as a mixture with the uniform distribution,
    ``(1 - A p_min) p + p_min``, which keeps rows normalized and moves
    each probability by at most ``A p_min``.
    """

    kind = "behavior"

    def __init__(self, classifiers, p_min: float = 1e-3):
        if isinstance(classifiers, BehaviorCloning):
            classifiers = [classifiers]
        self.classifiers = list(classifiers)
        if not self.classifiers:
            raise ValueError("at least one classifier is required")
        A = len(self.classifiers[0].classes_)
        super().__init__(A)
        if not 0.0 < p_min < 1.0 / A:
            raise ValueError(f"p_min must lie in (0, 1/{A})")
        self.p_min = p_min

    def action_probabilities(self, states):
        p = np.mean([c.predict_proba(states) for c in self.classifiers], axis=0)
        return mix_uniform(p, self.num_actions * self.p_min)


def fit_behavior(train: Dataset, p_min: float = 1e-3, seed: int = 0, n_models: int = 1, epochs: int = 300,
                 validation_fraction: float = 0.2, patience: int = 10, **kw) -> BehaviorModel:
    """BC classifier(s) stopped on held-out log-loss, floored at ``p_min``.

    Each member holds out its own random share of transitions. With
    ``n_models > 1`` the members are averaged: on a few hundred episodes
    this cuts the spread of importance-weighted estimates several-fold at
    ``n_models`` times the cost.
    """
    A = train.num_actions
    if not 0.0 < p_min < 1.0 / A:
        raise ValueError(f"p_min must lie in (0, 1/{A})")
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_models)]
    members = [BehaviorCloning(epochs=epochs, seed=s, num_actions=A, validation_fraction=validation_fraction,
                               patience=patience, **kw).fit(train) for s in seeds]
    return BehaviorModel(members, p_min)


# ---------------------------------------------------------------- WIS


@dataclass
class RatioTrace:
    """Per-step ratios, their running products and the per-horizon normalizers.

    ``rho`` and ``cumulative`` are (N, H) with H the longest episode; entries
    past an episode's end are 1 and the carried final product respectively.
    ``w[t]`` is the column mean of ``cumulative`` (0-based horizon index).
    """

    episode_ids: list
    lengths: np.ndarray
    rho: np.ndarray
    cumulative: np.ndarray
    w: np.ndarray

    def check(self) -> None:
        if not (np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.cumulative))):
            raise DegenerateWeightsError("non-finite importance ratio")
        prev = np.hstack([np.ones((len(self.rho), 1)), self.cumulative[:, :-1]])
        if not np.array_equal(prev * self.rho, self.cumulative):
            raise AssertionError("cumulative ratios do not follow the running-product recurrence")

    def dump(self, path) -> None:
        """One JSON line per episode: id, per-step ratios, running products."""
        with open(path, "w") as fh:
            for i, (eid, T) in enumerate(zip(self.episode_ids, self.lengths)):
                rec = {"episode_id": eid, "rho": self.rho[i, :T].tolist(),
                       "cumulative": self.cumulative[i, :T].tolist(), "w": self.w[:T].tolist()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def logged_action_probabilities(policy: Policy, data: Dataset) -> list[np.ndarray]:
    """pi(a_t | history) of each logged action, per episode."""
    probs = policy.dataset_probabilities(data)
    return [p[np.arange(len(tr)), tr.actions] for p, tr in zip(probs, data.trajectories)]


def ratio_trace(policy: Policy, data: Dataset, behavior: Policy, rho_clip: float | None = 20.0) -> RatioTrace:
    if rho_clip is not None and rho_clip < 1.0:
        raise ValueError("rho_clip must be >= 1 (or None to disable)")
    pi = logged_action_probabilities(policy, data)
    pb = logged_action_probabilities(behavior, data)
    lengths = np.array([len(tr) for tr in data.trajectories])
    N, H = len(lengths), int(lengths.max())
    rho = np.ones((N, H))
    for i, (p, q) in enumerate(zip(pi, pb)):
        if np.any(q <= 0):
            raise DegenerateWeightsError(f"behavior probability 0 on a logged action in {data.trajectories[i].id}")
        rho[i, :len(p)] = p / q
    if rho_clip is not None:
        np.clip(rho, 1.0 / rho_clip, rho_clip, out=rho)
        rho[np.arange(H)[None, :] >= lengths[:, None]] = 1.0
    cumulative = np.cumprod(rho, axis=1)
    trace = RatioTrace(data.ids, lengths, rho, cumulative, cumulative.mean(axis=0))
    trace.check()
    return trace


class WisComponents:
    """Everything WIS needs, precomputed so resampled estimates are cheap.

    ``value(indices)`` evaluates the estimator on the multiset of episodes
    ``indices`` (with repetition), recomputing the normalizers ``w_t``
    from that multiset.
    """

    def __init__(self, trace: RatioTrace, returns: np.ndarray):
        self.trace = trace
        self.returns = np.asarray(returns, dtype=float)
        self.last = trace.lengths - 1

    def __len__(self):
        return len(self.returns)

    def value(self, indices=None) -> float:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices)
        cum = self.trace.cumulative[idx]
        w = cum.mean(axis=0)
        w_end = w[self.last[idx]]
        if np.any(w_end <= 0):
            raise DegenerateWeightsError("normalizer w_t is zero; the weighted estimate is undefined")
        final = cum[np.arange(len(idx)), self.last[idx]]
        return float(np.mean(final / w_end * self.returns[idx]))

    __call__ = value

    def check_bounds(self) -> float:
        """Full-data value; with equal horizons it must lie within the return range."""
        value = self.value()
        if np.unique(self.trace.lengths).size == 1:
            # the weights then sum to N: a convex combination of returns
            lo, hi = self.returns.min(), self.returns.max()
            if not lo - 1e-9 <= value <= hi + 1e-9:
                raise AssertionError(f"WIS estimate {value} outside the return range [{lo}, {hi}]")
        return value


def wis_components(policy: Policy, data: Dataset, behavior: Policy, w: PreferenceVector,
                   gamma: float = 0.99, rho_clip: float | None = 20.0) -> WisComponents:
    trace = ratio_trace(policy, data, behavior, rho_clip)
    return WisComponents(trace, scalarize(data.returns(gamma), w))


def wis(policy: Policy, data: Dataset, behavior: Policy, w: PreferenceVector, gamma: float = 0.99,
        rho_clip: float | None = 20.0) -> tuple[float, RatioTrace]:
    comp = wis_components(policy, data, behavior, w, gamma, rho_clip)
    return comp.check_bounds(), comp.trace


# ---------------------------------------------------------------- FQE


def next_step_probabilities(policy: Policy, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """(pi(. | s_{t+1}) for every flat transition, pi(. | s_1) per episode).

    Rows for terminal transitions are zero; they are never used because the
    bootstrap term is masked by ``done``.
    """
    probs = policy.dataset_probabilities(data)
    nxt = [np.vstack([p[1:], np.zeros((1, p.shape[1]))]) for p in probs]
    return np.concatenate(nxt), np.stack([p[0] for p in probs])


@dataclass
class FqeResult:
    value: float
    initial_values: np.ndarray
    q_net: Mlp
    mean_abs_q: list = field(default_factory=list)

    def estimate(self, indices=None) -> float:
        """Average of V(s_1) over the given episodes (Q held fixed)."""
        v = self.initial_values if indices is None else self.initial_values[np.asarray(indices)]
        return float(v.mean())

    __call__ = estimate


def fit_fqe(policy: Policy, data: Dataset, w: PreferenceVector, gamma: float = 0.99, iterations: int = 50,
            seed: int = 0, hidden=(64, 64), steps_per_iteration: int = 300, batch_size: int = 256,
            learning_rate: float = 1e-3, warm_start: bool = False) -> FqeResult:
    """Fitted Q-evaluation of ``policy`` on the logged transitions of ``data``.

    Each iteration freezes the current Q, builds targets
    ``r_w + gamma (1 - done) sum_a pi(a|s') Q(s', a)`` and regresses
    Q(s, a_logged) on them with ``steps_per_iteration`` Adam steps. With
    ``warm_start=False`` the network is re-initialized before every
    regression.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    flat = data.flat()
    if len(flat) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    r = scalarize(flat.rewards, w)
    next_pi, init_pi = next_step_probabilities(policy, data)
    s1 = data.initial_states()
    v_max = float(np.abs(r).max()) or 1.0
    horizon = 1.0 / (1.0 - gamma) if gamma < 1.0 else float(data.max_length())
    limit = v_max * horizon * 10.0

    init_rng, batch_rng = seed_streams(seed, 2)
    dims = [data.dim, *hidden, data.num_actions]

    def fresh():
        # zero output layer: Q starts at exactly 0 rather than at init noise
        m = Mlp(dims, "relu", seed=init_rng)
        for v in m.linears[-1].params.values():
            v[...] = 0.0
        return m

    net = fresh()
    opt = Adam(net, learning_rate)
    n = len(flat)
    rows = np.arange(min(batch_size, n))
    history = []
    for _ in range(iterations):
        q_next = net.predict(flat.next_states)
        mean_abs = float(np.abs(q_next).mean())
        history.append(mean_abs)
        if not np.isfinite(mean_abs) or mean_abs > limit:
            raise FqeDivergenceError(f"FQE diverged: mean |Q| = {mean_abs:.3g} exceeds {limit:.3g}")
        y = r + gamma * (1.0 - flat.dones) * (next_pi * q_next).sum(axis=1)
        if not warm_start:
            net = fresh()
            opt = Adam(net, learning_rate)
        for _ in range(steps_per_iteration):
            idx = batch_rng.integers(0, n, size=len(rows))
            q = net.forward(flat.states[idx])
            _, g_sa = squared_error(q[rows, flat.actions[idx]], y[idx])
            grad = np.zeros_like(q)
            grad[rows, flat.actions[idx]] = g_sa
            net.backward(grad)
            opt.step()
    v1 = (init_pi * net.predict(s1)).sum(axis=1)
    return FqeResult(float(v1.mean()), v1, net, history)


def fqe(policy: Policy, data: Dataset, w: PreferenceVector, gamma: float = 0.99, iterations: int = 50,
        seed: int = 0, **kw) -> float:
    return fit_fqe(policy, data, w, gamma, iterations, seed, **kw).value


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class OpeEstimate:
    value: float
    ci_lower: float
    ci_upper: float
    n_bootstrap: int
    metric: str
    preference: PreferenceVector | None = None

    def __post_init__(self):
        if not self.ci_lower <= self.value <= self.ci_upper:
            raise ValueError("interval must contain the point estimate")

    @property
    def ci_width(self) -> float:
        return self.ci_upper - self.ci_lower

    @property
    def half_width(self) -> float:
        return self.ci_width / 2.0


def bootstrap_ci(estimator, data, B: int = 1000, level: float = 0.95, seed: int = 0, metric: str = "wis",
                 preference: PreferenceVector | None = None) -> OpeEstimate:
    """Percentile bootstrap over episodes.

    ``estimator(indices)`` must return the estimate on the episode multiset
    ``indices`` (``None`` meaning the full data); ``data`` is the dataset or
    just its episode count. Resample ``b`` draws from its own seed stream,
    so results do not depend on evaluation order. A failing resample is
    redrawn from the same stream; more than ``3 B`` draws in total is an
    error. The interval is widened to include the full-data value when the
    percentiles miss it.
    """
    if B < 100:
        raise ValueError("B must be >= 100")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    n = data if isinstance(data, (int, np.integer)) else len(data)
    value = float(estimator(None))
    streams = seed_streams(seed, B)
    stats = np.empty(B)
    draws = 0
    for b in range(B):
        while True:
            draws += 1
            if draws > 3 * B:
                raise BootstrapError(f"estimator failed on too many resamples ({draws - 1} draws for B={B})")
            idx = streams[b].integers(0, n, size=n)
            try:
                stats[b] = float(estimator(idx))
            except (ArithmeticError, ValueError, FloatingPointError):
                continue
            if np.isfinite(stats[b]):
                break
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return OpeEstimate(value, float(min(lo, value)), float(max(hi, value)), B, metric, preference)


def subset_estimator(fn, data: Dataset):
    """Adapt ``fn(dataset) -> float`` to the index-based bootstrap protocol."""
    def estimator(indices):
        return float(fn(data if indices is None else data.subset(indices)))
    return estimator


__all__ = [
    "BehaviorModel", "BootstrapError", "DegenerateWeightsError", "FqeDivergenceError", "FqeResult",
    "OpeEstimate", "RatioTrace", "WisComponents", "bootstrap_ci", "fit_behavior", "fit_fqe", "fqe",
    "logged_action_probabilities", "next_step_probabilities", "ratio_trace", "subset_estimator", "wis",
    "wis_components",
]
