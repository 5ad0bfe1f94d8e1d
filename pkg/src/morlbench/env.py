"""Synthetic ICU-style MDP with vector (mortality, LOS) rewards.

A single latent severity ``s`` in [0, 1] drives everything. Action ``a`` is a
treatment intensity ``u = a / (A - 1)``; the severity-matched action is
``ceil(s * (A - 1))``. Each step

    s' = s + severity_drift - treatment_effect * u + noise_std * xi

and over-treatment (``u`` above the matched intensity) triggers a fatal
complication with probability ``complication_rate * (u - u_matched)^2``.
The patient dies when ``s' >= 1``, is discharged when ``s' <= 0`` and is
censored (counted as a survivor) at ``T_max`` steps.

Aggressive treatment shortens the stay but costs lives, so survival and
length of stay genuinely conflict. Observed features are severity, the
elapsed-time fraction, severity-correlated vitals and pure distractors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .mdp import Dataset, NormalizationStats, PreferenceVector, Trajectory, VectorReward, normalize_features
from .policies import Policy, sample_actions


class EnvUsageError(RuntimeError):
    """Stepping an episode that has already finished."""


# (name, intercept, severity slope, noise scale); slope 0 marks a pure distractor
_VITALS = [
    ("heart_rate", 80.0, 40.0, 5.0),
    ("lactate", 1.0, 4.0, 0.5),
    ("mean_arterial_pressure", 85.0, -25.0, 4.0),
    ("spo2", 98.0, -8.0, 1.0),
    ("temperature", 37.0, 0.0, 0.4),
    ("age", 60.0, 0.0, 15.0),
]
_STATIC = {"age"}


@dataclass(frozen=True)
class EnvConfig:
    D: int = 8
    A: int = 5
    T_max: int = 20
    severity_drift: float = 0.03
    treatment_effect: float = 0.3
    noise_std: float = 0.05
    complication_rate: float = 0.8
    initial_severity: tuple = (0.2, 0.9)
    behavior_epsilon: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("D must be >= 2")
        if self.A < 2:
            raise ValueError("A must be >= 2")
        if self.T_max < 2:
            raise ValueError("T_max must be >= 2")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        if not 0.0 <= self.behavior_epsilon <= 1.0:
            raise ValueError("behavior_epsilon must lie in [0, 1]")
        lo, hi = self.initial_severity
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("initial_severity must satisfy 0 < lo <= hi < 1")

    def feature_names(self) -> list[str]:
        names = ["severity", "elapsed"]
        for j in range(self.D - 2):
            names.append(_VITALS[j][0] if j < len(_VITALS) else f"noise_{j - len(_VITALS)}")
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_severity"] = list(self.initial_severity)
        return d

    def with_(self, **kw) -> "EnvConfig":
        return replace(self, **kw)


@dataclass
class EnvState:
    features: np.ndarray
    step: int = 0
    done: bool = False

    @property
    def severity(self) -> float:
        return float(self.features[0])


def matched_action(severity, num_actions: int):
    """Severity-matched treatment intensity: ceil(s * (A - 1)), clipped to the action range."""
    s = np.asarray(severity, dtype=float)
    return np.clip(np.ceil(s * (num_actions - 1) - 1e-9), 0, num_actions - 1).astype(np.int64)


class SyntheticICU:
    """Batched simulator; every method works on ``n`` patients at once."""

    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg
        self.feature_names = cfg.feature_names()

    def _observe(self, sev, steps, prev, rng):
        cfg = self.cfg
        n = len(sev)
        noise = rng.standard_normal((n, cfg.D))
        x = np.empty((n, cfg.D))
        x[:, 0] = sev
        x[:, 1] = steps / cfg.T_max
        for j in range(2, cfg.D):
            k = j - 2
            if k < len(_VITALS):
                name, base, slope, scale = _VITALS[k]
                if name in _STATIC and prev is not None:
                    x[:, j] = prev[:, j]
                else:
                    x[:, j] = base + slope * sev + scale * noise[:, j]
            else:
                x[:, j] = noise[:, j]
        return x

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.cfg.initial_severity
        sev = rng.uniform(lo, hi, size=n)
        return self._observe(sev, np.zeros(n), None, rng)

    def step(self, features, steps, actions, rng):
        """Advance each row by one step.

        Returns (next_features, rewards (n, 2), done (n,), died (n,)).
        ``steps`` counts transitions already taken by each row.
        """
        cfg = self.cfg
        features = np.atleast_2d(features)
        steps = np.asarray(steps)
        actions = np.asarray(actions, dtype=np.int64)
        if (actions < 0).any() or (actions >= cfg.A).any():
            raise ValueError(f"action outside [0, {cfg.A})")
        if (steps >= cfg.T_max).any():
            raise EnvUsageError("episode already reached T_max")
        n = len(actions)
        sev = features[:, 0]
        u = actions / (cfg.A - 1)
        u_matched = matched_action(sev, cfg.A) / (cfg.A - 1)
        overshoot = np.maximum(u - u_matched, 0.0)
        p_comp = np.minimum(cfg.complication_rate * overshoot ** 2, 1.0)
        xi = rng.standard_normal(n)
        comp = rng.random(n) < p_comp
        new = sev + cfg.severity_drift - cfg.treatment_effect * u + cfg.noise_std * xi
        new = np.where(comp, 1.0, new)
        died = new >= 1.0
        discharged = (new <= 0.0) & ~died
        new_steps = steps + 1
        done = died | discharged | (new_steps >= cfg.T_max)
        rewards = np.zeros((n, 2))
        rewards[:, 0] = np.where(done & ~died, 1.0, 0.0)
        rewards[:, 1] = np.where(done, np.clip(1.0 - new_steps / cfg.T_max, 0.0, 1.0), 0.0)
        nxt = self._observe(np.clip(new, 0.0, 1.0), new_steps, features, rng)
        return nxt, rewards, done, died


def env_step(s: EnvState, a: int, rng: np.random.Generator, cfg: EnvConfig = EnvConfig()):
    """Single-patient step: returns (next EnvState, VectorReward, done)."""
    if s.done or s.step >= cfg.T_max:
        raise EnvUsageError("cannot step a finished episode")
    env = SyntheticICU(cfg)
    nxt, r, done, _ = env.step(s.features[None], np.array([s.step]), np.array([a]), rng)
    return (EnvState(nxt[0], s.step + 1, bool(done[0])),
            VectorReward(float(r[0, 0]), float(r[0, 1])), bool(done[0]))


class ClinicianPolicy(Policy):
    """Epsilon-soft severity-matched behavior policy.

    With ``stats`` the policy reads normalized features and undoes the
    scaling of the severity column before matching.
    """

    kind = "clinician"

    def __init__(self, num_actions: int = 5, epsilon: float = 0.3,
                 stats: NormalizationStats | None = None):
        super().__init__(num_actions)
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.epsilon = epsilon
        self.stats = stats

    def severity(self, states) -> np.ndarray:
        states = np.atleast_2d(states)
        sev = states[:, 0]
        if self.stats is not None:
            sev = sev * self.stats.std[0] + self.stats.mean[0]
        return sev

    def action_probabilities(self, states):
        a = matched_action(self.severity(states), self.num_actions)
        probs = np.full((len(a), self.num_actions), self.epsilon / self.num_actions)
        probs[np.arange(len(a)), a] += 1.0 - self.epsilon
        return probs


def behavior_policy(s: EnvState, rng: np.random.Generator, epsilon: float = 0.3,
                    num_actions: int = 5) -> int:
    """Sample the clinician's action for one raw state."""
    pol = ClinicianPolicy(num_actions, epsilon)
    return int(sample_actions(pol.action_probabilities(s.features[None]), rng)[0])


@dataclass
class Rollouts:
    """Raw output of ``simulate``: per-episode arrays in episode order."""

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    died: np.ndarray | None = None


def simulate(policy: Policy, n: int, rng: np.random.Generator, cfg: EnvConfig = EnvConfig(),
             stats: NormalizationStats | None = None, record: bool = True) -> Rollouts | np.ndarray:
    """Roll out ``n`` episodes in lock-step.

    The policy sees ``stats``-normalized features (raw features when
    ``stats`` is None). With ``record=False`` only the (n, T_max, 2) reward
    tensor is returned, which is all the oracle needs.
    """
    env = SyntheticICU(cfg)
    ctx = policy.start(n)
    feats = env.reset(n, rng)
    steps = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    reward_tensor = np.zeros((n, cfg.T_max, 2))
    died = np.zeros(n, dtype=bool)
    if record:
        hist_s = [[] for _ in range(n)]
        hist_a = [[] for _ in range(n)]
    while len(active):
        obs = feats[active]
        view = obs if stats is None else stats.transform(obs)
        probs = ctx.probs(view, active)
        acts = sample_actions(probs, rng)
        nxt, rew, done, dead = env.step(obs, steps[active], acts, rng)
        ctx.observe(acts, rew, active)
        reward_tensor[active, steps[active]] = rew
        if record:
            for j, i in enumerate(active):
                hist_s[i].append(obs[j])
                hist_a[i].append(acts[j])
        died[active[done]] = dead[done]
        feats[active] = nxt
        steps[active] += 1
        active = active[~done]
    if not record:
        return reward_tensor
    out = Rollouts(died=died)
    for i in range(n):
        T = len(hist_a[i])
        out.states.append(np.array(hist_s[i]))
        out.actions.append(np.array(hist_a[i], dtype=np.int64))
        out.rewards.append(reward_tensor[i, :T].copy())
    return out


def generate_dataset(cfg: EnvConfig = EnvConfig(), episodes: int = 1000,
                     policy: Policy | None = None, normalize: bool = True) -> Dataset:
    """Roll out ``episodes`` behavior-policy episodes; features are z-scored by default."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    if policy is None:
        policy = ClinicianPolicy(cfg.A, cfg.behavior_epsilon)
    ro = simulate(policy, episodes, rng, cfg)
    width = len(str(episodes - 1))
    trajs = []
    for i in range(episodes):
        T = len(ro.actions[i])
        dones = np.zeros(T, dtype=bool)
        dones[-1] = True
        trajs.append(Trajectory(f"ep{i:0{width}d}", ro.states[i], ro.actions[i], ro.rewards[i], dones))
    d = Dataset(trajs, cfg.feature_names(), cfg.A).validate()
    return normalize_features(d) if normalize else d


@dataclass(frozen=True)
class OracleValue:
    value: float
    stderr: float
    objective_values: np.ndarray
    rollouts: int

    def __float__(self):
        return self.value


def true_policy_value(policy: Policy, w: PreferenceVector, gamma: float = 0.99, rollouts: int = 10_000,
                      seed: int = 0, cfg: EnvConfig = EnvConfig(),
                      stats: NormalizationStats | None = None) -> OracleValue:
    """Monte Carlo value of ``policy`` under preference ``w`` on fresh simulator rollouts."""
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    rewards = simulate(policy, rollouts, rng, cfg, stats, record=False)
    disc = gamma ** np.arange(cfg.T_max)
    vec = np.einsum("ntk,t->nk", rewards, disc)
    scal = vec @ w.as_array()
    se = float(scal.std(ddof=1) / np.sqrt(rollouts)) if rollouts > 1 else 0.0
    return OracleValue(float(scal.mean()), se, vec.mean(axis=0), rollouts)
