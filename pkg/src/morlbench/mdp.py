"""Vector-reward trajectories, datasets and the return arithmetic shared by
every learner and estimator.

Datasets are stored column-wise (one array block per trajectory) so the
learners can batch over transitions without touching Python objects; the
:class:`Transition` view exists for readability and for the file format.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

OBJECTIVES = ("mortality", "los")
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """A dataset or trajectory violates one of its invariants."""


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class PreferenceVector:
    """Weights over (mortality, LOS) on the 2-simplex."""

    w_mortality: float
    w_los: float

    def __post_init__(self):
        for v in (self.w_mortality, self.w_los):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"preference weights must be finite and >= 0, got {self}")
        if abs(self.w_mortality + self.w_los - 1.0) > 1e-9:
            raise ValueError(f"preference weights must sum to 1, got {self}")

    @classmethod
    def from_mortality(cls, w: float) -> "PreferenceVector":
        # snap grid artefacts like 0.30000000000000004
        w = round(float(w), 12)
        return cls(w, round(1.0 - w, 12))

    def as_array(self) -> np.ndarray:
        return np.array([self.w_mortality, self.w_los])

    def __iter__(self):
        yield self.w_mortality
        yield self.w_los

    def label(self) -> str:
        def fmt(v):
            return f"{v:.1f}" if abs(v * 10 - round(v * 10)) < 1e-9 else f"{v:g}"
        return f"[{fmt(self.w_mortality)}, {fmt(self.w_los)}]"


def preference_grid(step: float = 0.1) -> list[PreferenceVector]:
    """Preference sweep from [0, 1] to [1, 0] in increments of ``step``."""
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"sweep step must divide 1, got {step}")
    return [PreferenceVector.from_mortality(i / n) for i in range(n + 1)]


@dataclass(frozen=True)
class VectorReward:
    mortality: float
    los: float

    def __post_init__(self):
        for v in (self.mortality, self.los):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"reward components must lie in [0, 1], got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mortality, self.los])


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: VectorReward
    done: bool
    t: int


def scalarize(r, w: PreferenceVector) -> float | np.ndarray:
    """Weighted sum of the objectives.

    ``r`` is a :class:`VectorReward` or any array whose last axis holds
    (mortality, los); arrays are scalarized element-wise.
    """
    if isinstance(r, VectorReward):
        return w.w_mortality * r.mortality + w.w_los * r.los
    r = np.asarray(r, dtype=float)
    return w.w_mortality * r[..., 0] + w.w_los * r[..., 1]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode. ``states`` is (T, D), ``rewards`` is (T, 2)."""

    id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=float))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "dones", np.asarray(self.dones, dtype=bool))
        for arr in (self.states, self.actions, self.rewards, self.dones):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], int(self.actions[i]),
                       VectorReward(*map(float, self.rewards[i])), bool(self.dones[i]), i + 1)
            for i in range(len(self))
        ]

    def validate(self, num_actions: int, dim: int | None = None) -> None:
        T = len(self.actions)
        if T < 1:
            raise DatasetError(f"trajectory {self.id}: empty")
        if self.states.ndim != 2 or self.states.shape[0] != T:
            raise DatasetError(f"trajectory {self.id}: states must be (T, D)")
        if dim is not None and self.states.shape[1] != dim:
            raise DatasetError(f"trajectory {self.id}: state dim {self.states.shape[1]} != {dim}")
        if len(self.rewards) != T or len(self.dones) != T:
            raise DatasetError(f"trajectory {self.id}: ragged columns")
        if (self.actions < 0).any() or (self.actions >= num_actions).any():
            raise DatasetError(f"trajectory {self.id}: action outside [0, {num_actions})")
        if not np.isfinite(self.states).all():
            raise DatasetError(f"trajectory {self.id}: non-finite state")
        if not np.isfinite(self.rewards).all() or (self.rewards < 0).any() or (self.rewards > 1).any():
            raise DatasetError(f"trajectory {self.id}: reward outside [0, 1]")
        if not self.dones[-1] or self.dones[:-1].any():
            raise DatasetError(f"trajectory {self.id}: exactly the final transition must be done")


def discounted_return(traj: Trajectory, gamma: float) -> np.ndarray:
    """Component-wise sum_t gamma^(t-1) r_t, shape (2,)."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    disc = gamma ** np.arange(len(traj))
    return disc @ traj.rewards


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean

    @classmethod
    def identity(cls, dim: int) -> "NormalizationStats":
        return cls(np.zeros(dim), np.ones(dim))


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    feature_names: tuple[str, ...]
    num_actions: int
    normalization_stats: NormalizationStats | None = None
    _flat: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    @property
    def ids(self) -> list[str]:
        return [tr.id for tr in self.trajectories]

    def validate(self) -> "Dataset":
        if len(self.trajectories) < 1:
            raise DatasetError("dataset must hold N >= 1 trajectories")
        if self.num_actions < 1:
            raise DatasetError("num_actions must be positive")
        seen = set()
        for tr in self.trajectories:
            if tr.id in seen:
                raise DatasetError(f"trajectory {tr.id}: duplicate id")
            seen.add(tr.id)
            tr.validate(self.num_actions, self.dim)
        return self

    def subset(self, indices: Iterable[int]) -> "Dataset":
        trajs = [self.trajectories[i] for i in indices]
        return Dataset(trajs, self.feature_names, self.num_actions, self.normalization_stats)

    def flat(self) -> "FlatTransitions":
        """Transition table over all episodes (cached)."""
        if "flat" not in self._flat:
            self._flat["flat"] = FlatTransitions.from_dataset(self)
        return self._flat["flat"]

    def initial_states(self) -> np.ndarray:
        return np.stack([tr.states[0] for tr in self.trajectories])

    def returns(self, gamma: float) -> np.ndarray:
        """(N, 2) discounted vector returns."""
        return np.stack([discounted_return(tr, gamma) for tr in self.trajectories])

    def max_length(self) -> int:
        return max(len(tr) for tr in self.trajectories)


@dataclass(frozen=True)
class FlatTransitions:
    """Transition-level arrays; ``next_states`` rows of terminal steps are zero."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode: np.ndarray
    t: np.ndarray

    @classmethod
    def from_dataset(cls, d: Dataset) -> "FlatTransitions":
        states, nexts, eps, ts = [], [], [], []
        for i, tr in enumerate(d.trajectories):
            states.append(tr.states)
            nxt = np.zeros_like(tr.states)
            nxt[:-1] = tr.states[1:]
            nexts.append(nxt)
            eps.append(np.full(len(tr), i))
            ts.append(np.arange(1, len(tr) + 1))
        return cls(
            states=np.concatenate(states),
            actions=np.concatenate([tr.actions for tr in d.trajectories]),
            rewards=np.concatenate([tr.rewards for tr in d.trajectories]),
            next_states=np.concatenate(nexts),
            dones=np.concatenate([tr.dones for tr in d.trajectories]).astype(float),
            episode=np.concatenate(eps),
            t=np.concatenate(ts),
        )

    def __len__(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------- file format

def _header_record(d: Dataset) -> dict:
    rec = {"type": "header", "version": FORMAT_VERSION, "D": d.dim, "A": d.num_actions,
           "feature_names": list(d.feature_names)}
    if d.normalization_stats is not None:
        rec["normalization_stats"] = {"mean": d.normalization_stats.mean.tolist(),
                                      "std": d.normalization_stats.std.tolist()}
    return rec


def save_dataset(d: Dataset, path) -> None:
    """Write one JSON record per line: a header, then one record per transition."""
    with open(path, "w") as fh:
        fh.write(json.dumps(_header_record(d)) + "\n")
        for tr in d.trajectories:
            for i in range(len(tr)):
                rec = {
                    "episode_id": tr.id,
                    "t": i + 1,
                    "state": tr.states[i].tolist(),
                    "action": int(tr.actions[i]),
                    "r_mortality": float(tr.rewards[i, 0]),
                    "r_los": float(tr.rewards[i, 1]),
                    "done": bool(tr.dones[i]),
                }
                fh.write(json.dumps(rec) + "\n")


_REQUIRED = ("episode_id", "t", "state", "action", "r_mortality", "r_los", "done")


def load_dataset(path) -> Dataset:
    path = Path(path)
    header = None
    episodes: dict[str, list[dict]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record must be an object")
            if header is None:
                if rec.get("type") != "header":
                    raise ParseError(lineno, "first record must be the header")
                for key in ("D", "A", "feature_names"):
                    if key not in rec:
                        raise ParseError(lineno, f"header missing '{key}'")
                if len(rec["feature_names"]) != rec["D"]:
                    raise ParseError(lineno, "feature_names length differs from D")
                header = rec
                continue
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise ParseError(lineno, f"missing fields {missing}")
            if len(rec["state"]) != header["D"]:
                raise ParseError(lineno, f"state has {len(rec['state'])} features, header says {header['D']}")
            episodes.setdefault(str(rec["episode_id"]), []).append(rec)
    if header is None:
        raise DatasetError("dataset must hold N >= 1 trajectories (empty file)")

    trajs = []
    for eid, recs in episodes.items():
        ts = [r["t"] for r in recs]
        if ts != list(range(1, len(recs) + 1)):
            raise DatasetError(f"trajectory {eid}: timesteps must run 1..T consecutively")
        trajs.append(Trajectory(
            id=eid,
            states=np.array([r["state"] for r in recs], dtype=float),
            actions=np.array([r["action"] for r in recs], dtype=np.int64),
            rewards=np.array([[r["r_mortality"], r["r_los"]] for r in recs], dtype=float),
            dones=np.array([r["done"] for r in recs], dtype=bool),
        ))
    stats = None
    if "normalization_stats" in header:
        ns = header["normalization_stats"]
        stats = NormalizationStats(np.array(ns["mean"], dtype=float), np.array(ns["std"], dtype=float))
    return Dataset(trajs, header["feature_names"], int(header["A"]), stats).validate()


# ---------------------------------------------------------------- splits / scaling

def concat_datasets(*parts: Dataset) -> Dataset:
    """Episodes of every part, in order; parts must share features, actions and scaling."""
    first = parts[0]

    def same_stats(a, b):
        if a is None or b is None:
            return a is b
        return np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)

    for d in parts[1:]:
        if (d.feature_names != first.feature_names or d.num_actions != first.num_actions
                or not same_stats(d.normalization_stats, first.normalization_stats)):
            raise DatasetError("cannot concatenate datasets with different features, actions or scaling")
    trajs = [tr for d in parts for tr in d.trajectories]
    return Dataset(trajs, first.feature_names, first.num_actions, first.normalization_stats).validate()


def split_dataset(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Episode-level train/test split, deterministic for a fixed seed."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(d)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test > n - 1:
        raise ValueError(f"cannot split {n} episodes with test_fraction={test_fraction}: "
                         "both sides need at least one episode")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return d.subset(train_idx), d.subset(test_idx)


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Per-feature z-scoring; constant features map to 0 with a stored std of 1."""

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def stats(self) -> NormalizationStats:
        check_is_fitted(self, "scale_")
        return NormalizationStats(self.mean_.copy(), self.scale_.copy())


def _map_states(d: Dataset, fn, stats: NormalizationStats | None) -> Dataset:
    trajs = [Trajectory(tr.id, fn(tr.states), tr.actions, tr.rewards, tr.dones) for tr in d.trajectories]
    return Dataset(trajs, d.feature_names, d.num_actions, stats)


def normalize_features(d: Dataset, stats: NormalizationStats | None = None) -> Dataset:
    """Return ``d`` with z-scored features and the statistics recorded.

    ``stats`` reuses another dataset's scaling; by default it is fitted on
    ``d``. A dataset that already carries statistics is treated as
    normalized and returned unchanged.
    """
    if d.normalization_stats is not None:
        return d
    if stats is None:
        stats = FeatureStandardizer().fit(d.flat().states).stats()
    return _map_states(d, stats.transform, stats)


def denormalize_features(d: Dataset) -> Dataset:
    if d.normalization_stats is None:
        return d
    return _map_states(d, d.normalization_stats.inverse_transform, None)


def make_dataset(trajectories: Sequence[Trajectory], num_actions: int,
                 feature_names: Sequence[str] | None = None) -> Dataset:
    """Convenience constructor for fixtures; validates before returning."""
    if feature_names is None:
        dim = trajectories[0].states.shape[1] if trajectories else 0
        feature_names = [f"x{i}" for i in range(dim)]
    return Dataset(list(trajectories), feature_names, num_actions).validate()
