"""Preference-conditioned decision transformer over vector returns-to-go.

Each timestep contributes three tokens, in order: a fused return token
(vector return-to-go concatenated with the preference), the state, and
the action. Tokens share a learned timestep embedding. Logits read at the
state token predict that step's action, so the prediction for step ``t``
sees every token up to and including ``s_t`` but never ``a_t``.

Returns-to-go are undiscounted suffix sums of the vector rewards: the
token at step ``t`` is the sum of the rewards of transitions ``t..T``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import seed_streams
from .mdp import Dataset, PreferenceVector, Trajectory
from .nn import Adam, Embedding, LayerNorm, Linear, Module, softmax, softmax_cross_entropy
from .nn.attention import TransformerBlock
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .policies import Policy, RolloutContext, mix_uniform


@dataclass(frozen=True)
class DtConfig:
    context_length: int = 10
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    dropout: float = 0.0
    use_preference_token: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported (must be 0)")


@dataclass
class DtSequence:
    """A batch of left-padded windows; every array has leading shape (B, L)."""

    rtg: np.ndarray        # (B, L, K)
    pref: np.ndarray       # (B, L, K)
    states: np.ndarray     # (B, L, D)
    actions: np.ndarray    # (B, L) int
    timesteps: np.ndarray  # (B, L) int, 0-based
    mask: np.ndarray       # (B, L) bool, True on real steps

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "DtSequence":
        return DtSequence(self.rtg[idx], self.pref[idx], self.states[idx], self.actions[idx],
                          self.timesteps[idx], self.mask[idx])


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums: out[t] = sum_{t' >= t} rewards[t']."""
    return np.cumsum(rewards[::-1], axis=0)[::-1]


def episode_preference(rtg0: np.ndarray) -> np.ndarray:
    """Direction of the initial return-to-go, or the even split when it is zero."""
    total = rtg0.sum()
    if total > 0:
        return rtg0 / total
    return np.full(len(rtg0), 1.0 / len(rtg0))


def _windows(rtg, pref, states, actions, L):
    """All windows ending at each step of one episode, left-padded to length L."""
    T, K = rtg.shape
    D = states.shape[1]
    ends = np.arange(T)
    pos = ends[:, None] - (L - 1) + np.arange(L)[None, :]
    mask = pos >= 0
    src = np.clip(pos, 0, None)
    return DtSequence(
        rtg=np.where(mask[..., None], rtg[src], 0.0),
        pref=np.where(mask[..., None], pref[src], 0.0),
        states=np.where(mask[..., None], states[src], 0.0),
        actions=np.where(mask, actions[src], 0),
        timesteps=np.where(mask, src, 0),
        mask=mask,
    )


def concat_sequences(seqs) -> DtSequence:
    seqs = list(seqs)
    return DtSequence(*(np.concatenate([getattr(s, f) for s in seqs])
                        for f in ("rtg", "pref", "states", "actions", "timesteps", "mask")))


def build_sequences(d: Dataset, context_length: int = 10, gamma: float = 1.0) -> DtSequence:
    """Training windows for every (episode, end step) pair.

    ``gamma`` must stay 1: targets are undiscounted, discounting belongs to
    the evaluators.
    """
    if gamma != 1.0:
        raise ValueError("decision-transformer returns-to-go are undiscounted (gamma=1)")
    out = []
    for tr in d.trajectories:
        rtg = returns_to_go(tr.rewards)
        pref = np.tile(episode_preference(rtg[0]), (len(tr), 1))
        out.append(_windows(rtg, pref, tr.states, tr.actions, context_length))
    return concat_sequences(out)


class DecisionTransformerNet(Module):
    def __init__(self, dim: int, num_actions: int, K: int, max_timestep: int, cfg: DtConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.dim, self.num_actions, self.K, self.max_timestep, self.cfg = dim, num_actions, K, max_timestep, cfg
        E = cfg.embed_dim
        self.embed_return = Linear(2 * K if cfg.use_preference_token else K, E, rng)
        self.embed_state = Linear(dim, E, rng)
        self.embed_action = Embedding(num_actions, E, rng)
        self.embed_time = Embedding(max_timestep, E, rng)
        self.embed_ln = LayerNorm(E)
        self.blocks = [TransformerBlock(E, cfg.num_heads, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(E)
        self.head = Linear(E, num_actions, rng)
        self.head.params["W"] *= 0.01  # near-uniform logits at init
        self.children.update(embed_return=self.embed_return, embed_state=self.embed_state,
                             embed_action=self.embed_action, embed_time=self.embed_time,
                             embed_ln=self.embed_ln, ln_f=self.ln_f, head=self.head)
        for i, blk in enumerate(self.blocks):
            self.children[f"block{i}"] = blk

    def _check(self, batch: DtSequence):
        B, L = batch.actions.shape
        if L > self.cfg.context_length:
            raise ValueError(f"window length {L} exceeds context_length {self.cfg.context_length}")
        if batch.states.shape != (B, L, self.dim):
            raise ValueError(f"states must be (B, L, {self.dim}), got {batch.states.shape}")
        if batch.rtg.shape != (B, L, self.K) or batch.pref.shape != (B, L, self.K):
            raise ValueError(f"rtg/pref must be (B, L, {self.K})")

    def _return_input(self, batch):
        if self.cfg.use_preference_token:
            return np.concatenate([batch.rtg, batch.pref], axis=-1)
        return batch.rtg

    def _run(self, batch: DtSequence, train: bool):
        self._check(batch)
        B, L = batch.actions.shape
        E = self.cfg.embed_dim
        call = (lambda m, *a: m.forward(*a)) if train else (lambda m, *a: m.predict(*a))
        t_ids = np.minimum(batch.timesteps, self.max_timestep - 1)
        te = call(self.embed_time, t_ids)
        toks = np.empty((B, L, 3, E))
        toks[:, :, 0] = call(self.embed_return, self._return_input(batch)) + te
        toks[:, :, 1] = call(self.embed_state, batch.states) + te
        toks[:, :, 2] = call(self.embed_action, batch.actions) + te
        x = call(self.embed_ln, toks.reshape(B, 3 * L, E))
        valid = np.repeat(batch.mask, 3, axis=1)
        for blk in self.blocks:
            x = call(blk, x, valid)
        x = call(self.ln_f, x)
        state_h = x.reshape(B, L, 3, E)[:, :, 1]
        return call(self.head, state_h)

    def forward(self, batch: DtSequence) -> np.ndarray:
        """Per-step action logits (B, L, A)."""
        return self._run(batch, True)

    def predict(self, batch: DtSequence) -> np.ndarray:
        return self._run(batch, False)

    def backward(self, g_logits):
        B, L, _ = g_logits.shape
        E = self.cfg.embed_dim
        g_state = self.head.backward(g_logits)
        g_x = np.zeros((B, L, 3, E))
        g_x[:, :, 1] = g_state
        g_x = self.ln_f.backward(g_x.reshape(B, 3 * L, E))
        for blk in reversed(self.blocks):
            g_x = blk.backward(g_x)
        g_tok = self.embed_ln.backward(g_x).reshape(B, L, 3, E)
        self.embed_return.backward(g_tok[:, :, 0])
        self.embed_state.backward(g_tok[:, :, 1])
        self.embed_action.backward(g_tok[:, :, 2])
        self.embed_time.backward(g_tok.sum(axis=2))


def dt_forward(model, batch: DtSequence) -> np.ndarray:
    """Action logits for each step of each window (inference, no caching)."""
    net = model.net_ if hasattr(model, "net_") else model
    return net.predict(batch)


def dt_loss(net: DecisionTransformerNet, batch: DtSequence, train: bool = True):
    """Masked mean cross-entropy over real steps; returns (loss, logits, grad)."""
    logits = net.forward(batch) if train else net.predict(batch)
    B, L, A = logits.shape
    loss, g = softmax_cross_entropy(logits.reshape(B * L, A), batch.actions.reshape(-1),
                                    weights=batch.mask.reshape(-1).astype(float))
    return loss, logits, g.reshape(B, L, A)


class DecisionTransformer(BaseEstimator):
    """Trains the sequence model by maximum likelihood of logged actions."""

    def __init__(self, context_length=10, embed_dim=64, num_layers=2, num_heads=2,
                 use_preference_token=True, epochs=10, batch_size=128, learning_rate=1e-3, seed=0):
        self.context_length = context_length
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.use_preference_token = use_preference_token
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    @property
    def config(self) -> DtConfig:
        return DtConfig(self.context_length, self.embed_dim, self.num_layers, self.num_heads, 0.0,
                        self.use_preference_token, self.seed)

    def fit(self, data: Dataset, y=None):
        if len(data) == 0:
            raise ValueError("cannot fit on an empty dataset")
        cfg = self.config
        init_rng, batch_rng = seed_streams(self.seed, 2)
        seqs = build_sequences(data, cfg.context_length)
        self.K_ = seqs.rtg.shape[-1]
        self.num_actions_ = data.num_actions
        self.n_features_in_ = data.dim
        self.max_timestep_ = data.max_length()
        self.max_return_ = np.stack([tr.rewards.sum(axis=0) for tr in data.trajectories]).max(axis=0)
        self.net_ = DecisionTransformerNet(data.dim, data.num_actions, self.K_, self.max_timestep_, cfg,
                                           rng=init_rng)
        opt = Adam(self.net_, self.learning_rate)
        self.loss_history_ = []
        n = len(seqs)
        for _ in range(self.epochs):
            perm = batch_rng.permutation(n)
            total, weight = 0.0, 0.0
            for start in range(0, n, self.batch_size):
                batch = seqs.take(perm[start:start + self.batch_size])
                loss, _, g = dt_loss(self.net_, batch)
                self.net_.backward(g)
                opt.step()
                w = batch.mask.sum()
                total += loss * w
                weight += w
            self.loss_history_.append(total / weight)
        return self

    def action_accuracy(self, data: Dataset) -> float:
        """Fraction of logged actions that are the argmax at the last position of their window."""
        check_is_fitted(self, "net_")
        seqs = build_sequences(data, self.context_length)
        logits = self._predict_batched(seqs)[:, -1]
        return float((logits.argmax(axis=1) == seqs.actions[:, -1]).mean())

    def _predict_batched(self, seqs: DtSequence, chunk: int = 512) -> np.ndarray:
        return np.concatenate([self.net_.predict(seqs.take(slice(i, i + chunk)))
                               for i in range(0, len(seqs), chunk)])

    def prompt(self, w: PreferenceVector, target_rtg_scale: float = 1.0) -> np.ndarray:
        """Initial return-to-go target for preference ``w``.

        The per-objective best returns seen in training, each scaled by
        ``w_k / max(w)``: the dominant objective is asked for its best
        value, the others proportionally less.
        """
        check_is_fitted(self, "net_")
        wa = w.as_array()
        return target_rtg_scale * self.max_return_ * wa / wa.max()

    def policy(self, w: PreferenceVector, target_rtg_scale: float = 1.0, epsilon: float = 0.05) -> "DtPolicy":
        return DtPolicy(self, w, target_rtg_scale, epsilon)

    def save(self, path, **metadata):
        check_is_fitted(self, "net_")
        meta = {"kind": "decision_transformer", "config": asdict(self.config), "dim": self.n_features_in_,
                "num_actions": self.num_actions_, "K": self.K_, "max_timestep": self.max_timestep_,
                "max_return": self.max_return_.tolist(), "estimator_params": self.get_params()}
        meta.update(metadata)
        save_checkpoint(path, self.net_.parameters(), meta)

    @classmethod
    def load(cls, path) -> "DecisionTransformer":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "decision_transformer":
            raise ValueError(f"{path} is not a decision-transformer checkpoint")
        model = cls(**meta["estimator_params"])
        net = DecisionTransformerNet(meta["dim"], meta["num_actions"], meta["K"], meta["max_timestep"],
                                     DtConfig(**meta["config"]), rng=np.random.default_rng(0))
        net.load_parameters(params)
        model.net_ = net
        model.K_ = meta["K"]
        model.num_actions_ = meta["num_actions"]
        model.n_features_in_ = meta["dim"]
        model.max_timestep_ = meta["max_timestep"]
        model.max_return_ = np.array(meta["max_return"], dtype=float)
        return model


def train_dt(train: Dataset, cfg: DtConfig = DtConfig(), epochs: int = 10, **kw) -> DecisionTransformer:
    return DecisionTransformer(context_length=cfg.context_length, embed_dim=cfg.embed_dim,
                               num_layers=cfg.num_layers, num_heads=cfg.num_heads,
                               use_preference_token=cfg.use_preference_token, epochs=epochs,
                               seed=cfg.seed, **kw).fit(train)


class DtPolicy(Policy):
    """History-dependent policy: the return prompt is decremented by every observed reward."""

    kind = "conditioned"
    markov = False

    def __init__(self, model: DecisionTransformer, w: PreferenceVector, target_rtg_scale: float = 1.0,
                 epsilon: float = 0.05):
        check_is_fitted(model, "net_")
        super().__init__(model.num_actions_)
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.model = model
        self.preference = w
        self.epsilon = epsilon
        self.rtg0 = model.prompt(w, target_rtg_scale)

    def _probs_from_logits(self, logits):
        return mix_uniform(softmax(logits), self.epsilon)

    def _logged_windows(self, tr: Trajectory) -> DtSequence:
        T = len(tr)
        spent = np.vstack([np.zeros((1, self.model.K_)), np.cumsum(tr.rewards, axis=0)[:-1]])
        rtg = self.rtg0[None, :] - spent
        pref = np.tile(self.preference.as_array(), (T, 1))
        return _windows(rtg, pref, tr.states, tr.actions, self.model.context_length)

    def trajectory_probabilities(self, traj: Trajectory) -> np.ndarray:
        if self.epsilon == 1.0:
            return np.full((len(traj), self.num_actions), 1.0 / self.num_actions)
        logits = self.model._predict_batched(self._logged_windows(traj))[:, -1]
        return self._probs_from_logits(logits)

    def dataset_probabilities(self, data: Dataset) -> list[np.ndarray]:
        if self.epsilon == 1.0:
            return [np.full((len(tr), self.num_actions), 1.0 / self.num_actions) for tr in data]
        seqs = concat_sequences(self._logged_windows(tr) for tr in data.trajectories)
        probs = self._probs_from_logits(self.model._predict_batched(seqs)[:, -1])
        bounds = np.cumsum([0] + [len(tr) for tr in data.trajectories])
        return [probs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def start(self, n: int) -> "DtRollout":
        return DtRollout(self, n)


class DtRollout(RolloutContext):
    """Running contexts for ``n`` simulated episodes."""

    def __init__(self, policy: DtPolicy, n: int):
        m = policy.model
        self.policy = policy
        self.L = m.context_length
        H = m.max_timestep_ + self.L + 64
        self.states = np.zeros((n, H, m.n_features_in_))
        self.actions = np.zeros((n, H), dtype=np.int64)
        self.rtg = np.zeros((n, H, m.K_))
        self.rtg[:, 0] = policy.rtg0
        self.t = np.zeros(n, dtype=np.int64)
        self.pref = policy.preference.as_array()

    def current_rtg(self, rows) -> np.ndarray:
        return self.rtg[rows, self.t[rows]]

    def probs(self, states, rows):
        rows = np.asarray(rows)
        t = self.t[rows]
        self.states[rows, t] = states
        if self.policy.epsilon == 1.0:
            return np.full((len(rows), self.policy.num_actions), 1.0 / self.policy.num_actions)
        pos = t[:, None] - (self.L - 1) + np.arange(self.L)[None, :]
        mask = pos >= 0
        src = np.clip(pos, 0, None)
        r = rows[:, None]
        K = self.rtg.shape[-1]
        seq = DtSequence(
            rtg=np.where(mask[..., None], self.rtg[r, src], 0.0),
            pref=np.where(mask[..., None], np.broadcast_to(self.pref, (len(rows), self.L, K)), 0.0),
            states=np.where(mask[..., None], self.states[r, src], 0.0),
            actions=np.where(mask, self.actions[r, src], 0),
            timesteps=np.where(mask, src, 0),
            mask=mask,
        )
        logits = self.policy.model._predict_batched(seq)[:, -1]
        return self.policy._probs_from_logits(logits)

    def observe(self, actions, rewards, rows):
        rows = np.asarray(rows)
        t = self.t[rows]
        self.actions[rows, t] = actions
        self.rtg[rows, t + 1] = self.rtg[rows, t] - rewards
        self.t[rows] = t + 1


def dt_policy(model: DecisionTransformer, w: PreferenceVector, target_rtg_scale: float = 1.0,
              epsilon: float = 0.05) -> DtPolicy:
    return DtPolicy(model, w, target_rtg_scale, epsilon)
