import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morlbench.baselines import train_cql
from morlbench.cpql import (
    AdaptiveCPQL, ConditionedCPQL, ConservativeParetoQLearning, PreferenceSampler, VectorQNetwork,
    nondominated, policy_at, scalarized_values, train_cpql,
)
from morlbench.env import EnvConfig, generate_dataset, true_policy_value
from morlbench.mdp import PreferenceVector, preference_grid
from morlbench.nn import max_relative_error, numerical_gradient

MORT, LOS = PreferenceVector(1, 0), PreferenceVector(0, 1)


@pytest.fixture(scope="module")
def icu():
    return generate_dataset(EnvConfig(seed=0), 2000)


@pytest.fixture(scope="module")
def trained(icu):
    return ConditionedCPQL(seed=0).fit(icu)


def brute_force(P):
    P = np.asarray(P)
    keep = []
    for i in range(len(P)):
        dominated = any(np.all(P[j] >= P[i]) and np.any(P[j] > P[i]) for j in range(len(P)) if j != i)
        if not dominated:
            keep.append(i)
    return keep


def test_nondominated_examples():
    assert list(nondominated([(1, 0), (0, 1), (0.5, 0.5)])) == [0, 1, 2]
    assert list(nondominated([(1, 1), (0.5, 0.5)])) == [0]
    assert list(nondominated([(1, 1), (1, 1)])) == [0, 1]
    assert list(nondominated(np.zeros((0, 2)))) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2)), min_size=1, max_size=40),
       st.sampled_from([2, 3]))
def test_nondominated_matches_brute_force_with_ties(pts, K):
    P = np.array(pts, dtype=float)[:, :K]
    assert list(nondominated(P)) == brute_force(P)


@pytest.mark.parametrize("variant", ["concat", "preference_attention"])
def test_network_shapes_and_gradients(variant):
    rng = np.random.default_rng(0)
    net = VectorQNetwork(4, 3, 2, variant, hidden=(6, 5), gate_hidden=4, seed=1)
    s = rng.normal(size=(5, 4))
    prefs = rng.dirichlet([1, 1], size=5)
    out = net.forward(s, prefs)
    assert out.shape == (5, 3, 2)
    proj = rng.normal(size=out.shape)
    net.backward(proj)
    num = numerical_gradient(lambda: float((net.predict(s, prefs) * proj).sum()), net.parameters())
    assert max_relative_error(net.gradients(), num) < 1e-4


def test_gate_gains_lie_in_open_interval():
    net = VectorQNetwork(4, 3, 2, "preference_attention", seed=0)
    grid = np.array([p.as_array() for p in preference_grid(0.1)])
    gains = net.gate_gains(grid)
    assert gains.min() > 0.0 and gains.max() < 2.0
    for v in net.gate.parameters().values():
        v *= 1e3
    extreme = net.gate_gains(grid)
    assert extreme.min() >= 0.0 and extreme.max() <= 2.0


def test_sampler_modes():
    rng = np.random.default_rng(0)
    u = PreferenceSampler("uniform").sample(64, 2, rng)
    np.testing.assert_allclose(u.sum(axis=1), 1.0)
    assert u.min() >= 0
    grid = np.array([p.as_array() for p in preference_grid(0.1)])
    np.testing.assert_array_equal(u[:11], grid)
    g = PreferenceSampler("grid").sample(200, 2, rng)
    assert all(any(np.array_equal(row, q) for q in grid) for row in g)
    f = PreferenceSampler("fixed", value=(0.3, 0.7)).sample(3, 2, rng)
    np.testing.assert_array_equal(f, [[0.3, 0.7]] * 3)
    with pytest.raises(ValueError):
        PreferenceSampler("sobol")
    with pytest.raises(ValueError):
        PreferenceSampler("fixed")


def test_single_objective_reduces_to_cql(icu_small):
    cql = train_cql(icu_small, w=(1.0, 0.0), alpha=1.0, iterations=300, seed=2)
    cp = ConservativeParetoQLearning(variant="concat", alpha=1.0, iterations=300, sampler_mode="fixed",
                                     fixed_preference=(1.0,), objectives=("mortality",), seed=2).fit(icu_small)
    dev = np.abs(np.array(cql.loss_history_) - np.array(cp.loss_history_))
    assert dev.max() < 1e-6


def test_myopic_vector_targets_are_raw_rewards(icu_small):
    m = ConservativeParetoQLearning(gamma=0.0, iterations=5).fit(icu_small)
    flat = icu_small.flat()
    prefs = PreferenceSampler().sample(len(flat), 2, np.random.default_rng(0))
    y = m._vector_targets(flat.rewards, flat.next_states, flat.dones, prefs)
    np.testing.assert_array_equal(y, flat.rewards)


def test_scalarized_penalty_is_nonnegative(icu_small):
    m = AdaptiveCPQL(iterations=300, alpha=1.0).fit(icu_small)
    assert min(m.penalty_history_) >= 0.0
    assert m.variant == "preference_attention" and ConditionedCPQL().variant == "concat"


def test_argmax_invariant_to_positive_rescaling():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(50, 5, 2))
    prefs = np.tile([0.3, 0.7], (50, 1))
    base = scalarized_values(q, prefs).argmax(axis=1)
    for c in (0.01, 3.0, 1e4):
        np.testing.assert_array_equal(scalarized_values(c * q, prefs).argmax(axis=1), base)


def test_corner_preference_ignores_the_other_objective():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(50, 5, 2))
    prefs = np.tile([1.0, 0.0], (50, 1))
    base = scalarized_values(q, prefs).argmax(axis=1)
    q2 = q.copy()
    q2[..., 1] = rng.normal(size=(50, 5)) * 100
    np.testing.assert_array_equal(scalarized_values(q2, prefs).argmax(axis=1), base)


def test_policies_are_distributions_on_the_grid(trained, icu):
    X = icu.flat().states[:500]
    for w in preference_grid(0.1):
        p = policy_at(trained, w, 0.05).action_probabilities(X)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert p.min() >= 0.01 - 1e-15


def test_conditioning_changes_actions(trained, icu):
    X = icu.flat().states[:500]
    a = trained.q_values(X, MORT).argmax(axis=1)
    b = trained.q_values(X, LOS).argmax(axis=1)
    assert np.any(a != b)


def test_conditioning_is_effective(trained, icu):
    stats = icu.normalization_stats
    asked = true_policy_value(policy_at(trained, MORT), MORT, rollouts=4000, seed=1, stats=stats)
    other = true_policy_value(policy_at(trained, LOS), MORT, rollouts=4000, seed=1, stats=stats)
    assert asked.value > other.value


def test_checkpoint_metadata_and_reload(tmp_path, icu_small):
    m = train_cpql(icu_small, "preference_attention", iterations=20, seed=1)
    m.save(tmp_path / "m.json")
    meta = json.loads((tmp_path / "m.json").read_text())["metadata"]
    assert meta["estimator_params"]["variant"] == "preference_attention"
    assert meta["K"] == 2 and meta["estimator_params"]["sampler_mode"] == "uniform"
    back = ConservativeParetoQLearning.load(tmp_path / "m.json")
    X = icu_small.flat().states
    np.testing.assert_array_equal(back.q_values(X, MORT), m.q_values(X, MORT))
    with pytest.raises(ValueError):
        m.q_values(X, np.array([0.2, 0.3, 0.5]))
