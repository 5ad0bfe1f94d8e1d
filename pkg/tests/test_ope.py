import json

import numpy as np
import pytest

from chain import chain_dataset, chain_policy, chain_value
from morlbench.baselines import train_bc
from morlbench.env import ClinicianPolicy, EnvConfig, generate_dataset, true_policy_value
from morlbench.mdp import PreferenceVector, Trajectory, make_dataset, scalarize
from morlbench.ope import (
    BootstrapError, DegenerateWeightsError, FqeDivergenceError, OpeEstimate, bootstrap_ci, fit_behavior,
    fit_fqe, fqe, ratio_trace, subset_estimator, wis, wis_components,
)
from morlbench.policies import TabularPolicy, mix_uniform

MORT, EVEN = PreferenceVector(1, 0), PreferenceVector(0.5, 0.5)


@pytest.fixture(scope="module")
def icu():
    return generate_dataset(EnvConfig(seed=3), 2000)


@pytest.fixture(scope="module")
def behavior(icu):
    return fit_behavior(icu, seed=0)


def one_state(actions, rewards):
    trajs = [Trajectory(f"e{i}", np.ones((1, 1)), [a], [r], [True])
             for i, (a, r) in enumerate(zip(actions, rewards))]
    return make_dataset(trajs, 3)


def test_hand_fixture():
    d = one_state([0, 1], [(1.0, 0.0), (0.0, 0.0)])
    pi, pb = TabularPolicy([0.5, 0.25, 0.25]), TabularPolicy([0.25, 0.5, 0.25])
    value, trace = wis(pi, d, pb, MORT)
    np.testing.assert_array_equal(trace.rho[:, 0], [2.0, 0.5])
    assert trace.w[0] == 1.25
    assert value == 0.8


def test_identity_policy_gives_empirical_mean(icu, behavior):
    for gamma in (0.9, 1.0):
        value, trace = wis(behavior, icu, behavior, EVEN, gamma=gamma)
        assert np.all(trace.rho == 1.0) and np.all(trace.w == 1.0)
        assert abs(value - scalarize(icu.returns(gamma), EVEN).mean()) < 1e-9


def test_trace_recurrences_and_padding(icu, behavior):
    trace = ratio_trace(ClinicianPolicy(5, 0.4, icu.normalization_stats), icu, behavior)
    trace.check()
    np.testing.assert_allclose(trace.w, trace.cumulative.mean(axis=0))
    i = int(np.argmin(trace.lengths))
    T = trace.lengths[i]
    assert np.all(trace.rho[i, T:] == 1.0)
    assert np.all(trace.cumulative[i, T:] == trace.cumulative[i, T - 1])
    assert trace.rho.min() >= 1 / 20 and trace.rho.max() <= 20


def test_trace_dump(tmp_path, two_episodes):
    pol = TabularPolicy([0.2, 0.3, 0.5])
    _, trace = wis(pol, two_episodes, TabularPolicy([1 / 3] * 3), MORT)
    trace.dump(tmp_path / "trace.jsonl")
    recs = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert [r["episode_id"] for r in recs] == ["a", "b"]
    assert len(recs[0]["rho"]) == 3 and len(recs[1]["cumulative"]) == 1
    np.testing.assert_allclose(recs[0]["rho"], [0.6, 0.9, 1.5])


def test_zero_ratio_without_clipping_is_degenerate():
    d = one_state([1, 1], [(1.0, 0.0), (0.0, 0.0)])
    pi, pb = TabularPolicy([1.0, 0.0, 0.0]), TabularPolicy([0.25, 0.5, 0.25])
    with pytest.raises(DegenerateWeightsError):
        wis(pi, d, pb, MORT, rho_clip=None)
    value, _ = wis(pi, d, pb, MORT, rho_clip=20)
    assert value == 0.5
    with pytest.raises(DegenerateWeightsError):
        wis(pi, d, TabularPolicy([0.5, 0.0, 0.5]), MORT)
    with pytest.raises(ValueError):
        wis(pi, d, pb, MORT, rho_clip=0.5)


def test_estimate_stays_within_the_return_range(icu, behavior):
    for eps in (0.0, 0.6, 1.0):
        value, _ = wis(ClinicianPolicy(5, eps, icu.normalization_stats), icu, behavior, EVEN)
        assert 0.0 <= value <= 1.0


def test_floor_arithmetic():
    np.testing.assert_allclose(mix_uniform(np.array([[1.0, 0, 0, 0, 0]]), 5 * 1e-3),
                               [[1 - 4e-3, 1e-3, 1e-3, 1e-3, 1e-3]])


def test_single_action_dataset_is_floored(icu_small):
    trajs = [Trajectory(tr.id, tr.states, np.zeros(len(tr), dtype=int), tr.rewards, tr.dones)
             for tr in icu_small.trajectories[:50]]
    d = make_dataset(trajs, 5)
    b = fit_behavior(d, p_min=1e-3, epochs=500, validation_fraction=0.0)
    p = b.action_probabilities(d.flat().states)
    np.testing.assert_allclose(p[:, 0], 1 - 4e-3, atol=5e-3)
    assert p.min() >= 1e-3
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_floor_validation(icu_small):
    for bad in (0.0, 0.2, -1e-3):
        with pytest.raises(ValueError):
            fit_behavior(icu_small, p_min=bad)


def test_behavior_model_recovers_generator(icu, behavior):
    truth = ClinicianPolicy(5, 0.3, icu.normalization_stats)
    X = icu.flat().states[::5]
    tv = 0.5 * np.abs(truth.action_probabilities(X) - behavior.action_probabilities(X)).sum(axis=1)
    assert tv.mean() < 0.1


def test_behavior_bag_averages_its_members(icu_small):
    X = icu_small.flat().states[:100]
    b = fit_behavior(icu_small, p_min=1e-3, n_models=3, epochs=3)
    members = [m.predict_proba(X) for m in b.classifiers]
    assert len(members) == 3 and not np.array_equal(members[0], members[1])
    np.testing.assert_allclose(b.action_probabilities(X), (1 - 5e-3) * np.mean(members, axis=0) + 1e-3)
    with pytest.raises(ValueError):
        fit_behavior(icu_small, n_models=0)


def test_behavior_fit_is_deterministic(icu_small):
    X = icu_small.flat().states[:100]
    a = fit_behavior(icu_small, seed=4, epochs=3).action_probabilities(X)
    b = fit_behavior(icu_small, seed=4, epochs=3).action_probabilities(X)
    np.testing.assert_array_equal(a, b)


def _bootstrap_sd(comp, reps=300):
    rng = np.random.default_rng(0)
    return np.std([comp.value(rng.integers(0, len(comp), len(comp))) for _ in range(reps)])


def test_near_behavior_wis_agrees_with_oracle(icu, behavior):
    stats = icu.normalization_stats
    bc = train_bc(icu, seed=1)
    cases = [(bc, behavior), (ClinicianPolicy(5, 0.4, stats), ClinicianPolicy(5, 0.3, stats))]
    for pol, beh in cases:
        comp = wis_components(pol, icu, beh, EVEN)
        truth = true_policy_value(pol, EVEN, rollouts=20000, seed=9, stats=stats).value
        assert abs(comp.value() - truth) < 3 * _bootstrap_sd(comp)


# ---------------------------------------------------------------- FQE


def test_fqe_one_state_myopic():
    rng = np.random.default_rng(0)
    acts = rng.integers(0, 3, 600)
    r = np.array([0.2, 0.9, 0.5])
    d = one_state(acts, [(r[a], 0.0) for a in acts])
    pi = np.array([0.1, 0.6, 0.3])
    v = fqe(TabularPolicy(pi), d, MORT, gamma=0.0, iterations=3)
    assert abs(v - pi @ r) < 0.02


def test_fqe_zero_rewards(icu_small):
    trajs = [Trajectory(tr.id, tr.states, tr.actions, np.zeros_like(tr.rewards), tr.dones)
             for tr in icu_small.trajectories[:100]]
    d = make_dataset(trajs, 5)
    v = fqe(ClinicianPolicy(5, 0.3, icu_small.normalization_stats), d, EVEN, iterations=5, steps_per_iteration=50)
    assert abs(v) < 1e-3
    assert fit_fqe(ClinicianPolicy(5, 0.3), d, EVEN, iterations=2, steps_per_iteration=5).mean_abs_q == [0.0, 0.0]


@pytest.mark.parametrize("w", [(1.0, 0.0), (0.5, 0.5)])
def test_fqe_matches_dynamic_programming(w):
    v = fqe(chain_policy(), chain_dataset(), PreferenceVector(*w), gamma=0.9)
    assert abs(v - chain_value(w, 0.9)) < 0.02


def test_fqe_divergence_guard():
    with pytest.raises(FqeDivergenceError):
        fqe(chain_policy(), chain_dataset(5), MORT, gamma=1.0, iterations=10, steps_per_iteration=20,
            learning_rate=1e4)


def test_fqe_result_resamples_initial_values():
    res = fit_fqe(chain_policy(), chain_dataset(5), MORT, gamma=0.9, iterations=3, steps_per_iteration=20)
    assert res.estimate() == res.value
    assert res.estimate([0, 0]) == pytest.approx(res.initial_values[0])
    assert len(res.mean_abs_q) == 3
    with pytest.raises(ValueError):
        fit_fqe(chain_policy(), chain_dataset(5), MORT, iterations=0)


# ---------------------------------------------------------------- bootstrap


def test_constant_estimator_has_zero_width():
    est = bootstrap_ci(lambda idx: 0.42, 50, B=200)
    assert est.value == est.ci_lower == est.ci_upper == 0.42
    assert est.ci_width == 0.0


def test_bootstrap_is_deterministic(icu, behavior):
    comp = wis_components(ClinicianPolicy(5, 0.4, icu.normalization_stats), icu, behavior, EVEN)
    a = bootstrap_ci(comp, icu, B=200, seed=5)
    b = bootstrap_ci(comp, icu, B=200, seed=5)
    assert a == b
    assert a.ci_lower <= a.value <= a.ci_upper
    assert a.half_width == pytest.approx(a.ci_width / 2)


def test_width_stable_in_resample_count(icu, behavior):
    comp = wis_components(ClinicianPolicy(5, 0.4, icu.normalization_stats), icu, behavior, EVEN)
    small = bootstrap_ci(comp, icu, B=500, seed=1).ci_width
    large = bootstrap_ci(comp, icu, B=2000, seed=1).ci_width
    assert abs(large - small) / large < 0.2


def test_failed_resamples_are_redrawn():
    x = np.arange(40, dtype=float)

    def flaky(idx):
        if idx is not None and idx[0] % 2:
            raise ArithmeticError("odd start")
        return x.mean() if idx is None else x[idx].mean()

    est = bootstrap_ci(flaky, 40, B=100)
    assert est.ci_lower < est.value < est.ci_upper

    def broken(idx):
        if idx is None:
            return 0.0
        raise DegenerateWeightsError("always")

    with pytest.raises(BootstrapError):
        bootstrap_ci(broken, 40, B=100)


def test_bootstrap_validation():
    with pytest.raises(ValueError):
        bootstrap_ci(lambda i: 0.0, 10, B=50)
    with pytest.raises(ValueError):
        bootstrap_ci(lambda i: 0.0, 10, level=1.0)
    with pytest.raises(ValueError):
        OpeEstimate(1.0, 0.0, 0.5, 100, "wis")


def test_subset_estimator(icu_small):
    est = subset_estimator(len, icu_small)
    assert est(None) == len(icu_small)
    assert est([0, 0, 1]) == 3
