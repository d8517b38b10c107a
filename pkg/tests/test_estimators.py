import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from dbnrl.errors import ConfigError
from dbnrl.estimators import DBNPosterior, DBNRLPolicy, TrajectoryScaler
from dbnrl.gradient import random_instance
from dbnrl.model import PolicyParams, policy_value, predict_mean_var, sample_trajectories


def data(rng, R=30, H=5, n=3, m=2):
    states = rng.normal(size=(R, H, n)) * rng.uniform(0.5, 20, (H, n))
    actions = rng.normal(size=(R, H - 1, m)) * rng.uniform(0.5, 5, (H - 1, m))
    return states, actions


def test_scaler_round_trip_and_floor():
    rng = np.random.default_rng(0)
    states, actions = data(rng)
    states[:, 0, 1] = 7.0
    sc = TrajectoryScaler(floor=0.05).fit(states, actions)
    zs, za = sc.transform(states, actions)
    np.testing.assert_allclose(zs[:, 1:].std(axis=0), 1.0)
    assert sc.state_scale_[0, 1] == pytest.approx(0.05 * states[:, :, 1].std(axis=0).max())
    back_s, back_a = sc.inverse_transform(zs, za)
    np.testing.assert_allclose(back_s, states)
    np.testing.assert_allclose(back_a, actions)
    again = TrajectoryScaler.from_dict(sc.to_dict())
    np.testing.assert_array_equal(again.transform(states), zs)
    with pytest.raises(ConfigError):
        TrajectoryScaler.from_dict({"schema": "other"})
    with pytest.raises(ConfigError):
        sc.transform(states[:, :-1])
    with pytest.raises(ConfigError):
        TrajectoryScaler(floor=0.0).fit(states)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(0, 4))
def test_scaled_network_describes_the_same_process(seed, t):
    rng = np.random.default_rng(seed)
    w, policy, reward, s1 = random_instance(rng, 5, 3, 2)
    sc = TrajectoryScaler().fit(*data(rng))
    zw = sc.transform_model(w)
    zpol = sc.transform_policy(policy)
    sx = sc.state_scale_
    mean, cov = predict_mean_var(w, policy, s1, t, s1_random=True)
    zmean, zcov = predict_mean_var(zw, zpol, s1 / sx[0], t, s1_random=True)
    np.testing.assert_allclose(zmean, mean / sx[t], rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(zcov, cov / np.outer(sx[t], sx[t]), rtol=1e-9, atol=1e-10)
    # rewards keep their raw values
    zreward = sc.transform_reward(reward)
    assert policy_value(zw, zpol, zreward, s1 / sx[0]) == pytest.approx(
        policy_value(w, policy, reward, s1), rel=1e-10, abs=1e-10)
    back = sc.inverse_transform_policy(zpol)
    np.testing.assert_allclose(back.vartheta, policy.vartheta, rtol=1e-12)


def test_posterior_estimator_fits_and_predicts():
    rng = np.random.default_rng(3)
    w, _, _, _ = random_instance(rng, 4, 2, 1)
    states, actions = sample_trajectories(w, PolicyParams.zeros(4, 2, 1), w.mu_s[0], rng, 300)[:2]
    est = DBNPosterior(n_draws=20, burn_in=50, thinning=1, random_state=0)
    assert clone(est).get_params() == est.get_params()
    est.fit(states, actions)
    assert len(est.draws_) == 20
    pred = est.predict(w.mu_s[0], 3)
    assert pred.shape == (2,)
    np.testing.assert_allclose(pred, states[:, 3].mean(axis=0), atol=0.3)
    with pytest.raises(ConfigError):
        est.fit(states[:, :1], actions)


def test_policy_estimator_is_reproducible():
    rng = np.random.default_rng(4)
    w, _, reward, s1 = random_instance(rng, 4, 2, 1)
    draws = [random_instance(rng, 4, 2, 1)[0] for _ in range(6)]
    kw = dict(reward=reward, s1=s1, lower=-0.5, upper=0.5, iterations=30,
              draws_per_iteration=3, random_state=11)
    a = DBNRLPolicy(**kw).fit(draws)
    b = DBNRLPolicy(**kw).fit(draws)
    np.testing.assert_array_equal(a.policy_.vartheta, b.policy_.vartheta)
    assert a.policy_.feasible()
    acts = a.predict(2, np.zeros((3, 2)))
    expected = a.mu_a_[1] + (np.zeros(2) - a.mu_s_[1]) @ a.policy_.vartheta[1]
    np.testing.assert_allclose(acts, np.tile(expected, (3, 1)))
    with pytest.raises(ConfigError):
        DBNRLPolicy(reward=None).fit(draws)
    with pytest.raises(ConfigError):
        DBNRLPolicy(reward=reward).fit([])
