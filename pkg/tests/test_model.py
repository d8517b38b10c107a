import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbnrl.gradient import random_instance
from dbnrl.model import (
    ModelParams,
    PolicyParams,
    RewardSpec,
    closed_loop,
    cumulative_rewards,
    flatten_gains,
    linearize_flow,
    linearize_ode,
    mean_deviations,
    pathway_product,
    policy_value,
    predict_mean_var,
    sample_trajectories,
    unflatten_gains,
    validate_model,
)


def joint_gaussian(w, policy, s1):
    """Oracle: stack the whole trajectory as x = mean + L e and read off moments.

    Each state is written as an explicit linear function of the initial
    state and every earlier innovation, built column by column instead of
    through the closed-loop recursion.
    """
    H, n = w.H, w.n
    # coefficient of innovation block j (j = 1..H-1 for s_{j+1}) in s_t
    coef = {}
    means = [np.asarray(s1, dtype=float)]
    for t in range(1, H):
        prev = means[-1] - w.mu_s[t - 1]
        a = w.mu_a[t - 1] + policy.vartheta[t - 1].T @ prev
        step = w.beta_s[t - 1].T @ prev + w.beta_a[t - 1].T @ (a - w.mu_a[t - 1])
        means.append(w.mu_s[t] + step)
        M = w.beta_s[t - 1].T + w.beta_a[t - 1].T @ policy.vartheta[t - 1].T
        for j in list(coef):
            if j[0] == t - 1:
                coef[(t, j[1])] = M @ coef[j]
        coef[(t, t)] = np.diag(w.v[t])
    covs = []
    for t in range(H):
        C = np.zeros((n, n))
        for j in range(1, t + 1):
            L = coef[(t, j)]
            C += L @ L.T
        covs.append(C)
    return np.array(means), np.array(covs)


@pytest.mark.parametrize("seed", range(5))
def test_prediction_matches_joint_gaussian_oracle(seed):
    rng = np.random.default_rng(seed)
    w, policy, _, s1 = random_instance(rng, 7, 3, 2)
    means, covs = joint_gaussian(w, policy, s1)
    for t in range(w.H):
        mean, cov = predict_mean_var(w, policy, s1, t)
        np.testing.assert_allclose(mean, means[t], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cov, covs[t], rtol=1e-12, atol=1e-12)


def test_random_initial_state_adds_propagated_variance(small_instance):
    w, policy, _, s1 = small_instance
    _, fixed = predict_mean_var(w, policy, s1, 3)
    _, random = predict_mean_var(w, policy, s1, 3, s1_random=True)
    R = pathway_product(w, policy, 1, 3)
    np.testing.assert_allclose(random - fixed, R @ np.diag(w.v[0] ** 2) @ R.T, atol=1e-12)


def test_pathway_product_is_ordered_product(small_instance):
    w, policy, _, _ = small_instance
    A = closed_loop(w, policy)
    np.testing.assert_allclose(pathway_product(w, policy, 2, 4), A[3] @ A[2] @ A[1])
    np.testing.assert_array_equal(pathway_product(w, policy, 3, 2), np.eye(w.n))
    with pytest.raises(IndexError):
        pathway_product(w, policy, 0, 2)


def test_policy_value_sums_expected_step_rewards(small_instance):
    w, policy, reward, s1 = small_instance
    total = 0.0
    for t in range(w.H):
        mean, _ = predict_mean_var(w, policy, s1, t)
        total += reward.m[t] + reward.c[t] @ mean
        if t < w.H - 1:
            a = w.mu_a[t] + policy.vartheta[t].T @ (mean - w.mu_s[t])
            total += reward.b[t] @ a
    assert policy_value(w, policy, reward, s1) == pytest.approx(total, rel=1e-12)


def test_policy_value_agrees_with_simulated_rewards(small_instance):
    w, policy, reward, s1 = small_instance
    states, actions = sample_trajectories(w, policy, s1, np.random.default_rng(1), 40000)
    r = cumulative_rewards(reward, states, actions)
    se = r.std(ddof=1) / np.sqrt(r.size)
    assert abs(r.mean() - policy_value(w, policy, reward, s1)) < 4 * se


def test_invalid_model_gets_penalty():
    rng = np.random.default_rng(0)
    w, policy, reward, s1 = random_instance(rng, 4, 2, 1)
    bad = w.replace(v=np.where(np.arange(w.n) == 0, 0.0, w.v))
    assert not validate_model(bad)
    assert policy_value(bad, policy, reward, s1) == w.H * reward.m_c
    huge = w.replace(beta_s=w.beta_s * 1e12)
    assert not validate_model(huge)


def test_masked_edges_are_zero():
    rng = np.random.default_rng(3)
    w, _, _, _ = random_instance(rng, 4, 3, 1)
    mask = np.ones(w.beta_s.shape, bool)
    mask[:, 0, 2] = False
    masked = ModelParams(w.mu_s, w.mu_a, w.beta_s, w.beta_a, w.v, w.sigma, mask_s=mask)
    assert np.all(masked.beta_s[:, 0, 2] == 0.0)
    with pytest.raises(ValueError):
        masked.beta_s[0, 0, 0] = 1.0


def test_shape_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((2, 2, 2)),
                    np.zeros((2, 1, 2)), np.ones((3, 2)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((2, 2, 1)), lower=1.0, upper=0.0)
    with pytest.raises(ValueError):
        RewardSpec(np.zeros(3), np.zeros((3, 1)), np.zeros((3, 2)), m_c=1.0)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 5), n=st.integers(1, 4), m=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_flatten_round_trip(T, n, m, seed):
    g = np.random.default_rng(seed).normal(size=(T, n, m))
    theta = flatten_gains(g)
    np.testing.assert_array_equal(unflatten_gains(theta, g.shape), g)
    # column-major vec of each step's gain matrix
    np.testing.assert_array_equal(theta[: n * m], g[0].reshape(-1, order="F"))


@settings(max_examples=25, deadline=None)
@given(H=st.integers(2, 6), n=st.integers(1, 4), m=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_model_document_round_trip(H, n, m, seed):
    w, policy, _, _ = random_instance(np.random.default_rng(seed), H, n, m)
    doc = json.loads(json.dumps(w.to_dict()))
    back = ModelParams.from_dict(doc)
    for k in ("mu_s", "mu_a", "beta_s", "beta_a", "v", "sigma", "mask_s", "mask_a"):
        np.testing.assert_array_equal(getattr(back, k), getattr(w, k))
    boxed = PolicyParams(policy.vartheta, lower=-np.inf, upper=2.0)
    back = PolicyParams.from_dict(json.loads(json.dumps(boxed.to_dict())))
    np.testing.assert_array_equal(back.lower, boxed.lower)
    np.testing.assert_array_equal(back.vartheta, boxed.vartheta)


@settings(max_examples=25, deadline=None)
@given(H=st.integers(2, 8), n=st.integers(1, 4), m=st.integers(1, 2), seed=st.integers(0, 2**31))
def test_covariance_is_symmetric_psd(H, n, m, seed):
    w, policy, _, s1 = random_instance(np.random.default_rng(seed), H, n, m)
    _, cov = predict_mean_var(w, policy, s1, H - 1, s1_random=True)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > -1e-10


@settings(max_examples=25, deadline=None)
@given(H=st.integers(2, 8), n=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_deviation_from_means_start_vanishes(H, n, seed):
    w, policy, reward, _ = random_instance(np.random.default_rng(seed), H, n, 1)
    d = mean_deviations(w, policy, w.mu_s[0])
    np.testing.assert_array_equal(d, 0.0)
    # starting at the means, gains do not change the value
    zero = PolicyParams.zeros(H, n, 1)
    assert policy_value(w, policy, reward, w.mu_s[0]) == pytest.approx(
        policy_value(w, zero, reward, w.mu_s[0]), rel=1e-12, abs=1e-12)


def test_linearisations_are_exact_for_linear_dynamics():
    rng = np.random.default_rng(4)
    n, m, H, dt = 3, 1, 5, 0.5
    F = rng.normal(size=(n, n))
    G = rng.normal(size=(n, m))
    anchor_s = rng.normal(size=(H, n))
    anchor_a = rng.normal(size=(H - 1, m))
    w = linearize_ode(lambda s, a: F @ s + G @ a, anchor_s, anchor_a, dt)
    np.testing.assert_allclose(w.beta_s[0], (np.eye(n) + dt * F).T, atol=1e-8)
    np.testing.assert_allclose(w.beta_a[0], (dt * G).T, atol=1e-8)
    np.testing.assert_allclose(w.mu_s[1], anchor_s[0] + dt * (F @ anchor_s[0] + G @ anchor_a[0]))

    M = rng.normal(size=(n, n))
    flow = linearize_flow(lambda t, s, a: M @ s + G @ a + t, anchor_s, anchor_a)
    np.testing.assert_allclose(flow.beta_s[2], M.T, atol=1e-8)
    np.testing.assert_allclose(flow.mu_s[3], M @ anchor_s[2] + G @ anchor_a[2] + 2, atol=1e-12)
