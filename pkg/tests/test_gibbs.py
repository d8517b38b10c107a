import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import inv_gamma_from_log_density, log_joint, normal_from_log_density, simulate_data

from dbnrl.errors import ConfigError
from dbnrl.gibbs import (
    GibbsState,
    PosteriorDraws,
    PosteriorSampler,
    PriorHyper,
    SweepVariates,
    beta_conditional,
    empirical_init,
    gibbs_sweep,
    gibbs_sweep_fast,
    lambda_conditional,
    mu_conditional,
    sample_posterior,
    sigma_conditional,
    v_conditional,
)
from dbnrl.gradient import random_instance
from dbnrl.model import ModelParams


def problem(seed, H=4, n=2, m=1, R=15, masked=False):
    rng = np.random.default_rng(seed)
    w, _, _, _ = random_instance(rng, H, n, m)
    mask_s = None
    if masked:
        mask_s = np.ones((H - 1, n, n), bool)
        mask_s[:, 0, -1] = False
    w = ModelParams(w.mu_s, w.mu_a, w.beta_s, w.beta_a, w.v, w.sigma, mask_s=mask_s)
    states, actions = simulate_data(w, R, rng)
    prior = PriorHyper.from_model(w.replace(beta_s=w.beta_s * 0.5), delta_beta=0.7,
                                  delta_mean=2.0, shape=3.0, scale=0.5)
    current = prior.sample(rng)
    return GibbsState(current), prior, states, actions


def _scalar_density(st, prior, states, actions, array, index):
    def f(x):
        old = array[index]
        array[index] = x
        try:
            return log_joint(st, prior, states, actions)
        finally:
            array[index] = old
    return f


@pytest.mark.parametrize("seed", range(3))
def test_normal_conditionals_match_log_joint(seed):
    st_, prior, states, actions = problem(seed)
    H, n, m = prior.shape
    for t in range(H - 1):
        for j in range(n):
            for k in range(n):
                f = _scalar_density(st_, prior, states, actions, st_.beta_s[t], (j, k))
                mean, var = beta_conditional(st_, prior, states, actions, t, j, k, "s")
                m0, v0 = normal_from_log_density(f, st_.beta_s[t][j, k], 1.0)
                assert mean == pytest.approx(m0, rel=1e-7, abs=1e-9)
                assert var == pytest.approx(v0, rel=1e-7)
        for j in range(m):
            f = _scalar_density(st_, prior, states, actions, st_.beta_a[t], (j, 0))
            mean, var = beta_conditional(st_, prior, states, actions, t, j, 0, "a")
            m0, v0 = normal_from_log_density(f, st_.beta_a[t][j, 0], 1.0)
            assert (mean, var) == pytest.approx((m0, v0), rel=1e-7, abs=1e-9)
            f = _scalar_density(st_, prior, states, actions, st_.mu_a, (t, j))
            mean, var = lambda_conditional(st_, prior, states, actions, t, j)
            m0, v0 = normal_from_log_density(f, st_.mu_a[t, j], 1.0)
            assert (mean, var) == pytest.approx((m0, v0), rel=1e-7, abs=1e-9)
    for t in range(H):
        for k in range(n):
            f = _scalar_density(st_, prior, states, actions, st_.mu_s, (t, k))
            mean, var = mu_conditional(st_, prior, states, actions, t, k)
            m0, v0 = normal_from_log_density(f, st_.mu_s[t, k], 1.0)
            assert (mean, var) == pytest.approx((m0, v0), rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_scale_conditionals_match_log_joint(seed):
    st_, prior, states, actions = problem(seed)
    H, n, m = prior.shape
    for t in range(H):
        for k in range(n):
            f = _scalar_density(st_, prior, states, actions, st_.v2, (t, k))
            a, b = v_conditional(st_, prior, states, actions, t, k)
            a0, b0 = inv_gamma_from_log_density(f, [0.5, 1.0, 2.0])
            assert (a, b) == pytest.approx((a0, b0), rel=1e-7)
    for t in range(H - 1):
        f = _scalar_density(st_, prior, states, actions, st_.sigma2, (t, 0))
        a, b = sigma_conditional(st_, prior, actions, t, 0)
        a0, b0 = inv_gamma_from_log_density(f, [0.5, 1.0, 2.0])
        assert (a, b) == pytest.approx((a0, b0), rel=1e-7)


def test_conditionals_without_data_are_the_priors():
    st_, prior, states, actions = problem(0)
    states, actions = states[:0], actions[:0]
    assert beta_conditional(st_, prior, states, actions, 1, 0, 1) == pytest.approx(
        (prior.beta_s0[1][0, 1], prior.delta_s[1][0, 1] ** 2))
    assert v_conditional(st_, prior, states, actions, 2, 1) == pytest.approx(
        (prior.kappa_v[2, 1] / 2, prior.rho_v[2, 1] / 2))
    assert sigma_conditional(st_, prior, actions, 0, 0) == pytest.approx(
        (prior.kappa_sigma[0, 0] / 2, prior.rho_sigma[0, 0] / 2))
    assert mu_conditional(st_, prior, states, actions, 1, 0) == pytest.approx(
        (prior.mu_s0[1, 0], prior.delta_mu[1, 0] ** 2))
    assert lambda_conditional(st_, prior, states, actions, 0, 0) == pytest.approx(
        (prior.mu_a0[0, 0], prior.delta_lam[0, 0] ** 2))


@pytest.mark.parametrize("masked", [False, True])
def test_compiled_sweep_matches_reference_sweep(masked):
    st_, prior, states, actions = problem(5, H=5, n=3, m=2, R=12, masked=masked)
    fast = GibbsState(st_.to_model())
    rng = np.random.default_rng(9)
    for _ in range(5):
        var = SweepVariates.draw(rng, prior, states.shape[0])
        gibbs_sweep(st_, prior, states, actions, variates=var)
        gibbs_sweep_fast(fast, prior, states, actions, variates=var)
    for name in ("mu_s", "mu_a", "beta_s", "beta_a", "v2", "sigma2"):
        np.testing.assert_allclose(getattr(fast, name), getattr(st_, name), rtol=1e-10, atol=1e-12)
    if masked:
        assert np.all(fast.beta_s[:, 0, -1] == 0.0)


def test_chain_is_reproducible_and_serialises(tmp_path):
    _, prior, states, actions = problem(2)
    a = sample_posterior(states, actions, prior, 4, 123, burn_in=5, thinning=2)
    b = sample_posterior(states, actions, prior, 4, 123, burn_in=5, thinning=2)
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.beta_s, wb.beta_s)
    assert a.meta["burn_in"] == 5 and len(a) == 4
    a.save(tmp_path / "draws")
    manifest = json.loads((tmp_path / "draws" / "manifest.json").read_text())
    assert manifest["thinning"] == 2 and len(manifest["draws"]) == 4
    back = PosteriorDraws.load(tmp_path / "draws")
    for wa, wb in zip(a, back):
        np.testing.assert_array_equal(wa.v, wb.v)
    np.testing.assert_array_equal(back.valid, a.valid)


def test_sampler_rejects_bad_input():
    _, prior, states, actions = problem(1)
    with pytest.raises(ConfigError):
        sample_posterior(states[:, :-1], actions, prior, 2, 0)
    with pytest.raises(ConfigError):
        sample_posterior(states, actions, prior, 0, 0)
    with pytest.raises(ConfigError):
        PosteriorSampler(states, actions, prior, 0, burn_in=-1)
    with pytest.raises(ConfigError):
        PosteriorSampler(states, actions, prior, 0, init="nope")
    bad = states.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ConfigError):
        sample_posterior(bad, actions, prior, 2, 0)
    with pytest.raises(ConfigError):
        PriorHyper.from_model(random_instance(np.random.default_rng(0), 3, 2, 1)[0],
                              delta_beta=0.0)


def test_empirical_start_recovers_noise_free_network():
    rng = np.random.default_rng(6)
    w, _, _, _ = random_instance(rng, 4, 2, 1)
    # initial states vary, every later transition is exact
    v = np.full(w.v.shape, 1e-9)
    v[0] = 1.0
    w = w.replace(v=v)
    states, actions = simulate_data(w, 200, rng)
    prior = PriorHyper.from_model(w)
    init = empirical_init(states, actions, prior, ridge=0.0)
    np.testing.assert_allclose(init.beta_s, w.beta_s, atol=1e-5)
    np.testing.assert_allclose(init.beta_a, w.beta_a, atol=1e-5)


def test_posterior_concentrates_on_truth():
    rng = np.random.default_rng(8)
    w, _, _, _ = random_instance(rng, 3, 2, 1)
    states, actions = simulate_data(w, 2000, rng)
    centre = w.replace(beta_s=np.zeros_like(w.beta_s), beta_a=np.zeros_like(w.beta_a))
    prior = PriorHyper.from_model(centre, delta_beta=5.0, delta_mean=5.0)
    draws = sample_posterior(states, actions, prior, 50, 1, burn_in=100, thinning=2)
    mean = draws.mean_model()
    np.testing.assert_allclose(mean.beta_s, w.beta_s, atol=0.1)
    np.testing.assert_allclose(mean.v, w.v, rtol=0.1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), shape=st.floats(1.5, 6.0), scale=st.floats(0.1, 3.0))
def test_scale_conditional_shape_grows_with_data(seed, shape, scale):
    st_, prior, states, actions = problem(seed % 100)
    prior = PriorHyper.from_model(st_.to_model(), shape=shape, scale=scale)
    a, b = v_conditional(st_, prior, states, actions, 1, 0)
    assert a == pytest.approx(shape + states.shape[0] / 2)
    assert b >= scale
