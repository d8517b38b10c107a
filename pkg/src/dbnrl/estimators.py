"""Scikit-learn style wrappers around the network, sampler and optimiser."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError
from .gibbs import PriorHyper, sample_posterior
from .model import ModelParams, PolicyParams, RewardSpec, predict_mean_var
from .optimize import OptimizerConfig, dbn_rl_optimize


def _check_trajectories(states, actions=None):
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[0] == 0 or states.shape[1] < 2:
        raise ConfigError("states must have shape (R, H, n) with R >= 1 and H >= 2")
    if not np.all(np.isfinite(states)):
        raise ConfigError("states contain non-finite values")
    if actions is None:
        return states, None
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 2:
        actions = actions[:, :, None]
    R, H, _ = states.shape
    if actions.ndim != 3 or actions.shape[:2] != (R, H - 1):
        raise ConfigError(f"actions must have shape (R, H-1, m), got {actions.shape}")
    if not np.all(np.isfinite(actions)):
        raise ConfigError("actions contain non-finite values")
    return states, actions


def _column_scale(x, floor):
    """Per-(time, variable) standard deviation with a relative floor."""
    sd = x.std(axis=0)
    top = sd.max(axis=0, keepdims=True)
    top = np.where(top > 0, top, 1.0)
    return np.maximum(sd, floor * top)


class TrajectoryScaler(TransformerMixin, BaseEstimator):
    """Divide each state and action coordinate by its spread at that time step.

    Scales are the across-replication standard deviations, floored at
    ``floor`` times the largest standard deviation of the same variable so
    that constant columns stay finite.  No centring is applied, so the
    transformed network keeps its means in scaled units.
    """

    def __init__(self, floor=1e-2):
        self.floor = floor

    def fit(self, states, actions=None):
        if not 0 < self.floor <= 1:
            raise ConfigError("floor must lie in (0, 1]")
        states, actions = _check_trajectories(states, actions)
        self.state_scale_ = _column_scale(states, self.floor)
        self.action_scale_ = None if actions is None else _column_scale(actions, self.floor)
        self.n_features_in_ = states.shape[2]
        return self

    def transform(self, states, actions=None):
        check_is_fitted(self, "state_scale_")
        states, actions = _check_trajectories(states, actions)
        if states.shape[1:] != self.state_scale_.shape:
            raise ConfigError("states do not match the fitted horizon and dimension")
        out = states / self.state_scale_
        if actions is None:
            return out
        return out, actions / self.action_scale_

    def fit_transform(self, states, actions=None):
        return self.fit(states, actions).transform(states, actions)

    def inverse_transform(self, states, actions=None):
        check_is_fitted(self, "state_scale_")
        out = np.asarray(states, dtype=float) * self.state_scale_
        if actions is None:
            return out
        return out, np.asarray(actions, dtype=float) * self.action_scale_

    def to_dict(self):
        check_is_fitted(self, "state_scale_")
        return {"schema": "dbnrl.scaler", "version": 1, "floor": self.floor,
                "state_scale": self.state_scale_.tolist(),
                "action_scale": self.action_scale_.tolist()}

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != "dbnrl.scaler":
            raise ConfigError("not a scaler document")
        out = cls(floor=doc["floor"])
        out.state_scale_ = np.array(doc["state_scale"], dtype=float)
        out.action_scale_ = np.array(doc["action_scale"], dtype=float)
        if out.state_scale_.ndim != 2 or out.action_scale_.shape[0] != out.state_scale_.shape[0] - 1:
            raise ConfigError("scaler arrays have inconsistent shapes")
        out.n_features_in_ = out.state_scale_.shape[1]
        return out

    # -- carrying network objects between unit systems ---------------------

    def transform_model(self, w):
        """Express a raw-unit network in scaled coordinates."""
        check_is_fitted(self, "state_scale_")
        sx, sa = self.state_scale_, self.action_scale_
        beta_s = w.beta_s * sx[:-1, :, None] / sx[1:, None, :]
        beta_a = w.beta_a * sa[:, :, None] / sx[1:, None, :]
        return ModelParams(w.mu_s / sx, w.mu_a / sa, beta_s, beta_a, w.v / sx, w.sigma / sa,
                           w.mask_s, w.mask_a)

    def transform_reward(self, reward):
        """Reward coefficients for scaled coordinates; reward values are unchanged."""
        check_is_fitted(self, "state_scale_")
        b = np.array(reward.b)
        b[:-1] = b[:-1] * self.action_scale_
        return RewardSpec(reward.m, b, reward.c * self.state_scale_, reward.m_c)

    def transform_policy(self, policy):
        """Raw-unit gains to scaled gains (the box is carried unchanged)."""
        check_is_fitted(self, "state_scale_")
        factor = self.state_scale_[:-1, :, None] / self.action_scale_[:, None, :]
        return PolicyParams(policy.vartheta * factor, policy.lower, policy.upper)

    def inverse_transform_policy(self, policy):
        check_is_fitted(self, "state_scale_")
        factor = self.state_scale_[:-1, :, None] / self.action_scale_[:, None, :]
        return PolicyParams(policy.vartheta / factor, policy.lower / factor,
                            policy.upper / factor)


class DBNPosterior(BaseEstimator):
    """Bayesian network posterior fitted by Gibbs sampling.

    ``prior`` is a :class:`PriorHyper` or a callable ``prior(states, actions)``
    returning one.
    """

    def __init__(self, prior=None, n_draws=100, burn_in=500, thinning=5, init="empirical",
                 random_state=None):
        self.prior = prior
        self.n_draws = n_draws
        self.burn_in = burn_in
        self.thinning = thinning
        self.init = init
        self.random_state = random_state

    def fit(self, states, actions):
        states, actions = _check_trajectories(states, actions)
        prior = self.prior
        if prior is None:
            prior = _default_prior(states, actions)
        elif callable(prior):
            prior = prior(states, actions)
        self.draws_ = sample_posterior(states, actions, prior, self.n_draws, self.random_state,
                                       self.burn_in, self.thinning, self.init)
        self.model_ = self.draws_.mean_model()
        return self

    def predict(self, s1, t):
        """Posterior-mean network prediction of ``s_{t+1}`` under open-loop actions."""
        check_is_fitted(self, "model_")
        w = self.model_
        mean, _ = predict_mean_var(w, PolicyParams.zeros(w.H, w.n, w.m), s1, t)
        return mean


def _default_prior(states, actions):
    """Vague prior centred on a random walk with the sample means."""
    R, H, n = states.shape
    m = actions.shape[2]
    centre = ModelParams(states.mean(axis=0), actions.mean(axis=0),
                         np.broadcast_to(np.eye(n), (H - 1, n, n)), np.zeros((H - 1, m, n)),
                         np.ones((H, n)), np.ones((H - 1, m)))
    return PriorHyper.from_model(centre)


class DBNRLPolicy(BaseEstimator):
    """Linear policy optimised by projected stochastic gradient ascent on posterior draws."""

    def __init__(self, reward=None, s1=None, lower=None, upper=None, iterations=200,
                 draws_per_iteration=10, eta0=0.05, p=0.6, random_state=None):
        self.reward = reward
        self.s1 = s1
        self.lower = lower
        self.upper = upper
        self.iterations = iterations
        self.draws_per_iteration = draws_per_iteration
        self.eta0 = eta0
        self.p = p
        self.random_state = random_state

    def fit(self, draws, policy0=None):
        draws = list(draws)
        if not draws:
            raise ConfigError("need posterior draws")
        if not isinstance(self.reward, RewardSpec):
            raise ConfigError("reward must be a RewardSpec")
        w0 = draws[0]
        if policy0 is None:
            policy0 = PolicyParams.zeros(w0.H, w0.n, w0.m, self.lower, self.upper)
        config = OptimizerConfig(iterations=self.iterations,
                                 draws_per_iteration=self.draws_per_iteration,
                                 eta0=self.eta0, p=self.p)
        s1 = w0.mu_s[0] if self.s1 is None else np.asarray(self.s1, dtype=float)
        self.policy_, self.trace_ = dbn_rl_optimize(draws, self.reward, s1, config, policy0,
                                                    self.random_state)
        avg = {k: np.mean([getattr(w, k) for w in draws], axis=0) for k in ("mu_s", "mu_a")}
        self.mu_s_, self.mu_a_ = avg["mu_s"], avg["mu_a"]
        return self

    def predict(self, t, states):
        """Actions at 1-based step ``t`` for states of shape (R, n)."""
        check_is_fitted(self, "policy_")
        states = np.atleast_2d(np.asarray(states, dtype=float))
        dev = states - self.mu_s_[t - 1]
        return self.mu_a_[t - 1] + dev @ self.policy_.vartheta[t - 1]
