"""End-to-end studies on the simulated citrate fermentation process.

The network is fitted in standardised coordinates: every state and action
coordinate is divided by its across-batch standard deviation at that time
step (:class:`TrajectoryScaler`).  Policy gains and the feasible box
therefore read as "action standard deviations per state standard deviation",
and the reward coefficients are rescaled so that reward values stay in raw
units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .estimators import TrajectoryScaler
from .gibbs import PriorHyper, sample_posterior
from .kinetics import (
    DEFAULT_S1,
    KINETIC_VARS,
    STATE_INDEX,
    STATE_VARS,
    KineticParams,
    NoiseSpec,
    default_reference_policy,
    generate_dataset,
    integrate_interval,
    rates,
    reference_trajectory,
)
from .model import ModelParams, PolicyParams, RewardSpec, linearize_flow, linearize_ode
from .optimize import OptimizerConfig, dbn_rl_optimize

# Gain bounds per state variable, in standardised units.
CASE_STUDY_BOX = {
    "X_f": (0.0, 0.3),
    "C": (0.0, 0.3),
    "S": (-0.1, 0.1),
    "N": (-0.1, 0.02),
    "V": (-0.7, 0.5),
}


# Optimiser settings of the case study: 50 draws per iteration from the
# posterior pool and enough iterations for the step size to settle.
CASE_STUDY_OPTIMIZER = OptimizerConfig(iterations=1000, draws_per_iteration=50)


@dataclass(frozen=True)
class GibbsConfig:
    n_draws: int = 100
    burn_in: int = 500
    thinning: int = 5

    def __post_init__(self):
        if self.n_draws < 1 or self.burn_in < 0 or self.thinning < 1:
            raise ConfigError("gibbs needs n_draws >= 1, burn_in >= 0, thinning >= 1")


class Scenario:
    """Pieces shared by the process studies.

    Subclasses provide raw-unit data generation, a mechanistic prior centre,
    the reward, the gain box, the nominal initial state and an evaluator.
    """

    def network_prior(self, scaler):
        w = scaler.transform_model(self.mechanistic_model())
        return PriorHyper.from_model(w, self.prior_delta_beta, self.prior_delta_mean,
                                     self.prior_shape, self.prior_scale)

    def initial_policy(self):
        lower, upper = self.box_arrays()
        return PolicyParams(np.clip(np.zeros_like(lower), lower, upper), lower, upper)

    def controller(self, scaler, mean_model, policy):
        return LinearController.from_fit(scaler, mean_model, policy)


@dataclass
class FermentationScenario(Scenario):
    """Simulator, prior centre, reward and box for the fed-batch study."""

    kappa: float = 10.0
    horizon_steps: int = 36
    dt_obs: float = 4.0
    epsilon: float = 0.3
    feed_cost: float = 534.52
    titer_price: float = 1.29
    harvest_cost: float = 15.0
    m_c: float = -1000.0
    box: dict = field(default_factory=lambda: dict(CASE_STUDY_BOX))
    substep: float = 0.1
    capacity: float = 3.0
    params: KineticParams = field(default_factory=KineticParams)
    prior_delta_beta: float = 1.0
    prior_delta_mean: float = 1.0
    prior_shape: float = 2.0
    prior_scale: float = 1.0

    def __post_init__(self):
        if self.horizon_steps < 2:
            raise ConfigError("horizon_steps must be at least 2")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        unknown = set(self.box) - set(STATE_VARS)
        if unknown:
            raise ConfigError(f"box names unknown state variables {sorted(unknown)}")
        self.reference = default_reference_policy(self.horizon_steps, self.dt_obs)
        self.profile = reference_trajectory(self.reference.mean, None, self.params,
                                            self.dt_obs, self.substep, self.capacity)
        self.noise = NoiseSpec(self.kappa, self.profile, self.dt_obs)

    @property
    def H(self):
        return self.horizon_steps

    @property
    def n(self):
        return len(STATE_VARS)

    @property
    def m(self):
        return 1

    @property
    def state_names(self):
        return list(STATE_VARS)

    @property
    def action_names(self):
        return ["F_S"]

    # -- data --------------------------------------------------------------

    def generate(self, R, rng, policy_mode="epsilon_greedy", **kwargs):
        """Simulate ``R`` batches; returns a kinetics :class:`Dataset`."""
        if policy_mode == "epsilon_greedy":
            kwargs.setdefault("reference", self.reference)
            kwargs.setdefault("epsilon", self.epsilon)
        return generate_dataset(R, policy_mode, self.horizon_steps, self.noise, rng,
                                params=self.params, dt_obs=self.dt_obs, substep=self.substep,
                                capacity=self.capacity, **kwargs)

    def network_data(self, dataset):
        """Raw-unit (states (R, H, n), actions (R, H-1, 1)) for the network."""
        return dataset.observed(), dataset.actions[:, :, None]

    # -- model pieces ------------------------------------------------------

    def step_map(self, t, s, a):
        """Deterministic simulator step over interval ``t`` (0-based), raw units.

        The unobserved lipid level is taken from the reference run.
        """
        x = np.empty(len(KINETIC_VARS))
        x[STATE_INDEX] = s
        x[KINETIC_VARS.index("L")] = self.profile[t, KINETIC_VARS.index("L")]
        feed = max(float(np.asarray(a).ravel()[0]), 0.0)
        x = integrate_interval(x, feed, t * self.dt_obs, self.dt_obs, self.params,
                               NoiseSpec(), None, self.substep)
        return x[STATE_INDEX]

    def vector_field(self, t):
        """Drift of the observed state at step ``t`` with lipid held at the reference."""
        lipid = self.profile[t, KINETIC_VARS.index("L")]

        def f(s, a):
            x = np.empty(len(KINETIC_VARS))
            x[STATE_INDEX] = s
            x[KINETIC_VARS.index("L")] = lipid
            dx, _ = rates(x, float(np.asarray(a).ravel()[0]), self.params)
            return dx[STATE_INDEX]

        return f

    def mechanistic_model(self, method="flow"):
        """Linearisation along the reference run, in raw units.

        ``"flow"`` differentiates the simulator's own interval map;
        ``"euler"`` takes one explicit Euler step of the drift.
        """
        anchors = self.profile[:, STATE_INDEX]
        feeds = self.reference.mean[:, None]
        if method == "flow":
            return linearize_flow(self.step_map, anchors, feeds)
        if method != "euler":
            raise ConfigError(f"unknown linearisation method {method!r}")
        H, n = anchors.shape
        mu_s = np.empty((H, n))
        mu_s[0] = anchors[0]
        beta_s = np.empty((H - 1, n, n))
        beta_a = np.empty((H - 1, 1, n))
        for t in range(H - 1):
            step = linearize_ode(self.vector_field(t), anchors[t:t + 2], feeds[t:t + 1],
                                 self.dt_obs)
            mu_s[t + 1] = step.mu_s[1]
            beta_s[t] = step.beta_s[0]
            beta_a[t] = step.beta_a[0]
        return ModelParams(mu_s, feeds, beta_s, beta_a, np.ones((H, n)), np.ones((H - 1, 1)))

    def reward(self):
        """Raw-unit reward: feed cost per step, titer revenue at harvest."""
        H = self.H
        m = np.zeros(H)
        m[-1] = -self.harvest_cost
        b = np.full((H, 1), -self.feed_cost)
        b[-1] = 0.0
        c = np.zeros((H, self.n))
        c[-1, STATE_VARS.index("C")] = self.titer_price
        return RewardSpec(m, b, c, self.m_c)

    def box_arrays(self):
        lower = np.zeros((self.H - 1, self.n, self.m))
        upper = np.zeros((self.H - 1, self.n, self.m))
        for name, (lo, hi) in self.box.items():
            k = STATE_VARS.index(name)
            lower[:, k, :] = lo
            upper[:, k, :] = hi
        return lower, upper

    def s1(self):
        x = np.array([DEFAULT_S1[k] for k in KINETIC_VARS])
        return x[STATE_INDEX]

    # -- evaluation --------------------------------------------------------

    def realized_reward(self, dataset):
        C = dataset.states[:, -1, KINETIC_VARS.index("C")]
        cost = self.feed_cost * dataset.actions.sum(axis=1)
        return -self.harvest_cost + self.titer_price * C - cost

    def evaluate(self, rollouts, seed, controller=None, schedule=None):
        """Roll a controller (or fixed schedule) on the simulator.

        Rollouts with the same ``seed`` share initial states and noise, so
        different policies evaluated with one seed are paired.
        """
        if controller is not None:
            def feed(i, observed):
                return controller(i, observed)[:, 0]
            ds = self.generate(rollouts, seed, "policy", policy=feed)
        else:
            sched = self.reference.mean if schedule is None else schedule
            ds = self.generate(rollouts, seed, "fixed_schedule", schedule=sched)
        return {
            "reward": self.realized_reward(ds),
            "titer": ds.states[:, -1, KINETIC_VARS.index("C")],
        }


@dataclass
class FittedPipeline:
    """Scaler, posterior and optimised policy for one data set."""

    scaler: TrajectoryScaler
    draws: object
    policy: PolicyParams
    trace: object

    def mean_model(self):
        return self.draws.mean_model()


def fit_pipeline(scenario, states, actions, gibbs, optimizer, seed):
    """Standardise, sample the posterior and optimise the policy gains."""
    gibbs_seed, opt_seed = (int(s.generate_state(1)[0])
                            for s in np.random.SeedSequence(seed).spawn(2))
    scaler = TrajectoryScaler().fit(states, actions)
    zs, za = scaler.transform(states, actions)
    draws = sample_posterior(zs, za, scenario.network_prior(scaler), gibbs.n_draws, gibbs_seed,
                             gibbs.burn_in, gibbs.thinning)
    pool = [w for w, ok in zip(draws, draws.valid) if ok] or list(draws)
    reward = scaler.transform_reward(scenario.reward())
    s1 = scenario.s1() / scaler.state_scale_[0]
    policy, trace = dbn_rl_optimize(pool, reward, s1, optimizer, scenario.initial_policy(),
                                    opt_seed)
    return FittedPipeline(scaler, draws, policy, trace)


def macro_replication(scenario, R, seed, gibbs=GibbsConfig(), optimizer=CASE_STUDY_OPTIMIZER,
                      rollouts=50):
    """Data -> posterior -> optimised policy -> paired evaluation for one seed."""
    data_seed, fit_seed, eval_seed = (int(s.generate_state(1)[0])
                                      for s in np.random.SeedSequence(seed).spawn(3))
    dataset = scenario.generate(R, data_seed)
    fitted = fit_pipeline(scenario, *scenario.network_data(dataset), gibbs, optimizer, fit_seed)
    mean_model = fitted.mean_model()
    res = {
        "optimized": scenario.evaluate(
            rollouts, eval_seed, scenario.controller(fitted.scaler, mean_model, fitted.policy)),
        "initial": scenario.evaluate(
            rollouts, eval_seed,
            scenario.controller(fitted.scaler, mean_model, scenario.initial_policy())),
        "reference": scenario.evaluate(rollouts, eval_seed),
    }
    return res, fitted


@dataclass
class LinearController:
    """Deployable linear rule ``a_t = lambda_t + K_t.T (s_t - mu_t)`` in raw units.

    Built from a network and gains expressed in standardised coordinates;
    ``K_t[j, k] = vartheta_t[j, k] * action_scale[t, k] / state_scale[t, j]``.
    """

    mu_s: np.ndarray
    mu_a: np.ndarray
    gains: np.ndarray

    @classmethod
    def from_fit(cls, scaler, mean_model, policy):
        sx, sa = scaler.state_scale_, scaler.action_scale_
        gains = np.asarray(policy.vartheta) * sa[:, None, :] / sx[:-1, :, None]
        return cls(np.asarray(mean_model.mu_s) * sx, np.asarray(mean_model.mu_a) * sa, gains)

    def __call__(self, i, states):
        """Actions at 0-based decision ``i`` for raw states of shape (R, n)."""
        dev = np.asarray(states, dtype=float) - self.mu_s[i]
        return self.mu_a[i] + dev @ self.gains[i]

    def to_dict(self):
        return {"schema": "dbnrl.controller", "version": 1,
                "mu_s": self.mu_s.tolist(), "mu_a": self.mu_a.tolist(),
                "gains": self.gains.tolist()}

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != "dbnrl.controller":
            raise ConfigError("not a controller document")
        mu_s = np.array(doc["mu_s"], dtype=float)
        mu_a = np.array(doc["mu_a"], dtype=float)
        gains = np.array(doc["gains"], dtype=float)
        H, n = mu_s.shape
        if mu_a.shape[0] != H - 1 or gains.shape != (H - 1, n, mu_a.shape[1]):
            raise ConfigError("controller arrays have inconsistent shapes")
        return cls(mu_s, mu_a, gains)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    se = values.std(ddof=1) / math.sqrt(values.size) if values.size > 1 else 0.0
    return float(values.mean()), float(se)


@dataclass
class EvaluationReport:
    """Mean and standard error over macro-replications for each policy and metric.

    ``runs[policy]`` holds one dict of per-rollout arrays per macro-replication;
    the replication-level value of a metric is its mean over successful
    rollouts.
    """

    runs: dict

    def values(self, policy, metric):
        return np.array([np.nanmean(r[metric]) for r in self.runs[policy]])

    def paired_difference(self, policy, other, metric="reward"):
        return self.values(policy, metric) - self.values(other, metric)

    def failed(self, policy):
        return int(sum(int(np.sum(r.get("failed", 0))) for r in self.runs[policy]))

    def metrics(self):
        first = next(iter(self.runs.values()))[0]
        return [k for k in ("reward", "titer", "purity") if k in first]

    def rows(self):
        out = []
        for policy in self.runs:
            for metric in self.metrics():
                mean, se = _mean_se(self.values(policy, metric))
                out.append((policy, metric, mean, se, len(self.runs[policy]),
                            self.failed(policy)))
        return out

    def summary(self, policy, metric):
        return _mean_se(self.values(policy, metric))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy", "metric", "mean", "se", "macro_reps", "failed"])
            for policy, metric, mean, se, reps, failed in self.rows():
                writer.writerow([policy, metric, repr(mean), repr(se), reps, failed])


def _seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def run_protocol(scenario, R, macro_reps, seed, gibbs=GibbsConfig(),
                 optimizer=CASE_STUDY_OPTIMIZER, rollouts=50):
    """Repeat data -> posterior -> policy -> paired evaluation ``macro_reps`` times."""
    runs = {"dbn-rl": [], "initial": [], "reference": []}
    fits = []
    for rep_seed in _seeds(seed, macro_reps):
        res, fitted = macro_replication(scenario, R, rep_seed, gibbs, optimizer, rollouts)
        runs["dbn-rl"].append(res["optimized"])
        runs["initial"].append(res["initial"])
        runs["reference"].append(res["reference"])
        fits.append(fitted)
    return EvaluationReport(runs), fits


def evaluate_controllers(scenario, controllers, macro_reps, seed, rollouts=50):
    """Paired evaluation of named controllers (``None`` means the reference policy)."""
    runs = {name: [] for name in controllers}
    for rep_seed in _seeds(seed, macro_reps):
        for name, ctrl in controllers.items():
            runs[name].append(scenario.evaluate(rollouts, rep_seed, ctrl))
    return EvaluationReport(runs)


def feeding_profile(scenario, controller, rollouts, seed):
    """Per-decision mean feed with a 95 % interval over simulated rollouts.

    Rows are ``(step, time_h, mean, se, ci_low, ci_high)`` for each of the
    ``H - 1`` feeding decisions.
    """
    if controller is None:
        ds = scenario.generate(rollouts, seed, "fixed_schedule", schedule=scenario.reference.mean)
    else:
        ds = scenario.generate(rollouts, seed, "policy",
                               policy=lambda i, obs: controller(i, obs)[:, 0])
    acts = ds.actions
    mean = acts.mean(axis=0)
    se = acts.std(axis=0, ddof=1) / math.sqrt(rollouts) if rollouts > 1 else np.zeros_like(mean)
    rows = []
    for i in range(acts.shape[1]):
        half = 1.96 * se[i]
        rows.append((i + 1, i * scenario.dt_obs, float(mean[i]), float(se[i]),
                     float(mean[i] - half), float(mean[i] + half)))
    return rows


def write_profile_csv(profiles, path):
    """Write ``{policy_name: rows}`` from :func:`feeding_profile` to one CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "step", "time_h", "mean", "se", "ci_low", "ci_high"])
        for name, rows in profiles.items():
            for step, time_h, *vals in rows:
                writer.writerow([name, step, repr(float(time_h))] + [repr(v) for v in vals])
