"""Fermentation followed by centrifugation and two precipitation stages.

The network state concatenates the five fermentation variables with the
purification pair ``(log P, log I)``; seven coordinates at every one of the
39 measurement steps.  Coordinates that do not exist at a given stage are
recorded as zero, carry no edges (masked coefficients) and have their policy
gains pinned to zero by the box, so the network is block structured:

* steps 1-36: fermentation, feed-rate action, edges within the first block;
* step 36 -> 37: centrifugation, no action, edges from the fermentation block
  to the purification block;
* steps 37 -> 38 -> 39: precipitation P1 and P2, action ``log zeta`` (log
  ammonium sulphate saturation), edges within the purification block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .experiment import FermentationScenario, Scenario
from .kinetics import (
    KINETIC_VARS,
    STATE_VARS,
    DegenerateBatchError,
    KineticState,
    PurificationState,
    centrifuge,
    step_purification,
)
from .model import ModelParams, RewardSpec, linearize_flow

PURIFICATION_VARS = ("logP", "logI")
INTEGRATED_VARS = STATE_VARS + PURIFICATION_VARS
N_FERMENT = len(STATE_VARS)
N_STATE = len(INTEGRATED_VARS)
PURIFICATION = slice(N_FERMENT, N_STATE)


def _purity(logP, logI):
    return 1.0 / (1.0 + np.exp(np.asarray(logI) - np.asarray(logP)))


@dataclass
class IntegratedBatches:
    """Raw records of an integrated run.

    ``fermentation`` is the kinetics :class:`Dataset`; ``purification`` holds
    (log P, log I) after centrifugation, P1 and P2, shape (R, 3, 2);
    ``log_zeta`` the two precipitation actions, shape (R, 2); ``failed``
    flags batches that could not be centrifuged.
    """

    fermentation: object
    purification: np.ndarray
    log_zeta: np.ndarray
    failed: np.ndarray


@dataclass
class IntegratedScenario(Scenario):
    """Upstream fermentation plus downstream purification."""

    fermentation: FermentationScenario = field(default_factory=FermentationScenario)
    zeta1_range: tuple = (40.0, 50.0)
    zeta2_range: tuple = (60.0, 80.0)
    practice_zeta: tuple = (45.0, 70.0)
    precipitation_cost: float = 0.05
    harvest_cost: float = 15.0
    product_weight: float = 1.3
    impurity_weight: float = 1.0
    purification_gain: float = 0.5
    m_c: float = -1000.0

    def __post_init__(self):
        for lo, hi in (self.zeta1_range, self.zeta2_range):
            if not 0 < lo <= hi <= 100:
                raise ConfigError("saturation ranges must lie in (0, 100]")
        if not all(0 < z <= 100 for z in self.practice_zeta):
            raise ConfigError("practice saturations must lie in (0, 100]")
        if self.purification_gain < 0:
            raise ConfigError("purification_gain must be nonnegative")
        f = self.fermentation
        self.prior_delta_beta = f.prior_delta_beta
        self.prior_delta_mean = f.prior_delta_mean
        self.prior_shape = f.prior_shape
        self.prior_scale = f.prior_scale

    @property
    def kappa(self):
        return self.fermentation.kappa

    @property
    def H(self):
        return self.fermentation.H + 3

    @property
    def n(self):
        return N_STATE

    @property
    def m(self):
        return 1

    @property
    def state_names(self):
        return list(INTEGRATED_VARS)

    @property
    def action_names(self):
        return ["action"]

    @property
    def noise_sd(self):
        """Residual standard deviation of each precipitation stage in log units."""
        return 0.0 if math.isinf(self.kappa) else 1.0 / self.kappa

    # -- simulation ----------------------------------------------------------

    def _purify(self, final_states, log_zeta_fn, rng):
        """Centrifuge and precipitate each batch.

        ``log_zeta_fn(stage, states)`` returns log saturations for the batches
        given their 7-coordinate states at that stage.
        """
        R = final_states.shape[0]
        normals = rng.standard_normal((R, 2, 2)) * self.noise_sd
        purif = np.zeros((R, 3, 2))
        zeta = np.zeros((R, 2))
        failed = np.zeros(R, dtype=bool)
        for r in range(R):
            try:
                ps = centrifuge(KineticState(*final_states[r]))
            except DegenerateBatchError:
                failed[r] = True
            else:
                purif[r, 0] = ps.as_array()
        for stage, name in enumerate(("P1", "P2")):
            full = np.zeros((R, N_STATE))
            full[:, PURIFICATION] = purif[:, stage]
            la = np.asarray(log_zeta_fn(stage, full), dtype=float).reshape(R)
            # saturation is a percentage; the policy cannot exceed 100 %
            zeta[:, stage] = np.minimum(la, math.log(100.0))
            for r in np.flatnonzero(~failed):
                ps = PurificationState(*purif[r, stage])
                nxt = step_purification(ps, zeta[r, stage], name)
                purif[r, stage + 1] = nxt.as_array() + normals[r, stage]
        return purif, zeta, failed

    def generate(self, R, rng, controller=None):
        """Simulate ``R`` integrated batches.

        Without ``controller`` feeding is epsilon-greedy and saturations are
        uniform on the practice ranges; otherwise ``controller(i, states)``
        acts on 7-coordinate network states at every decision step.
        """
        ferm_seed, pur_seed = (int(s.generate_state(1)[0])
                               for s in np.random.SeedSequence(_entropy(rng)).spawn(2))
        pur_rng = np.random.default_rng(pur_seed)
        f = self.fermentation
        T = f.H
        if controller is None:
            ds = f.generate(R, ferm_seed)
            lows = np.array([self.zeta1_range[0], self.zeta2_range[0]])
            highs = np.array([self.zeta1_range[1], self.zeta2_range[1]])
            draws = np.log(pur_rng.uniform(lows, highs, (R, 2)))

            def log_zeta(stage, states):
                return draws[:, stage]
        else:
            def feed(i, observed):
                full = np.zeros((observed.shape[0], N_STATE))
                full[:, :N_FERMENT] = observed
                return np.asarray(controller(i, full))[:, 0]
            ds = f.generate(R, ferm_seed, "policy", policy=feed)

            def log_zeta(stage, states):
                return np.asarray(controller(T + stage, states))[:, 0]
        purif, zeta, failed = self._purify(ds.states[:, -1], log_zeta, pur_rng)
        return IntegratedBatches(ds, purif, zeta, failed)

    def network_data(self, batches):
        """(states (R, 39, 7), actions (R, 38, 1)) of the successful batches."""
        ok = ~batches.failed
        ferm = batches.fermentation
        R = int(ok.sum())
        T = self.fermentation.H
        states = np.zeros((R, self.H, N_STATE))
        states[:, :T, :N_FERMENT] = ferm.observed()[ok]
        states[:, T:, PURIFICATION] = batches.purification[ok]
        actions = np.zeros((R, self.H - 1, 1))
        actions[:, :T - 1, 0] = ferm.actions[ok]
        actions[:, T:, 0] = batches.log_zeta[ok]
        return states, actions

    # -- model pieces --------------------------------------------------------

    def step_map(self, t, s, a):
        """Deterministic integrated transition over interval ``t`` (0-based)."""
        T = self.fermentation.H
        out = np.zeros(N_STATE)
        if t < T - 1:
            out[:N_FERMENT] = self.fermentation.step_map(t, s[:N_FERMENT], a)
        elif t == T - 1:
            x = dict(zip(STATE_VARS, s[:N_FERMENT]))
            out[PURIFICATION] = centrifuge(KineticState(
                X_f=x["X_f"], C=x["C"], L=0.0, S=x["S"], N=x["N"], V=x["V"])).as_array()
        else:
            stage = "P1" if t == T else "P2"
            la = float(np.asarray(a).ravel()[0])
            out[PURIFICATION] = step_purification(
                PurificationState(*s[PURIFICATION]), la, stage).as_array()
        return out

    def masks(self):
        T = self.fermentation.H
        mask_s = np.zeros((self.H - 1, N_STATE, N_STATE), dtype=bool)
        mask_a = np.zeros((self.H - 1, 1, N_STATE), dtype=bool)
        mask_s[:T - 1, :N_FERMENT, :N_FERMENT] = True
        mask_a[:T - 1, 0, :N_FERMENT] = True
        mask_s[T - 1, :N_FERMENT, PURIFICATION] = True
        mask_s[T:, PURIFICATION, PURIFICATION] = True
        mask_a[T:, 0, PURIFICATION] = True
        return mask_s, mask_a

    def anchors(self):
        """Reference-run states and actions in network coordinates."""
        f = self.fermentation
        T = f.H
        anchor_s = np.zeros((self.H, N_STATE))
        anchor_s[:T, :N_FERMENT] = f.profile[:, [KINETIC_VARS.index(v) for v in STATE_VARS]]
        anchor_a = np.zeros((self.H - 1, 1))
        anchor_a[:T - 1, 0] = f.reference.mean
        anchor_a[T:, 0] = np.log(self.practice_zeta)
        for t in range(T - 1, self.H - 1):
            anchor_s[t + 1] = self.step_map(t, anchor_s[t], anchor_a[t])
        return anchor_s, anchor_a

    def mechanistic_model(self):
        anchor_s, anchor_a = self.anchors()
        return linearize_flow(self.step_map, anchor_s, anchor_a, *self.masks())

    def reward(self):
        """Raw-unit reward: feed cost, precipitation cost, end-of-line profit."""
        T = self.fermentation.H
        H = self.H
        m = np.zeros(H)
        m[-1] = -self.harvest_cost
        b = np.zeros((H, 1))
        b[:T - 1] = -self.fermentation.feed_cost
        b[T:H - 1] = -self.precipitation_cost
        c = np.zeros((H, N_STATE))
        c[-1, N_FERMENT] = self.product_weight
        c[-1, N_FERMENT + 1] = -self.impurity_weight
        return RewardSpec(m, b, c, self.m_c)

    def box_arrays(self):
        f = self.fermentation
        T = f.H
        lower = np.zeros((self.H - 1, N_STATE, 1))
        upper = np.zeros((self.H - 1, N_STATE, 1))
        flo, fhi = f.box_arrays()
        lower[:T - 1, :N_FERMENT] = flo
        upper[:T - 1, :N_FERMENT] = fhi
        lower[T:, PURIFICATION] = -self.purification_gain
        upper[T:, PURIFICATION] = self.purification_gain
        return lower, upper

    def s1(self):
        out = np.zeros(N_STATE)
        out[:N_FERMENT] = self.fermentation.s1()
        return out

    # -- evaluation ----------------------------------------------------------

    def realized(self, batches):
        """Per-batch reward, yield (product after purification) and purity.

        Batches that failed at the centrifuge are NaN and flagged in ``failed``.
        """
        ok = ~batches.failed
        ferm = batches.fermentation
        logP, logI = batches.purification[:, -1, 0], batches.purification[:, -1, 1]
        reward = (-self.fermentation.feed_cost * ferm.actions.sum(axis=1)
                  - self.precipitation_cost * batches.log_zeta.sum(axis=1)
                  - self.harvest_cost + self.product_weight * logP
                  - self.impurity_weight * logI)
        nan = np.where(ok, 1.0, np.nan)
        return {
            "reward": reward * nan,
            "titer": np.exp(logP) * nan,
            "purity": _purity(logP, logI) * nan,
            "failed": batches.failed.copy(),
        }

    def practice_controller(self):
        """Reference feeding with the practice saturations."""
        T = self.fermentation.H
        feed = self.fermentation.reference.mean

        def act(i, states):
            R = states.shape[0]
            if i < T - 1:
                return np.full((R, 1), feed[i])
            if i == T - 1:
                return np.zeros((R, 1))
            return np.full((R, 1), math.log(self.practice_zeta[i - T]))

        return act

    def evaluate(self, rollouts, seed, controller=None):
        """Roll a controller (default: practice) through the integrated process."""
        if controller is None:
            controller = self.practice_controller()
        return self.realized(self.generate(rollouts, seed, controller))


def _entropy(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return rng
