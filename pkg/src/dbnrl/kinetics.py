"""Stochastic fed-batch fermentation and purification simulator.

The fermentation model tracks lipid-free cell mass, citrate, lipid, oil
substrate, nitrogen and working volume of a *Yarrowia lipolytica* culture.
Drift terms are coupled Monod kinetics; each variable carries an additive
Wiener term whose scale is a fraction ``1/kappa`` of a reference mean
profile.  Integration is Euler-Maruyama with a fixed sub-step.

All routines are vectorised over replications: state arrays have shape
``(..., 6)`` in the order of :data:`KINETIC_VARS`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import NumericError

KINETIC_VARS = ("X_f", "C", "L", "S", "N", "V")
# observed process state (CQAs) used by the Bayesian network
STATE_VARS = ("X_f", "C", "S", "N", "V")
STATE_INDEX = [KINETIC_VARS.index(name) for name in STATE_VARS]

DEFAULT_S1 = {"X_f": 0.05, "C": 0.0, "L": 0.0, "S": 30.0, "N": 5.0, "V": 0.6}

DISSOLVED_OXYGEN = 30.0  # % air saturation, held by cascade control
MIN_VOLUME = 0.01  # L; keeps the dilution rate finite under volume noise
DEBRIS_EFFICIENCY = 0.01
PRODUCT_SOLUBILITY = (56.27, 42.00)
IMPURITY_SOLUBILITY = (53.72, 5.23)


class IntegrationError(NumericError):
    """Raised when the kinetic state becomes non-finite."""

    def __init__(self, variable, time_h):
        self.variable = variable
        self.time_h = time_h
        super().__init__(f"non-finite value for {variable} at t={time_h:.3f} h")


class DegenerateBatchError(NumericError):
    """Raised when product or impurity is nonpositive at the centrifuge."""


@dataclass(frozen=True)
class KineticParams:
    alpha_L: float = 0.1273
    C_max: float = 130.90
    K_iN: float = 0.1229
    K_iS: float = 612.18
    K_iX: float = 59.974
    K_N: float = 0.0200
    K_O: float = 0.3309
    K_S: float = 0.0430
    K_SL: float = 0.0217
    m_s: float = 0.0225
    r_L: float = 0.4792
    V_evap: float = 0.0026
    Y_cs: float = 0.6826
    Y_ls: float = 0.3574
    Y_xn: float = 10.0
    Y_xs: float = 0.2386
    beta_LCmax: float = 0.1426
    mu_max: float = 0.3845
    S_F: float = 917.00

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"kinetic parameter {f.name} must be positive, got {value}")

    @classmethod
    def from_file(cls, path):
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        values = {}
        names = {f.name for f in fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in names:
                raise ValueError(f"{path}:{lineno}: unknown kinetic parameter {key!r}")
            values[key] = float(value)
        return cls(**values)

    def to_file(self, path):
        lines = [f"{k} = {v!r}" for k, v in asdict(self).items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class KineticState:
    X_f: float
    C: float
    L: float
    S: float
    N: float
    V: float
    t: float = 0.0

    def as_array(self):
        return np.array([self.X_f, self.C, self.L, self.S, self.N, self.V], dtype=float)

    @classmethod
    def from_array(cls, x, t=0.0):
        return cls(*(float(v) for v in x), t=float(t))

    def observed(self):
        """The five-dimensional process state (X_f, C, S, N, V)."""
        return self.as_array()[STATE_INDEX]


@dataclass(frozen=True)
class NoiseSpec:
    """Intrinsic process noise.

    ``reference_profiles`` has shape ``(T, 6)``: the mean kinetic state at each
    observation time.  The Wiener scale of variable ``k`` during observation
    interval ``i`` is ``reference_profiles[i, k] / kappa``, expressed per
    observation interval.
    """

    kappa: float = math.inf
    reference_profiles: np.ndarray | None = None
    dt_obs: float = 4.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive (math.inf for no noise)")
        if math.isfinite(self.kappa) and self.reference_profiles is None:
            raise ValueError("finite kappa requires reference_profiles")

    @property
    def deterministic(self):
        return math.isinf(self.kappa)

    def sigma(self, t):
        """Per-interval noise standard deviations at elapsed time ``t`` (hours)."""
        if self.deterministic:
            return np.zeros(len(KINETIC_VARS))
        prof = np.asarray(self.reference_profiles, dtype=float)
        i = min(int(math.floor(t / self.dt_obs + 1e-9)), len(prof) - 1)
        return np.abs(prof[i]) / self.kappa


@dataclass(frozen=True)
class PurificationState:
    logP: float
    logI: float

    def as_array(self):
        return np.array([self.logP, self.logI])

    @property
    def purity(self):
        P, I = math.exp(self.logP), math.exp(self.logI)
        return P / (P + I)


# ---------------------------------------------------------------------------
# fermentation kinetics
# ---------------------------------------------------------------------------

def rates(x, feed, params=KineticParams()):
    """Deterministic drift ``dx/dt`` for kinetic states ``x`` of shape (..., 6).

    ``feed`` is the oil feed rate F_S in L/h (broadcast against ``x[..., 0]``).
    Also returns a dict with the intermediate rates (mu, beta_C, F_B, ...).
    """
    p = params
    x = np.asarray(x, dtype=float)
    X_f, C, L, S, N, V = (x[..., i] for i in range(6))
    feed = np.asarray(feed, dtype=float)

    oxygen = DISSOLVED_OXYGEN / (p.K_O + DISSOLVED_OXYGEN)
    substrate = S / (p.K_S + S) / (1.0 + S / p.K_iS)
    density = 1.0 / (1.0 + X_f / p.K_iX)

    mu = p.mu_max * substrate * N / (p.K_N + N) * oxygen * density
    beta_LC = (
        1.0 / (1.0 + N / p.K_iN) * substrate * oxygen * density
        * (1.0 - C / p.C_max) * p.beta_LCmax
    )
    beta_C = 2.0 * (1.0 - p.r_L) * beta_LC
    with np.errstate(invalid="ignore", divide="ignore"):
        lipid_frac = np.where(L + X_f > 0, L / (L + X_f), 0.0)
    beta_L = p.r_L * beta_LC - p.K_SL * lipid_frac * oxygen
    q_L = p.alpha_L * mu + beta_L
    q_S = (
        mu / p.Y_xs + oxygen * S / (p.K_S + S) * p.m_s
        + beta_C / p.Y_cs + beta_L / p.Y_ls
    )
    F_B = V / 1000.0 * (7.14 / p.Y_xn * mu * X_f + 1.59 * beta_C * X_f)
    dilution = (F_B + feed) / V - p.V_evap / V

    dx = np.stack(
        [
            mu * X_f - dilution * X_f,
            beta_C * X_f - dilution * C,
            q_L * X_f - dilution * L,
            -q_S * X_f + feed / V * p.S_F - dilution * S,
            -mu * X_f / p.Y_xn - dilution * N,
            F_B + feed - p.V_evap + 0.0 * X_f,
        ],
        axis=-1,
    )
    info = {"mu": mu, "beta_LC": beta_LC, "beta_C": beta_C, "F_B": F_B, "q_S": q_S}
    return dx, info


def _clamp(x, params):
    x = np.maximum(x, 0.0)
    x[..., 1] = np.minimum(x[..., 1], params.C_max)
    x[..., 5] = np.maximum(x[..., 5], MIN_VOLUME)
    return x


def _check_finite(x, t):
    bad = ~np.isfinite(x)
    if bad.any():
        col = int(np.argwhere(bad)[0][-1])
        raise IntegrationError(KINETIC_VARS[col], t)


def integrate_interval(x, feed, t0, dt_obs, params, noise, normals=None, substep=0.1):
    """Advance states ``x`` (..., 6) over one observation interval.

    ``normals`` supplies the standard normal increments with shape
    ``(n_sub, ..., 6)``; it is ignored when the noise is deterministic.
    """
    n_sub = max(int(round(dt_obs / substep)), 1)
    h = dt_obs / n_sub
    x = _clamp(np.array(x, dtype=float), params)
    scale = noise.sigma(t0) * math.sqrt(h / noise.dt_obs)
    stochastic = not noise.deterministic and np.any(scale > 0)
    for i in range(n_sub):
        # overflow shows up as a non-finite state and is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            dx, _ = rates(x, feed, params)
            x = x + h * dx
        if stochastic:
            x = x + scale * normals[i]
        x = _clamp(x, params)
        _check_finite(x, t0 + (i + 1) * h)
    return x


def step_fermentation(state, feed_rate, dt_obs, params=KineticParams(), noise=NoiseSpec(),
                      rng=None, substep=0.1):
    """Advance one :class:`KineticState` by ``dt_obs`` hours under a constant feed."""
    if feed_rate < 0:
        raise ValueError("feed_rate must be nonnegative")
    if dt_obs <= 0:
        raise ValueError("dt_obs must be positive")
    n_sub = max(int(round(dt_obs / substep)), 1)
    normals = None
    if not noise.deterministic:
        rng = np.random.default_rng(rng)
        normals = rng.standard_normal((n_sub, len(KINETIC_VARS)))
    x = integrate_interval(state.as_array(), feed_rate, state.t, dt_obs, params, noise,
                           normals, substep)
    return KineticState.from_array(x, t=state.t + dt_obs)


# ---------------------------------------------------------------------------
# purification
# ---------------------------------------------------------------------------

def fractional_solubility(zeta, a, b):
    return 1.0 / (1.0 + (zeta / a) ** b)


def _log_fractions(zeta, a, b):
    """(log soluble fraction, log precipitated fraction), stable at both ends."""
    log_r = b * (math.log(zeta) - math.log(a))
    soft = np.logaddexp(0.0, log_r)
    return -soft, log_r - soft


def centrifuge(state):
    """Cell-debris removal: kinetic state -> (log P, log I)."""
    P = state.C
    I = DEBRIS_EFFICIENCY * state.X_f + state.S + state.N
    if not (P > 0 and I > 0):
        raise DegenerateBatchError(f"centrifuge needs P>0 and I>0, got P={P}, I={I}")
    return PurificationState(math.log(P), math.log(I))


def step_purification(state, log_saturation, stage, noise_sd=0.0, rng=None):
    """One ammonium-sulphate precipitation stage in log space.

    Stage ``"P1"`` keeps the soluble fraction, ``"P2"`` keeps the precipitate.
    ``noise_sd`` is the standard deviation of the Gaussian residual on each of
    (log P, log I); ``noise_sd`` may be a pair.
    """
    if stage not in ("P1", "P2"):
        raise ValueError(f"unknown purification stage {stage!r}")
    zeta = math.exp(log_saturation)
    if not (0 < zeta <= 100 + 1e-9):
        raise ValueError(f"saturation must lie in (0, 100], got {zeta}")
    keep = 0 if stage == "P1" else 1
    logP = state.logP + float(_log_fractions(zeta, *PRODUCT_SOLUBILITY)[keep])
    logI = state.logI + float(_log_fractions(zeta, *IMPURITY_SOLUBILITY)[keep])
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (2,))
    if np.any(sd > 0):
        rng = np.random.default_rng(rng)
        e = rng.standard_normal(2) * sd
        logP += e[0]
        logI += e[1]
    return PurificationState(logP, logI)


# ---------------------------------------------------------------------------
# reference feeding and datasets
# ---------------------------------------------------------------------------

# Practice-style oil feeding (L/h) for the 35 feeding decisions at 4 h spacing:
# low feed while the initial oil lasts, a peak during exponential growth
# (16 h), then a decline that holds oil near 10 g/L through production.
_PRACTICE_FEED = np.array([
    0.0005, 0.0005, 0.0005, 0.0037, 0.0165, 0.0128, 0.0074, 0.0067, 0.0061,
    0.0056, 0.0051, 0.0047, 0.0043, 0.0040, 0.0036, 0.0033, 0.0031, 0.0028,
    0.0026, 0.0024, 0.0022, 0.0020, 0.0018, 0.0016, 0.0014, 0.0013, 0.0011,
    0.0010, 0.0009, 0.0007, 0.0006, 0.0005, 0.0004, 0.0003, 0.0002,
])


def default_feed_profile(horizon_steps=36, dt_obs=4.0):
    """Practice-style feed schedule, resampled if the time grid differs."""
    grid = np.arange(len(_PRACTICE_FEED)) * 4.0
    t = np.arange(horizon_steps - 1) * dt_obs
    return np.interp(t, grid, _PRACTICE_FEED)


@dataclass
class ReferencePolicy:
    """Per-time mean (``mean``) and maximum (``max``) feed across batches."""

    mean: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.max = np.asarray(self.max, dtype=float)
        if self.mean.shape != self.max.shape:
            raise ValueError("mean and max profiles must have the same length")


def default_reference_policy(horizon_steps=36, dt_obs=4.0):
    mean = default_feed_profile(horizon_steps, dt_obs)
    return ReferencePolicy(mean=mean, max=2.0 * mean)


def reference_trajectory(feed, s1=None, params=KineticParams(), dt_obs=4.0, substep=0.1,
                         capacity=3.0):
    """Deterministic run used to bootstrap the noise reference profiles."""
    x0 = _initial_array(s1)
    states, _ = _simulate(x0[None, :], np.asarray(feed)[None, :], params, NoiseSpec(),
                          None, dt_obs, substep, capacity)
    return states[0]


def _initial_array(s1):
    if s1 is None:
        s1 = DEFAULT_S1
    if isinstance(s1, KineticState):
        return s1.as_array()
    if isinstance(s1, dict):
        return np.array([s1[k] for k in KINETIC_VARS], dtype=float)
    return np.asarray(s1, dtype=float)


def _simulate(x0, actions, params, noise, normals, dt_obs, substep, capacity, policy=None):
    """Core batch simulator.

    ``x0`` (R, 6); ``actions`` (R, T-1) feed rates, or ``policy(t_index, states)``
    returning (R,) feeds when ``actions`` is None.  ``normals`` has shape
    (R, T-1, n_sub, 6) or is None.  Returns kinetic states (R, T, 6) and the
    feeds actually applied (R, T-1).
    """
    R = x0.shape[0]
    T = actions.shape[1] + 1 if actions is not None else policy.horizon
    out = np.empty((R, T, 6))
    applied = np.zeros((R, T - 1))
    x = _clamp(x0.copy(), params)
    out[:, 0] = x
    alive = np.ones(R, dtype=bool)
    for i in range(T - 1):
        feed = actions[:, i] if actions is not None else policy(i, x)
        feed = np.where(alive, np.maximum(feed, 0.0), 0.0)
        applied[:, i] = feed
        z = None if normals is None else np.moveaxis(normals[:, i], 1, 0)
        x_new = integrate_interval(x, feed, i * dt_obs, dt_obs, params, noise, z, substep)
        # finished batches are frozen at their terminal state
        x = np.where(alive[:, None], x_new, x)
        alive &= x[:, 5] <= capacity
        out[:, i + 1] = x
    return out, applied


@dataclass
class Dataset:
    """``R`` simulated batches.

    ``states`` has shape (R, T, 6) in :data:`KINETIC_VARS` order and
    ``actions`` (R, T-1) holds the applied feed rates in L/h.
    """

    states: np.ndarray
    actions: np.ndarray
    dt_obs: float = 4.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.actions.ndim == 2:
            pass
        elif self.actions.ndim == 3 and self.actions.shape[2] == 1:
            self.actions = self.actions[:, :, 0]
        else:
            raise ValueError("actions must have shape (R, T-1)")
        R, T, k = self.states.shape
        if k != len(KINETIC_VARS) or self.actions.shape != (R, T - 1):
            raise ValueError(
                f"inconsistent dataset shapes {self.states.shape} / {self.actions.shape}")

    @property
    def R(self):
        return self.states.shape[0]

    @property
    def horizon(self):
        return self.states.shape[1]

    def observed(self):
        """(R, T, 5) process states in :data:`STATE_VARS` order."""
        return self.states[:, :, STATE_INDEX]

    def to_csv(self, path):
        header = ["replication_id", "step_index", "time_h", *KINETIC_VARS, "feed_rate"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in range(self.R):
                for i in range(self.horizon):
                    feed = self.actions[r, i] if i < self.horizon - 1 else 0.0
                    w.writerow([r, i, repr(i * self.dt_obs),
                                *(repr(float(v)) for v in self.states[r, i]), repr(float(feed))])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty dataset")
        missing = {"replication_id", "step_index", "time_h", *KINETIC_VARS, "feed_rate"} - set(rows[0])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        reps = sorted({int(r["replication_id"]) for r in rows})
        steps = sorted({int(r["step_index"]) for r in rows})
        R, T = len(reps), len(steps)
        if len(rows) != R * T:
            raise ValueError(f"{path}: ragged dataset ({len(rows)} rows for {R}x{T})")
        states = np.empty((R, T, 6))
        feeds = np.empty((R, T))
        rpos = {r: i for i, r in enumerate(reps)}
        for row in rows:
            r, i = rpos[int(row["replication_id"])], int(row["step_index"])
            states[r, i] = [float(row[k]) for k in KINETIC_VARS]
            feeds[r, i] = float(row["feed_rate"])
        dt = float(rows[0]["time_h"]) if T == 1 else (
            [float(r["time_h"]) for r in rows if int(r["step_index"]) == 1][0])
        return cls(states=states, actions=feeds[:, :-1], dt_obs=dt)


def epsilon_greedy_actions(reference, rng, size, epsilon=0.3):
    """Sample ε-greedy feeds for ``size`` batches.

    Returns ``(actions, explore)`` with shapes (size, T-1); ``explore`` marks
    the uniform-exploration draws.
    """
    rng = np.random.default_rng(rng)
    T1 = len(reference.mean)
    explore = rng.random((size, T1)) < epsilon
    greedy = reference.mean + rng.standard_normal((size, T1)) * reference.max / 10.0
    uniform = rng.uniform(0.0, reference.max.max(), (size, T1))
    return np.maximum(np.where(explore, uniform, greedy), 0.0), explore


def initial_states(R, rng, noise, s1=None):
    """Initial kinetic states with raw-material variation of scale ``s1/kappa``."""
    x0 = np.tile(_initial_array(s1), (R, 1))
    if not noise.deterministic:
        x0 = x0 + np.abs(x0) / noise.kappa * rng.standard_normal(x0.shape)
    return np.maximum(x0, 0.0)


def generate_dataset(R, policy_mode="epsilon_greedy", horizon_steps=36, noise=NoiseSpec(),
                     rng=None, *, reference=None, schedule=None, policy=None, s1=None,
                     params=KineticParams(), dt_obs=4.0, substep=0.1, capacity=3.0,
                     epsilon=0.3):
    """Simulate ``R`` batches of ``horizon_steps`` observations.

    ``policy_mode`` is ``"epsilon_greedy"`` (needs ``reference``),
    ``"fixed_schedule"`` (needs ``schedule``, length ``horizon_steps - 1``) or
    ``"policy"`` (needs a callable ``policy(t_index, observed_states)``
    returning feeds for each batch).
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    seeds = np.random.SeedSequence(_entropy(rng)).spawn(R)
    streams = [np.random.default_rng(s) for s in seeds]
    n_sub = max(int(round(dt_obs / substep)), 1)
    T1 = horizon_steps - 1

    x0 = np.vstack([initial_states(1, g, noise, s1) for g in streams])
    explore = np.zeros((R, T1), dtype=bool)
    actions = None
    call = None
    if policy_mode == "epsilon_greedy":
        if reference is None:
            raise ValueError("epsilon_greedy mode needs reference profiles")
        if len(reference.mean) < T1:
            raise ValueError("reference profile shorter than the horizon")
        ref = ReferencePolicy(reference.mean[:T1], reference.max[:T1])
        draws = [epsilon_greedy_actions(ref, g, 1, epsilon) for g in streams]
        actions = np.vstack([a for a, _ in draws])
        explore = np.vstack([e for _, e in draws])
    elif policy_mode == "fixed_schedule":
        sched = np.asarray(schedule, dtype=float)
        if sched.shape[-1] != T1 or np.any(sched < 0):
            raise ValueError(f"schedule must hold {T1} nonnegative feeds")
        actions = np.broadcast_to(sched, (R, T1)).copy()
    elif policy_mode == "policy":
        if policy is None:
            raise ValueError("policy mode needs a policy callable")

        def call(i, x):
            return np.asarray(policy(i, x[:, STATE_INDEX]), dtype=float).reshape(R)
        call.horizon = horizon_steps
    else:
        raise ValueError(f"unknown policy_mode {policy_mode!r}")

    normals = None
    if not noise.deterministic:
        normals = np.stack([g.standard_normal((T1, n_sub, 6)) for g in streams])
    states, applied = _simulate(x0, actions, params, noise, normals, dt_obs, substep, capacity,
                                policy=call)
    meta = {"policy_mode": policy_mode, "kappa": noise.kappa, "explore": explore}
    return Dataset(states=states, actions=applied, dt_obs=dt_obs, meta=meta)


def _entropy(rng):
    if rng is None:
        return None
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return rng


def infer_reference_policy(data):
    """Per-time mean and maximum feed across the batches of ``data``."""
    actions = np.asarray(data.actions if isinstance(data, Dataset) else data, dtype=float)
    if actions.size == 0:
        raise ValueError("empty dataset")
    return ReferencePolicy(mean=actions.mean(axis=0), max=actions.max(axis=0))


def bootstrap_noise(kappa, reference=None, s1=None, params=KineticParams(), dt_obs=4.0,
                    horizon_steps=36, substep=0.1):
    """Noise spec whose reference profile is a deterministic mean-feeding run."""
    if reference is None:
        reference = default_reference_policy(horizon_steps, dt_obs)
    profile = reference_trajectory(reference.mean[: horizon_steps - 1], s1, params, dt_obs,
                                   substep)
    return NoiseSpec(kappa=kappa, reference_profiles=profile, dt_obs=dt_obs)


def with_kappa(noise, kappa):
    return replace(noise, kappa=kappa)
