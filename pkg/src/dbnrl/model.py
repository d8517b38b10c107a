"""Policy-augmented linear-Gaussian dynamic Bayesian network.

Time indices in the public functions are 1-based, matching the usual
``s_1, ..., s_H`` notation; array storage is 0-based.

Storage conventions (``H`` time steps, ``n`` states, ``m`` actions):

========  ===============  ==============================================
field     shape            meaning
========  ===============  ==============================================
mu_s      (H, n)           state means
mu_a      (H-1, m)         action means (one action per transition)
beta_s    (H-1, n, n)      ``beta_s[t][j, k]``: effect of s_t^j on s_{t+1}^k
beta_a    (H-1, m, n)      ``beta_a[t][j, k]``: effect of a_t^j on s_{t+1}^k
v         (H, n)           residual standard deviations
sigma     (H-1, m)         action standard deviations
vartheta  (H-1, n, m)      policy gains, ``a_t = mu_a + vartheta_t.T (s_t - mu_s)``
========  ===============  ==============================================

A transition therefore applies ``beta_s[t].T`` to the state deviation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NumericError

VALIDITY_BOUND = 1e10
SCHEMA_VERSION = 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    mu_s: np.ndarray
    mu_a: np.ndarray
    beta_s: np.ndarray
    beta_a: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    mask_s: np.ndarray | None = None
    mask_a: np.ndarray | None = None

    def __post_init__(self):
        mu_s = np.asarray(self.mu_s, dtype=float)
        if mu_s.ndim != 2:
            raise ValueError("mu_s must have shape (H, n)")
        H, n = mu_s.shape
        mu_a = np.asarray(self.mu_a, dtype=float).reshape(H - 1, -1)
        m = mu_a.shape[1]
        expected = {
            "beta_s": (H - 1, n, n),
            "beta_a": (H - 1, m, n),
            "v": (H, n),
            "sigma": (H - 1, m),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        mask_s = np.ones((H - 1, n, n), bool) if self.mask_s is None else self.mask_s
        mask_a = np.ones((H - 1, m, n), bool) if self.mask_a is None else self.mask_a
        mask_s = np.asarray(mask_s, dtype=bool)
        mask_a = np.asarray(mask_a, dtype=bool)
        if mask_s.shape != expected["beta_s"] or mask_a.shape != expected["beta_a"]:
            raise ValueError("mask shapes must match the coefficient arrays")
        # masked-out edges are exactly zero
        beta_s = np.where(mask_s, self.beta_s, 0.0)
        beta_a = np.where(mask_a, self.beta_a, 0.0)
        set_ = object.__setattr__
        set_(self, "mu_s", _frozen(mu_s))
        set_(self, "mu_a", _frozen(mu_a))
        set_(self, "beta_s", _frozen(beta_s))
        set_(self, "beta_a", _frozen(beta_a))
        set_(self, "v", _frozen(self.v))
        set_(self, "sigma", _frozen(self.sigma))
        set_(self, "mask_s", _frozen(mask_s, bool))
        set_(self, "mask_a", _frozen(mask_a, bool))

    @property
    def H(self):
        return self.mu_s.shape[0]

    @property
    def n(self):
        return self.mu_s.shape[1]

    @property
    def m(self):
        return self.mu_a.shape[1]

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "schema": "dbnrl.model",
            "version": SCHEMA_VERSION,
            "H": self.H,
            "n": self.n,
            "m": self.m,
            **{k: getattr(self, k).tolist() for k in
               ("mu_s", "mu_a", "beta_s", "beta_a", "v", "sigma", "mask_s", "mask_a")},
        }

    @classmethod
    def from_dict(cls, doc):
        _check_schema(doc, "dbnrl.model")
        H, n, m = doc["H"], doc["n"], doc["m"]
        shapes = {"mu_s": (H, n), "mu_a": (H - 1, m), "beta_s": (H - 1, n, n),
                  "beta_a": (H - 1, m, n), "v": (H, n), "sigma": (H - 1, m),
                  "mask_s": (H - 1, n, n), "mask_a": (H - 1, m, n)}
        arrays = {}
        for k, shape in shapes.items():
            dtype = bool if k.startswith("mask") else float
            arrays[k] = np.array(doc[k], dtype=dtype).reshape(shape)
        return cls(**arrays)


@dataclass(frozen=True)
class PolicyParams:
    """Linear policy gains with a box-shaped feasible set."""

    vartheta: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        th = np.asarray(self.vartheta, dtype=float)
        if th.ndim != 3:
            raise ValueError("vartheta must have shape (H-1, n, m)")
        lo = np.full(th.shape, -np.inf) if self.lower is None else np.broadcast_to(
            np.asarray(self.lower, dtype=float), th.shape)
        hi = np.full(th.shape, np.inf) if self.upper is None else np.broadcast_to(
            np.asarray(self.upper, dtype=float), th.shape)
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "vartheta", _frozen(th))
        object.__setattr__(self, "lower", _frozen(lo))
        object.__setattr__(self, "upper", _frozen(hi))

    @classmethod
    def zeros(cls, H, n, m, lower=None, upper=None):
        return cls(np.zeros((H - 1, n, m)), lower, upper)

    @property
    def shape(self):
        return self.vartheta.shape

    def feasible(self, tol=0.0):
        return bool(np.all(self.vartheta >= self.lower - tol) and
                    np.all(self.vartheta <= self.upper + tol))

    def flatten(self):
        """``(vec(vartheta_1), ..., vec(vartheta_{H-1}))`` with column-major vec."""
        return flatten_gains(self.vartheta)

    def with_flat(self, theta):
        return replace(self, vartheta=unflatten_gains(theta, self.shape))

    def flat_box(self):
        return flatten_gains(self.lower), flatten_gains(self.upper)

    def to_dict(self):
        return {
            "schema": "dbnrl.policy",
            "version": SCHEMA_VERSION,
            "shape": list(self.shape),
            "vartheta": self.vartheta.tolist(),
            "lower": _encode_inf(self.lower),
            "upper": _encode_inf(self.upper),
        }

    @classmethod
    def from_dict(cls, doc):
        _check_schema(doc, "dbnrl.policy")
        shape = tuple(doc["shape"])
        return cls(np.array(doc["vartheta"], dtype=float).reshape(shape),
                   _decode_inf(doc["lower"]).reshape(shape),
                   _decode_inf(doc["upper"]).reshape(shape))


def flatten_gains(g):
    g = np.asarray(g)
    return g.transpose(0, 2, 1).reshape(-1).copy()


def unflatten_gains(theta, shape):
    T, n, m = shape
    return np.asarray(theta, dtype=float).reshape(T, m, n).transpose(0, 2, 1).copy()


@dataclass(frozen=True)
class RewardSpec:
    """Linear reward ``m_t + b_t.a_t + c_t.s_t``; ``m_c`` when the model is invalid.

    ``b`` has one row per time step; the row for ``t = H`` is ignored because
    no action is taken at the final step.
    """

    m: np.ndarray
    b: np.ndarray
    c: np.ndarray
    m_c: float = -1000.0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        H = m.shape[0]
        b = np.asarray(self.b, dtype=float).reshape(H, -1)
        c = np.asarray(self.c, dtype=float).reshape(H, -1)
        if not self.m_c < 0:
            raise ValueError("invalid-model penalty m_c must be negative")
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "c", _frozen(c))

    @property
    def H(self):
        return self.m.shape[0]

    def scaled(self, alpha):
        return RewardSpec(alpha * self.m, alpha * self.b, alpha * self.c, self.m_c)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    replication_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.actions.shape[0] != self.states.shape[0] - 1:
            raise ValueError("a trajectory of H states carries H-1 actions")


def _encode_inf(a):
    return [_enc(x) for x in np.asarray(a).ravel()]


def _enc(x):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


def _decode_inf(vals):
    return np.array([float(x) for x in vals], dtype=float)


def _check_schema(doc, name):
    if doc.get("schema") != name:
        raise ValueError(f"expected a {name} document, got {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported {name} schema version {doc.get('version')!r}")


def save_json(obj, path):
    Path(path).write_text(json.dumps(obj.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_model(path):
    return ModelParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_policy(path):
    return PolicyParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# closed-form analysis
# ---------------------------------------------------------------------------

def validate_model(w, bound=VALIDITY_BOUND):
    """True iff ``w`` lies in the valid region: finite, bounded, positive scales."""
    arrays = (w.mu_s, w.mu_a, w.beta_s, w.beta_a, w.v, w.sigma)
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > bound):
            return False
    return bool(np.all(w.v > 0) and np.all(w.sigma > 0))


def closed_loop(w, policy):
    """Per-transition closed-loop matrices ``A_t = beta_s_t.T + beta_a_t.T vartheta_t.T``."""
    bs = np.swapaxes(w.beta_s, 1, 2)
    ba = np.swapaxes(w.beta_a, 1, 2)
    return bs + ba @ np.swapaxes(policy.vartheta, 1, 2)


def pathway_product(w, policy, h, t):
    """``R_{h,t}``: maps a deviation of ``s_h`` to the deviation of ``s_{t+1}``.

    Equals ``A_t A_{t-1} ... A_h`` (identity when ``h == t + 1``).
    """
    if not (1 <= h <= t + 1 <= w.H):
        raise IndexError(f"pathway_product needs 1 <= h <= t+1 <= H, got h={h}, t={t}, H={w.H}")
    A = closed_loop(w, policy)
    R = np.eye(w.n)
    for j in range(h, t + 1):
        R = A[j - 1] @ R
    return R


def _check_dims(w, policy):
    if policy.shape != (w.H - 1, w.n, w.m):
        raise ValueError(f"policy shape {policy.shape} does not match model "
                         f"(H-1, n, m) = {(w.H - 1, w.n, w.m)}")


def predict_mean_var(w, policy, s1, t, s1_random=False):
    """Mean and covariance of ``s_{t+1}`` given the initial state.

    With ``s1_random=True`` the initial state is treated as a draw from
    ``N(s1, diag(v_1^2))`` and its variance is propagated as well.
    """
    _check_dims(w, policy)
    if not (0 <= t <= w.H - 1):
        raise IndexError(f"t must lie in [0, H-1], got {t}")
    s1 = np.asarray(s1, dtype=float)
    A = closed_loop(w, policy)
    dev = s1 - w.mu_s[0]
    cov = np.diag(w.v[0] ** 2) if s1_random else np.zeros((w.n, w.n))
    for j in range(t):
        dev = A[j] @ dev
        cov = A[j] @ cov @ A[j].T + np.diag(w.v[j + 1] ** 2)
    cov = 0.5 * (cov + cov.T)
    return w.mu_s[t] + dev, cov


def mean_deviations(w, policy, s1):
    """``s_bar_t - mu_t`` for t = 1..H, shape (H, n)."""
    A = closed_loop(w, policy)
    d = np.empty((w.H, w.n))
    d[0] = np.asarray(s1, dtype=float) - w.mu_s[0]
    for j in range(w.H - 1):
        d[j + 1] = A[j] @ d[j]
    return d


def policy_value(w, policy, reward, s1):
    """Expected cumulative reward ``J(theta; w)`` in closed form."""
    _check_dims(w, policy)
    if reward.H != w.H:
        raise ValueError("reward horizon does not match the model")
    if not validate_model(w):
        return w.H * reward.m_c
    d = mean_deviations(w, policy, s1)
    total = reward.m.sum() + np.sum(reward.c * w.mu_s) + np.sum(reward.c * d)
    if w.H > 1:
        b = reward.b[:-1]
        total += np.sum(b * w.mu_a)
        # b_t . vartheta_t.T d_t
        total += np.einsum("tj,tij,ti->", b, policy.vartheta, d[:-1])
    return float(total)


def sample_trajectories(w, policy, s1, rng, size):
    """Draw ``size`` trajectories; returns states (size, H, n) and actions (size, H-1, m)."""
    _check_dims(w, policy)
    rng = np.random.default_rng(rng)
    states = np.empty((size, w.H, w.n))
    actions = np.empty((size, w.H - 1, w.m))
    states[:, 0] = np.asarray(s1, dtype=float)
    for t in range(w.H - 1):
        dev = states[:, t] - w.mu_s[t]
        a = w.mu_a[t] + dev @ policy.vartheta[t]
        actions[:, t] = a
        nxt = w.mu_s[t + 1] + dev @ w.beta_s[t] + (a - w.mu_a[t]) @ w.beta_a[t]
        states[:, t + 1] = nxt + w.v[t + 1] * rng.standard_normal((size, w.n))
    return states, actions


def sample_trajectory(w, policy, s1, rng, replication_id=0):
    states, actions = sample_trajectories(w, policy, s1, rng, 1)
    return Trajectory(states[0], actions[0], replication_id)


def cumulative_rewards(reward, states, actions):
    """Realised cumulative reward of sampled trajectories (size,)."""
    r = reward.m.sum() + np.einsum("rtk,tk->r", states, reward.c)
    if actions.shape[1]:
        r = r + np.einsum("rtk,tk->r", actions, reward.b[:-1])
    return r


# ---------------------------------------------------------------------------
# linearisation of mechanistic models
# ---------------------------------------------------------------------------

class LinearizationError(NumericError):
    pass


def jacobian_fd(f, x, rel_step=6e-6, abs_floor=1e-8):
    """Central finite-difference Jacobian of ``f`` at ``x`` (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), abs_floor)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return J


def linearize_ode(vector_field, anchor_s, anchor_a, dt, mask_s=None, mask_a=None):
    """First-order Taylor linearisation of ``ds/dt = f(s, a)`` around anchor means.

    ``anchor_s`` (H, n) and ``anchor_a`` (H-1, m).  Returns a :class:`ModelParams`
    whose means and coefficients encode one explicit Euler step of length
    ``dt``; the residual and action scales are set to 1 as placeholders.
    """
    anchor_s = np.asarray(anchor_s, dtype=float)
    H, n = anchor_s.shape
    anchor_a = np.asarray(anchor_a, dtype=float).reshape(H - 1, -1)
    m = anchor_a.shape[1]
    mu_s = np.empty((H, n))
    mu_s[0] = anchor_s[0]
    beta_s = np.empty((H - 1, n, n))
    beta_a = np.empty((H - 1, m, n))
    for t in range(H - 1):
        s, a = anchor_s[t], anchor_a[t]
        f = np.asarray(vector_field(s, a), dtype=float)
        Js = jacobian_fd(lambda x: vector_field(x, a), s)
        Ja = jacobian_fd(lambda u: vector_field(s, u), a)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(Js)) and np.all(np.isfinite(Ja))):
            raise LinearizationError(f"non-finite Jacobian at step t={t + 1}")
        mu_s[t + 1] = s + dt * f
        beta_s[t] = (np.eye(n) + dt * Js).T
        beta_a[t] = (dt * Ja).T
    return ModelParams(mu_s, anchor_a.copy(), beta_s, beta_a, np.ones((H, n)),
                       np.ones((H - 1, m)), mask_s, mask_a)


def linearize_flow(step_map, anchor_s, anchor_a, mask_s=None, mask_a=None):
    """Linearise a discrete step map ``s_{t+1} = Phi_t(s_t, a_t)`` around anchors.

    ``step_map(t, s, a)`` advances state ``s`` over observation interval ``t``
    (0-based).  Unlike :func:`linearize_ode`, which takes a single explicit
    Euler step, this differentiates the map actually used to integrate, so
    stiff components that settle within one interval do not produce
    exploding coefficients.
    """
    anchor_s = np.asarray(anchor_s, dtype=float)
    H, n = anchor_s.shape
    anchor_a = np.asarray(anchor_a, dtype=float).reshape(H - 1, -1)
    m = anchor_a.shape[1]
    mu_s = np.empty((H, n))
    mu_s[0] = anchor_s[0]
    beta_s = np.empty((H - 1, n, n))
    beta_a = np.empty((H - 1, m, n))
    for t in range(H - 1):
        s, a = anchor_s[t], anchor_a[t]
        Js = jacobian_fd(lambda x: step_map(t, x, a), s, rel_step=1e-4, abs_floor=1e-3)
        Ja = jacobian_fd(lambda u: step_map(t, s, u), a, rel_step=1e-4, abs_floor=1e-3)
        nxt = np.asarray(step_map(t, s, a), dtype=float)
        if not (np.all(np.isfinite(nxt)) and np.all(np.isfinite(Js)) and np.all(np.isfinite(Ja))):
            raise LinearizationError(f"non-finite Jacobian at step t={t + 1}")
        mu_s[t + 1] = nxt
        beta_s[t] = Js.T
        beta_a[t] = Ja.T
    return ModelParams(mu_s, anchor_a.copy(), beta_s, beta_a, np.ones((H, n)),
                       np.ones((H - 1, m)), mask_s, mask_a)
