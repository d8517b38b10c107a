"""Gibbs sampler for the parameters of a linear-Gaussian network.

All conditionals are conjugate: Normal for coefficients and means,
inverse-Gamma for squared residual and action scales.  Each scalar update
exposes its conditional parameters separately (``*_conditional``) so they can
be checked without sampling.

Data are ``states`` (R, H, n) and ``actions`` (R, H-1, m); time indices in
this module are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import sweep_kernel as _sweep_kernel
from .errors import ConfigError
from .model import ModelParams, validate_model


@dataclass
class PriorHyper:
    """Conjugate prior hyper-parameters.

    Normal priors ``N(centre, delta^2)`` on each coefficient and mean;
    ``Inv-Gamma(kappa/2, rho/2)`` on each squared scale.
    """

    beta_s0: np.ndarray
    beta_a0: np.ndarray
    delta_s: np.ndarray
    delta_a: np.ndarray
    mu_s0: np.ndarray
    delta_mu: np.ndarray
    mu_a0: np.ndarray
    delta_lam: np.ndarray
    kappa_v: np.ndarray
    rho_v: np.ndarray
    kappa_sigma: np.ndarray
    rho_sigma: np.ndarray
    mask_s: np.ndarray | None = None
    mask_a: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu_s0, dtype=float)
        H, n = mu.shape
        lam = np.asarray(self.mu_a0, dtype=float).reshape(H - 1, -1)
        m = lam.shape[1]
        shapes = {
            "beta_s0": (H - 1, n, n), "delta_s": (H - 1, n, n),
            "beta_a0": (H - 1, m, n), "delta_a": (H - 1, m, n),
            "mu_s0": (H, n), "delta_mu": (H, n), "kappa_v": (H, n), "rho_v": (H, n),
            "mu_a0": (H - 1, m), "delta_lam": (H - 1, m),
            "kappa_sigma": (H - 1, m), "rho_sigma": (H - 1, m),
        }
        for name, shape in shapes.items():
            a = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), shape).copy()
            setattr(self, name, a)
        for name in ("delta_s", "delta_a", "delta_mu", "delta_lam",
                     "kappa_v", "rho_v", "kappa_sigma", "rho_sigma"):
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"prior hyper-parameter {name} must be positive")
        self.mask_s = (np.ones((H - 1, n, n), bool) if self.mask_s is None
                       else np.asarray(self.mask_s, dtype=bool))
        self.mask_a = (np.ones((H - 1, m, n), bool) if self.mask_a is None
                       else np.asarray(self.mask_a, dtype=bool))

    @property
    def shape(self):
        H, n = self.mu_s0.shape
        return H, n, self.mu_a0.shape[1]

    @classmethod
    def from_model(cls, w, delta_beta=1.0, delta_mean=10.0, shape=2.0, scale=1.0):
        """Prior centred on a (typically linearised) model.

        ``shape`` and ``scale`` are the inverse-Gamma parameters, i.e.
        ``kappa = 2 shape`` and ``rho = 2 scale``.
        """
        H, n, m = w.H, w.n, w.m
        return cls(
            beta_s0=w.beta_s, beta_a0=w.beta_a,
            delta_s=delta_beta, delta_a=delta_beta,
            mu_s0=w.mu_s, delta_mu=delta_mean,
            mu_a0=w.mu_a, delta_lam=delta_mean,
            kappa_v=np.full((H, n), 2 * shape), rho_v=np.full((H, n), 2 * scale),
            kappa_sigma=np.full((H - 1, m), 2 * shape),
            rho_sigma=np.full((H - 1, m), 2 * scale),
            mask_s=w.mask_s, mask_a=w.mask_a,
        )

    def sample(self, rng):
        """One draw from the prior, returned as a :class:`ModelParams`."""
        H, n, m = self.shape
        return ModelParams(
            rng.normal(self.mu_s0, self.delta_mu),
            rng.normal(self.mu_a0, self.delta_lam),
            rng.normal(self.beta_s0, self.delta_s),
            rng.normal(self.beta_a0, self.delta_a),
            np.sqrt(_inv_gamma(rng, self.kappa_v / 2, self.rho_v / 2)),
            np.sqrt(_inv_gamma(rng, self.kappa_sigma / 2, self.rho_sigma / 2)),
            self.mask_s, self.mask_a,
        )


def _inv_gamma(rng, shape, scale):
    return np.asarray(scale) / rng.gamma(shape)


class GibbsState:
    """Mutable parameter arrays updated in place by the sampler."""

    def __init__(self, w):
        self.mu_s = np.array(w.mu_s)
        self.mu_a = np.array(w.mu_a)
        self.beta_s = np.array(w.beta_s)
        self.beta_a = np.array(w.beta_a)
        self.v2 = np.array(w.v) ** 2
        self.sigma2 = np.array(w.sigma) ** 2
        self.mask_s = np.array(w.mask_s)
        self.mask_a = np.array(w.mask_a)

    def to_model(self):
        return ModelParams(self.mu_s, self.mu_a, self.beta_s, self.beta_a,
                           np.sqrt(self.v2), np.sqrt(self.sigma2), self.mask_s, self.mask_a)


def _check_data(states, actions, H, n, m):
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim != 3 or states.shape[0] == 0:
        raise ConfigError("need at least one trajectory with shape (R, H, n)")
    if states.shape[1:] != (H, n) or actions.shape != (states.shape[0], H - 1, m):
        raise ConfigError(f"data shapes {states.shape}, {actions.shape} do not match "
                          f"the network (H, n, m) = {(H, n, m)}")
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise ConfigError("data contain non-finite values")
    return states, actions


def transition_residual(st, states, actions, t, k):
    """Residual of child ``s_{t+1}^k`` under the current parameters, shape (R,)."""
    ds = states[:, t, :] - st.mu_s[t]
    da = actions[:, t, :] - st.mu_a[t]
    return (states[:, t + 1, k] - st.mu_s[t + 1, k]
            - ds @ st.beta_s[t][:, k] - da @ st.beta_a[t][:, k])


def node_residual(st, states, actions, t, k):
    """Deviation of ``s_t^k`` from its conditional mean given the parents."""
    if t == 0:
        return states[:, 0, k] - st.mu_s[0, k]
    return transition_residual(st, states, actions, t - 1, k)


# ---------------------------------------------------------------------------
# full conditionals
# ---------------------------------------------------------------------------

def beta_conditional(st, prior, states, actions, t, j, k, kind="s"):
    """Mean and variance of the coefficient from parent ``j`` to child ``s_{t+1}^k``."""
    if kind == "s":
        alpha = states[:, t, j] - st.mu_s[t, j]
        cur, b0, d2 = st.beta_s[t][j, k], prior.beta_s0[t][j, k], prior.delta_s[t][j, k] ** 2
    else:
        alpha = actions[:, t, j] - st.mu_a[t, j]
        cur, b0, d2 = st.beta_a[t][j, k], prior.beta_a0[t][j, k], prior.delta_a[t][j, k] ** 2
    resid = transition_residual(st, states, actions, t, k) + alpha * cur
    v2 = st.v2[t + 1, k]
    denom = d2 * (alpha @ alpha) + v2
    return (d2 * (alpha @ resid) + v2 * b0) / denom, d2 * v2 / denom


def v_conditional(st, prior, states, actions, t, k):
    """Shape and scale of the inverse-Gamma conditional of ``v_t^k squared``."""
    u = node_residual(st, states, actions, t, k)
    R = states.shape[0]
    return (prior.kappa_v[t, k] + R) / 2, (prior.rho_v[t, k] + u @ u) / 2


def sigma_conditional(st, prior, actions, t, k):
    """Shape and scale of the inverse-Gamma conditional of ``sigma_t^k squared``."""
    u = actions[:, t, k] - st.mu_a[t, k]
    R = actions.shape[0]
    return (prior.kappa_sigma[t, k] + R) / 2, (prior.rho_sigma[t, k] + u @ u) / 2


def _children_terms(st, states, actions, t, coef_row, mean):
    """Precision and precision-weighted mean contributed by the children of a node."""
    R = states.shape[0]
    prec, num = 0.0, 0.0
    for ell in np.flatnonzero(coef_row):
        b = coef_row[ell]
        v2 = st.v2[t + 1, ell]
        c = b * mean - transition_residual(st, states, actions, t, ell)
        prec += R * b * b / v2
        num += b * c.sum() / v2
    return prec, num


def mu_conditional(st, prior, states, actions, t, k):
    """Mean and variance of the conditional of the state mean ``mu_t^k``."""
    R, H, _ = states.shape
    own = node_residual(st, states, actions, t, k) + st.mu_s[t, k]
    v2 = st.v2[t, k]
    d2 = prior.delta_mu[t, k] ** 2
    prec = 1.0 / d2 + R / v2
    num = prior.mu_s0[t, k] / d2 + own.sum() / v2
    if t < H - 1:
        p, q = _children_terms(st, states, actions, t, st.beta_s[t][k], st.mu_s[t, k])
        prec += p
        num += q
    return num / prec, 1.0 / prec


def lambda_conditional(st, prior, states, actions, t, k):
    """Mean and variance of the conditional of the action mean ``lambda_t^k``."""
    R = actions.shape[0]
    s2 = st.sigma2[t, k]
    d2 = prior.delta_lam[t, k] ** 2
    prec = 1.0 / d2 + R / s2
    num = prior.mu_a0[t, k] / d2 + actions[:, t, k].sum() / s2
    p, q = _children_terms(st, states, actions, t, st.beta_a[t][k], st.mu_a[t, k])
    return (num + q) / (prec + p), 1.0 / (prec + p)


# ---------------------------------------------------------------------------
# sampling updates
# ---------------------------------------------------------------------------

def update_beta(st, prior, states, actions, t, j, k, rng=None, kind="s", z=None):
    """Sample one coefficient; ``z`` optionally supplies the standard normal variate."""
    mask = st.mask_s if kind == "s" else st.mask_a
    coef = st.beta_s if kind == "s" else st.beta_a
    if not mask[t][j, k]:
        coef[t][j, k] = 0.0
        return 0.0
    mean, var = beta_conditional(st, prior, states, actions, t, j, k, kind)
    z = rng.standard_normal() if z is None else z
    coef[t][j, k] = mean + np.sqrt(var) * z
    return coef[t][j, k]


def update_v(st, prior, states, actions, t, k, rng=None, g=None):
    """Sample ``v_t^k squared``; ``g`` optionally supplies a Gamma(shape, 1) variate."""
    a, b = v_conditional(st, prior, states, actions, t, k)
    g = rng.gamma(a) if g is None else g
    st.v2[t, k] = b / g
    return st.v2[t, k]


def update_sigma(st, prior, actions, t, k, rng=None, g=None):
    a, b = sigma_conditional(st, prior, actions, t, k)
    g = rng.gamma(a) if g is None else g
    st.sigma2[t, k] = b / g
    return st.sigma2[t, k]


def update_mu(st, prior, states, actions, t, k, rng=None, z=None):
    mean, var = mu_conditional(st, prior, states, actions, t, k)
    z = rng.standard_normal() if z is None else z
    st.mu_s[t, k] = mean + np.sqrt(var) * z
    return st.mu_s[t, k]


def update_lambda(st, prior, states, actions, t, k, rng=None, z=None):
    mean, var = lambda_conditional(st, prior, states, actions, t, k)
    z = rng.standard_normal() if z is None else z
    st.mu_a[t, k] = mean + np.sqrt(var) * z
    return st.mu_a[t, k]


@dataclass
class SweepVariates:
    """Random variates consumed by one sweep, drawn up front in a fixed order."""

    z_beta_s: np.ndarray
    z_beta_a: np.ndarray
    z_mu: np.ndarray
    z_lam: np.ndarray
    g_v: np.ndarray
    g_sigma: np.ndarray

    @classmethod
    def draw(cls, rng, prior, R):
        H, n, m = prior.shape
        return cls(
            rng.standard_normal((H - 1, n, n)),
            rng.standard_normal((H - 1, m, n)),
            rng.standard_normal((H, n)),
            rng.standard_normal((H - 1, m)),
            rng.gamma((prior.kappa_v + R) / 2),
            rng.gamma((prior.kappa_sigma + R) / 2),
        )


def gibbs_sweep(st, prior, states, actions, rng=None, variates=None):
    """One full scan, time-major; within a step: beta, v, sigma, mu, lambda.

    Readable reference implementation built from the scalar updates.
    """
    R, H, n = states.shape
    m = actions.shape[2]
    var = SweepVariates.draw(rng, prior, R) if variates is None else variates
    for t in range(H):
        if t < H - 1:
            for k in range(n):
                for j in range(n):
                    update_beta(st, prior, states, actions, t, j, k, kind="s",
                                z=var.z_beta_s[t, j, k])
                for j in range(m):
                    update_beta(st, prior, states, actions, t, j, k, kind="a",
                                z=var.z_beta_a[t, j, k])
        for k in range(n):
            update_v(st, prior, states, actions, t, k, g=var.g_v[t, k])
        if t < H - 1:
            for k in range(m):
                update_sigma(st, prior, actions, t, k, g=var.g_sigma[t, k])
        for k in range(n):
            update_mu(st, prior, states, actions, t, k, z=var.z_mu[t, k])
        if t < H - 1:
            for k in range(m):
                update_lambda(st, prior, states, actions, t, k, z=var.z_lam[t, k])
    return st


def gibbs_sweep_fast(st, prior, states, actions, rng=None, variates=None):
    """Same scan as :func:`gibbs_sweep` with incrementally maintained residuals."""
    R = states.shape[0]
    var = SweepVariates.draw(rng, prior, R) if variates is None else variates
    _sweep_kernel(
        states, actions, st.mu_s, st.mu_a, st.beta_s, st.beta_a, st.v2, st.sigma2,
        st.mask_s, st.mask_a,
        prior.beta_s0, prior.beta_a0, prior.delta_s, prior.delta_a,
        prior.mu_s0, prior.delta_mu, prior.mu_a0, prior.delta_lam,
        prior.rho_v, prior.rho_sigma,
        var.z_beta_s, var.z_beta_a, var.z_mu, var.z_lam, var.g_v, var.g_sigma,
    )
    return st


@dataclass
class PosteriorDraws:
    """Thinned posterior draws with validity flags."""

    draws: list
    valid: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)

    def __getitem__(self, i):
        return self.draws[i]

    @property
    def n_invalid(self):
        return int(np.sum(~self.valid))

    def mean_model(self):
        """Element-wise posterior mean of the valid draws."""
        good = [w for w, ok in zip(self.draws, self.valid) if ok]
        if not good:
            raise ConfigError("no valid posterior draws")
        avg = {k: np.mean([getattr(w, k) for w in good], axis=0)
               for k in ("mu_s", "mu_a", "beta_s", "beta_a", "v", "sigma")}
        return ModelParams(**avg, mask_s=good[0].mask_s, mask_a=good[0].mask_a)

    def save(self, directory):
        """Write one JSON file per draw plus a manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for i, w in enumerate(self.draws):
            name = f"draw_{i:04d}.json"
            (d / name).write_text(json.dumps(w.to_dict()) + "\n", encoding="utf-8")
            names.append(name)
        manifest = {"draws": names, "valid": [bool(x) for x in self.valid], **self.meta}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        draws = [ModelParams.from_dict(json.loads((d / name).read_text(encoding="utf-8")))
                 for name in manifest.pop("draws")]
        valid = np.array(manifest.pop("valid"), dtype=bool)
        return cls(draws, valid, manifest)


def empirical_init(states, actions, prior, ridge=1e-6):
    """Starting point from sample means, masked least squares and residual scales."""
    H, n, m = prior.shape
    R = states.shape[0]
    mu_s = states.mean(axis=0)
    mu_a = actions.mean(axis=0)
    beta_s = np.zeros((H - 1, n, n))
    beta_a = np.zeros((H - 1, m, n))
    v = np.empty((H, n))
    v[0] = states[:, 0].std(axis=0)
    for t in range(H - 1):
        X = np.concatenate([states[:, t] - mu_s[t], actions[:, t] - mu_a[t]], axis=1)
        mask = np.concatenate([prior.mask_s[t], prior.mask_a[t]], axis=0)
        for k in range(n):
            cols = np.flatnonzero(mask[:, k])
            y = states[:, t + 1, k] - mu_s[t + 1, k]
            resid = y
            if cols.size:
                Xk = X[:, cols]
                coef = np.linalg.solve(Xk.T @ Xk + ridge * R * np.eye(cols.size), Xk.T @ y)
                full = np.zeros(n + m)
                full[cols] = coef
                beta_s[t][:, k], beta_a[t][:, k] = full[:n], full[n:]
                resid = y - Xk @ coef
            v[t + 1, k] = np.sqrt(resid @ resid / R)
    sigma = actions.std(axis=0)
    # degenerate (constant) columns fall back to the prior scale
    v = np.where(v > 0, v, np.sqrt(prior.rho_v / prior.kappa_v))
    sigma = np.where(sigma > 0, sigma, np.sqrt(prior.rho_sigma / prior.kappa_sigma))
    return ModelParams(mu_s, mu_a, beta_s, beta_a, v, sigma, prior.mask_s, prior.mask_a)


class PosteriorSampler:
    """A running Gibbs chain that hands out thinned draws on demand.

    ``init`` is ``"empirical"`` (default), ``"prior"`` for a draw from the
    prior, or an explicit :class:`ModelParams`.  ``engine`` selects the
    compiled sweep (``"fast"``) or the reference implementation.
    """

    def __init__(self, states, actions, prior, rng, burn_in=500, thinning=5,
                 init="empirical", engine="fast"):
        if burn_in < 0 or thinning < 1:
            raise ConfigError("burn_in must be >= 0 and thinning >= 1")
        H, n, m = prior.shape
        self.states, self.actions = _check_data(states, actions, H, n, m)
        self.prior = prior
        self.rng = np.random.default_rng(rng)
        self.thinning = thinning
        if engine not in ("fast", "reference"):
            raise ConfigError(f"unknown Gibbs engine {engine!r}")
        self._sweep_fn = gibbs_sweep_fast if engine == "fast" else gibbs_sweep
        if isinstance(init, str):
            if init == "empirical":
                init = empirical_init(self.states, self.actions, prior)
            elif init == "prior":
                init = prior.sample(self.rng)
            else:
                raise ConfigError(f"unknown chain initialisation {init!r}")
        self.state = GibbsState(init)
        self.sweeps = 0
        for _ in range(burn_in):
            self._sweep()

    def _sweep(self):
        self._sweep_fn(self.state, self.prior, self.states, self.actions, self.rng)
        self.sweeps += 1

    def draw(self, count=1):
        out = []
        for _ in range(count):
            for _ in range(self.thinning):
                self._sweep()
            out.append(self.state.to_model())
        return out


def sample_posterior(states, actions, prior, n_draws, rng, burn_in=500, thinning=5,
                     init="empirical", engine="fast"):
    """Run a single chain and return ``n_draws`` thinned draws."""
    if n_draws < 1:
        raise ConfigError("n_draws must be positive")
    sampler = PosteriorSampler(states, actions, prior, rng, burn_in, thinning, init, engine)
    draws = sampler.draw(n_draws)
    valid = np.array([validate_model(w) for w in draws], dtype=bool)
    meta = {"burn_in": burn_in, "thinning": thinning, "n_draws": n_draws,
            "replications": int(sampler.states.shape[0])}
    return PosteriorDraws(draws, valid, meta)
