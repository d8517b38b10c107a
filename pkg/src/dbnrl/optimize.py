"""Projected stochastic gradient ascent over a box of policy gains."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .gradient import DrawStack, nbp_gradient, nbp_gradient_stack
from .errors import ConfigError, NumericError
from .model import PolicyParams, flatten_gains, policy_value, validate_model


@dataclass(frozen=True)
class OptimizerConfig:
    """Step size ``eta_k = eta0 * k^(-p)`` with ``1/2 < p <= 1``."""

    iterations: int = 200
    draws_per_iteration: int = 10
    eta0: float = 0.05
    p: float = 0.6
    window: float = 0.1
    fresh_draws: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.draws_per_iteration < 1:
            raise ConfigError("draws_per_iteration must be positive")
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be positive")
        if not 0.5 < self.p <= 1.0:
            raise ConfigError("step-size exponent p must lie in (0.5, 1]")
        if not 0.0 < self.window <= 0.5:
            raise ConfigError("diagnostic window must lie in (0, 0.5]")

    def stepsize(self, k):
        return self.eta0 * float(k) ** (-self.p)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizationTrace:
    iteration: list = field(default_factory=list)
    J_hat: list = field(default_factory=list)
    grad_norm_sq: list = field(default_factory=list)
    projected: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    feasible: list = field(default_factory=list)

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def __len__(self):
        return len(self.iteration)

    def to_csv(self, path, timing=True):
        """Write the trace; ``timing=False`` blanks the wall-clock column."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "J_hat", "grad_norm_sq", "projected", "eta", "seconds"])
            for i in range(len(self)):
                secs = repr(self.seconds[i]) if timing else ""
                writer.writerow([self.iteration[i], repr(self.J_hat[i]),
                                 repr(self.grad_norm_sq[i]), int(self.projected[i]),
                                 repr(self.eta[i]), secs])


def project_box(theta, lower, upper):
    """Euclidean projection onto ``[lower, upper]`` (coordinate-wise clipping)."""
    return np.minimum(np.maximum(theta, lower), upper)


def generalized_gradient(theta, grad, eta, lower, upper):
    """``(Proj(theta + eta grad) - theta) / eta``: the projected ascent direction.

    Equals ``grad`` in the interior of the box and vanishes at stationary points.
    """
    return (project_box(theta + eta * grad, lower, upper) - theta) / eta


def projected_ascent(grad_fn, theta0, lower, upper, config, value_fn=None, rng=None):
    """Generic projected stochastic gradient ascent.

    ``grad_fn(theta, k, rng)`` returns a (possibly stochastic) ascent
    direction; ``value_fn(theta, k)`` optionally reports the objective.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    theta = project_box(np.asarray(theta0, dtype=float), lower, upper)
    rng = np.random.default_rng(rng)
    trace = OptimizationTrace()
    start = time.perf_counter()
    for k in range(1, config.iterations + 1):
        eta = config.stepsize(k)
        grad = np.asarray(grad_fn(theta, k, rng), dtype=float)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at iteration {k}")
        raw = theta + eta * grad
        new = project_box(raw, lower, upper)
        g_c = (new - theta) / eta
        value = value_fn(theta, k) if value_fn is not None else float("nan")
        theta = new
        trace.append(iteration=k, J_hat=float(value), grad_norm_sq=float(g_c @ g_c),
                     projected=bool(np.any(raw != new)), eta=eta,
                     seconds=time.perf_counter() - start,
                     feasible=bool(np.all(theta >= lower) and np.all(theta <= upper)))
    return theta, trace


def _as_draw_source(draws, config):
    """Turn a pool of draws or a sampler into ``source(k, rng) -> list``."""
    if hasattr(draws, "draw"):
        sampler = draws
        return lambda k, rng: sampler.draw(config.draws_per_iteration)
    pool = list(draws)
    if not pool:
        raise ConfigError("need at least one posterior draw")
    B = config.draws_per_iteration
    if B >= len(pool):
        return lambda k, rng: pool
    if config.fresh_draws:
        return lambda k, rng: [pool[i] for i in rng.choice(len(pool), B, replace=False)]
    fixed = pool[:B]
    return lambda k, rng: fixed


def dbn_rl_optimize(draws, reward, s1, config, policy0, rng=None, method=nbp_gradient):
    """Maximise the posterior-averaged expected reward over the box of ``policy0``.

    ``draws`` is either a list of :class:`ModelParams` (a fixed pool, resampled
    per iteration when ``config.fresh_draws``) or an object with a
    ``draw(count)`` method, such as a running Gibbs chain.  The default
    nested-backpropagation gradient is evaluated for the whole batch at once.
    """
    source = _as_draw_source(draws, config)
    lower, upper = policy0.flat_box()
    cache = {}

    def grad_fn(theta, k, rng):
        batch = source(k, rng)
        pol = policy0.with_flat(theta)
        if method is nbp_gradient:
            total, values = nbp_gradient_stack(DrawStack(batch), pol, reward, s1)
        else:
            total = np.zeros(pol.shape)
            values = []
            for w in batch:
                if validate_model(w):
                    total += method(w, pol, reward, s1)
                values.append(policy_value(w, pol, reward, s1))
        cache[k] = float(np.mean(values))
        return flatten_gains(total / len(batch))

    theta, trace = projected_ascent(grad_fn, policy0.flatten(), lower, upper, config,
                                    value_fn=lambda th, k: cache.pop(k), rng=rng)
    return policy0.with_flat(theta), trace


def convergence_diagnostics(trace, window=0.1):
    """First- and last-window means of the squared gradient-mapping norm."""
    g = np.asarray(trace.grad_norm_sq, dtype=float)
    if g.size == 0:
        raise ValueError("empty trace")
    w = max(1, int(round(window * g.size)))
    first, last = float(g[:w].mean()), float(g[-w:].mean())
    return {
        "first_window_mean": first,
        "last_window_mean": last,
        "ratio": last / first if first > 0 else float("nan"),
        "all_feasible": bool(np.all(trace.feasible)),
        "iterations": int(g.size),
    }


def save_policy(policy, path):
    Path(path).write_text(json.dumps(policy.to_dict(), indent=1) + "\n", encoding="utf-8")

