"""Shapley attribution of predicted state deviations to earlier inputs.

The value of a coalition ``U`` of inputs observed at step ``h`` is the
conditional mean of ``s_{t+1}`` when the inputs outside ``U`` stay at their
means.  Under the linear network this game is additive, so each input's
Shapley value is its own linear contribution

    Sh(s_h^k) = R_{h+1,t} beta_s_h.T e_k (s_h^k - mu_h^k)
    Sh(a_h^k) = R_{h+1,t} beta_a_h.T e_k (a_h^k - lambda_h^k)

and the values sum to ``E[s_{t+1} | s_h, a_h] - mu_{t+1}``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import _check_dims, pathway_product, validate_model

MAX_ORACLE_INPUTS = 12


@dataclass
class AttributionReport:
    """Contributions of each input (rows) to each coordinate of ``s_{t+1}`` (columns)."""

    h: int
    t: int
    names: list
    contributions: np.ndarray
    baseline: np.ndarray
    prediction: np.ndarray

    def to_csv(self, path, output_names=None):
        n_out = self.contributions.shape[1]
        if output_names is None:
            output_names = [f"s{k}" for k in range(n_out)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["h", "t", "input_name", "output_coordinate", "contribution",
                             "baseline", "conditioned_value"])
            for i, name in enumerate(self.names):
                for k in range(n_out):
                    writer.writerow([self.h, self.t, name, output_names[k],
                                     repr(float(self.contributions[i, k])),
                                     repr(float(self.baseline[k])),
                                     repr(float(self.prediction[k]))])

    def scaled(self, factor):
        """Report in other units: every output coordinate ``k`` multiplied by ``factor[k]``."""
        factor = np.asarray(factor, dtype=float)
        return AttributionReport(self.h, self.t, list(self.names), self.contributions * factor,
                                 self.baseline * factor, self.prediction * factor)


def _check_inputs(w, h, t, s_h, a_h):
    if not (1 <= h <= t <= w.H - 1):
        raise IndexError(f"need 1 <= h <= t <= H-1, got h={h}, t={t}, H={w.H}")
    s_h = np.asarray(s_h, dtype=float).reshape(w.n)
    a_h = np.asarray(a_h, dtype=float).reshape(w.m)
    return s_h, a_h


def _input_effects(w, policy, h, t):
    """(n + m, n) matrix mapping input deviations at ``h`` to ``s_{t+1}``."""
    _check_dims(w, policy)
    R = pathway_product(w, policy, h + 1, t)
    return np.vstack([(R @ w.beta_s[h - 1].T).T, (R @ w.beta_a[h - 1].T).T])


def _input_names(w, state_names=None, action_names=None):
    state_names = state_names or [f"s{k}" for k in range(w.n)]
    action_names = action_names or [f"a{k}" for k in range(w.m)]
    return list(state_names) + list(action_names)


def conditional_mean(w, policy, h, t, s_h, a_h, coalition):
    """``E[s_{t+1}]`` with the inputs in ``coalition`` observed and the rest at their means."""
    s_h, a_h = _check_inputs(w, h, t, s_h, a_h)
    dev = np.concatenate([s_h - w.mu_s[h - 1], a_h - w.mu_a[h - 1]])
    keep = np.zeros(dev.size, dtype=bool)
    keep[list(coalition)] = True
    E = _input_effects(w, policy, h, t)
    return w.mu_s[t] + np.where(keep, dev, 0.0) @ E


def shapley_closed_form(w, policy, h, t, s_h, a_h, state_names=None, action_names=None):
    s_h, a_h = _check_inputs(w, h, t, s_h, a_h)
    E = _input_effects(w, policy, h, t)
    dev = np.concatenate([s_h - w.mu_s[h - 1], a_h - w.mu_a[h - 1]])
    contrib = dev[:, None] * E
    return AttributionReport(h, t, _input_names(w, state_names, action_names), contrib,
                             np.array(w.mu_s[t]), w.mu_s[t] + contrib.sum(axis=0))


def shapley_oracle(w, policy, h, t, s_h, a_h, state_names=None, action_names=None):
    """Shapley values by explicit enumeration of all coalitions (exponential cost)."""
    s_h, a_h = _check_inputs(w, h, t, s_h, a_h)
    p = w.n + w.m
    if p > MAX_ORACLE_INPUTS:
        raise ConfigError(f"subset enumeration limited to {MAX_ORACLE_INPUTS} inputs, got {p}")
    value = {}
    for size in range(p + 1):
        for U in itertools.combinations(range(p), size):
            value[U] = conditional_mean(w, policy, h, t, s_h, a_h, U)
    contrib = np.zeros((p, w.n))
    for i in range(p):
        others = [j for j in range(p) if j != i]
        for size in range(p):
            weight = math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)
            for U in itertools.combinations(others, size):
                with_i = tuple(sorted(U + (i,)))
                contrib[i] += weight * (value[with_i] - value[U])
    full = value[tuple(range(p))]
    return AttributionReport(h, t, _input_names(w, state_names, action_names), contrib,
                             np.array(w.mu_s[t]), full)


def expected_shapley(draws, policy, h, t, s_h, a_h, state_names=None, action_names=None):
    """Posterior-averaged attribution over the valid draws.

    Returns the averaged report and the number of draws skipped as invalid.
    """
    reports = []
    skipped = 0
    for w in draws:
        if not validate_model(w):
            skipped += 1
            continue
        reports.append(shapley_closed_form(w, policy, h, t, s_h, a_h, state_names, action_names))
    if not reports:
        raise ConfigError("no valid posterior draws to attribute over")
    first = reports[0]
    avg = AttributionReport(
        h, t, first.names,
        np.mean([r.contributions for r in reports], axis=0),
        np.mean([r.baseline for r in reports], axis=0),
        np.mean([r.prediction for r in reports], axis=0),
    )
    return avg, skipped
