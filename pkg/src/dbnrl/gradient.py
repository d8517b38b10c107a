"""Policy gradients of the expected cumulative reward.

``J(theta; w)`` is a sum of per-step expected rewards ``r_bar_t``.  A gain
``vartheta_h`` influences ``r_bar_t`` through the mean deviation ``d_h`` and
the chain of closed-loop matrices between ``h`` and ``t``:

    d r_bar_t / d vartheta_h = d_h (g_t . delta_h^t),   h < t
    d r_bar_t / d vartheta_t = d_t b_t.T

with ``g_t = c_t + vartheta_t b_t`` (``g_H = c_H``) and
``delta_h^t = R_{h+1,t-1} beta_a_h.T``.  The nested backpropagation pass
walks ``h`` downward for each ``t`` and extends the pathway product by one
factor per step, so the whole gradient costs ``O(H^2)`` matrix products.

Time indices in the public signatures are 1-based.  Gradients have the
shape of ``vartheta``, (H-1, n, m).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .model import _check_dims, closed_loop, mean_deviations, validate_model


def _g(policy, reward, t, H):
    """Sensitivity of ``r_bar_t`` to the state deviation at ``t`` (1-based)."""
    if t == H:
        return np.asarray(reward.c[t - 1])
    return reward.c[t - 1] + policy.vartheta[t - 1] @ reward.b[t - 1]


def nbp_gradient(w, policy, reward, s1):
    """Exact gradient of ``J`` by nested backpropagation."""
    _check_dims(w, policy)
    H = w.H
    grad = np.zeros(policy.shape)
    if not validate_model(w) or H == 1:
        return grad
    A = closed_loop(w, policy)
    d = mean_deviations(w, policy, s1)
    ba_T = np.swapaxes(w.beta_a, 1, 2)
    for t in range(1, H + 1):
        g = _g(policy, reward, t, H)
        if t < H:
            grad[t - 1] += np.outer(d[t - 1], reward.b[t - 1])
        # P holds R_{h+1,t-1}; u = P.T g so that g . delta = u . beta_a_h.T
        u = g.copy()
        for h in range(t - 1, 0, -1):
            grad[h - 1] += np.outer(d[h - 1], u @ ba_T[h - 1])
            u = A[h - 1].T @ u
    return grad


def nbp_gradient_matrix(w, policy, reward, s1):
    """Same gradient, carrying the full pathway matrix ``R_{h+1,t-1}``.

    This follows the textbook recursion literally (matrix-matrix products)
    and serves as the timed nested-backpropagation routine.
    """
    _check_dims(w, policy)
    H, n = w.H, w.n
    grad = np.zeros(policy.shape)
    if not validate_model(w) or H == 1:
        return grad
    A = closed_loop(w, policy)
    d = mean_deviations(w, policy, s1)
    ba_T = np.swapaxes(w.beta_a, 1, 2)
    for t in range(1, H + 1):
        g = _g(policy, reward, t, H)
        if t < H:
            grad[t - 1] += np.outer(d[t - 1], reward.b[t - 1])
        P = np.eye(n)
        for h in range(t - 1, 0, -1):
            delta = P @ ba_T[h - 1]
            grad[h - 1] += np.outer(d[h - 1], g @ delta)
            P = P @ A[h - 1]
    return grad


def brute_force_gradient(w, policy, reward, s1):
    """Reference gradient that rebuilds every pathway product from scratch.

    For each pair ``(t, h)`` the deviation ``d_h`` and the product
    ``R_{h+1,t-1}`` are recomputed from the raw coefficients, so the cost is
    cubic in the horizon.
    """
    _check_dims(w, policy)
    H, n = w.H, w.n
    grad = np.zeros(policy.shape)
    if not validate_model(w) or H == 1:
        return grad
    s1 = np.asarray(s1, dtype=float)

    def A(j):
        return w.beta_s[j - 1].T + w.beta_a[j - 1].T @ policy.vartheta[j - 1].T

    def deviation(h):
        d = s1 - w.mu_s[0]
        for j in range(1, h):
            d = A(j) @ d
        return d

    for t in range(1, H + 1):
        g = _g(policy, reward, t, H)
        if t < H:
            grad[t - 1] += np.outer(deviation(t), reward.b[t - 1])
        for h in range(1, t):
            P = np.eye(n)
            for j in range(h + 1, t):
                P = A(j) @ P
            delta = P @ w.beta_a[h - 1].T
            grad[h - 1] += np.outer(deviation(h), g @ delta)
    return grad


@dataclass
class GradientTape:
    """Forward quantities needed for any partial derivative ``d r_bar_t / d vartheta_h``.

    ``pathway[h, t]`` stores ``R_{h,t}`` (1-based, zero-padded) for
    ``1 <= h <= t+1 <= H``; ``deviations`` stores ``d_t``.
    """

    closed_loop: np.ndarray
    deviations: np.ndarray
    pathway: np.ndarray
    beta_a: np.ndarray
    vartheta: np.ndarray

    @property
    def H(self):
        return self.deviations.shape[0]


def record_tape(w, policy, s1):
    _check_dims(w, policy)
    H, n = w.H, w.n
    A = closed_loop(w, policy)
    d = mean_deviations(w, policy, s1)
    R = np.zeros((H + 1, H + 1, n, n))
    for t in range(0, H):
        R[t + 1, t] = np.eye(n)
        for h in range(t, 0, -1):
            R[h, t] = R[h + 1, t] @ A[h - 1]
    return GradientTape(A, d, R, np.array(w.beta_a), np.array(policy.vartheta))


def partial_reward_gradient(tape, reward, t, h):
    """``d r_bar_t / d vartheta_h`` as an (n, m) matrix (1-based indices)."""
    H = tape.H
    if not (1 <= h <= min(t, H - 1) and t <= H):
        raise IndexError(f"need 1 <= h <= min(t, H-1) and t <= H, got h={h}, t={t}")
    d_h = tape.deviations[h - 1]
    if h == t:
        return np.outer(d_h, reward.b[t - 1])
    if t == H:
        g = np.asarray(reward.c[t - 1])
    else:
        g = reward.c[t - 1] + tape.vartheta[t - 1] @ reward.b[t - 1]
    delta = tape.pathway[h + 1, t - 1] @ tape.beta_a[h - 1].T
    return np.outer(d_h, g @ delta)


class DrawStack:
    """Coefficients of several networks stacked along a leading axis."""

    def __init__(self, draws):
        draws = list(draws)
        if not draws:
            raise ValueError("need at least one posterior draw")
        self.valid = np.array([validate_model(w) for w in draws])
        keep = [w for w, ok in zip(draws, self.valid) if ok]
        self.size = len(draws)
        self.H, self.n, self.m = draws[0].H, draws[0].n, draws[0].m
        if keep:
            self.mu_s = np.stack([w.mu_s for w in keep])
            self.mu_a = np.stack([w.mu_a for w in keep])
            self.beta_s = np.stack([w.beta_s for w in keep])
            self.beta_a = np.stack([w.beta_a for w in keep])

    def closed_loop(self, policy):
        bs = np.swapaxes(self.beta_s, -1, -2)
        ba = np.swapaxes(self.beta_a, -1, -2)
        return bs + ba @ np.swapaxes(policy.vartheta, 1, 2)

    def deviations(self, A, s1):
        d = np.empty((A.shape[0], self.H, self.n))
        d[:, 0] = np.asarray(s1, dtype=float) - self.mu_s[:, 0]
        for j in range(self.H - 1):
            d[:, j + 1] = np.einsum("bij,bj->bi", A[:, j], d[:, j])
        return d


def nbp_gradient_stack(stack, policy, reward, s1):
    """Sum over the valid draws of ``stack`` of the nested-backpropagation gradient.

    Same recursion as :func:`nbp_gradient`, run for all draws at once.
    Returns ``(gradient_sum, values)`` where ``values`` holds ``J`` per draw
    (``H * m_c`` for invalid draws).
    """
    H = stack.H
    grad = np.zeros(policy.shape)
    values = np.full(stack.size, H * reward.m_c, dtype=float)
    if not np.any(stack.valid):
        return grad, values
    A = stack.closed_loop(policy)
    d = stack.deviations(A, s1)
    total = reward.m.sum() + np.einsum("tk,btk->b", reward.c, stack.mu_s + d)
    if H > 1:
        b = reward.b[:-1]
        total += np.einsum("tj,btj->b", b, stack.mu_a)
        total += np.einsum("tj,tij,bti->b", b, policy.vartheta, d[:, :-1])
    values[stack.valid] = total
    if H == 1:
        return grad, values
    ba_T = np.swapaxes(stack.beta_a, -1, -2)
    d_T = np.ascontiguousarray(np.transpose(d, (1, 2, 0)))
    for t in range(1, H + 1):
        g = _g(policy, reward, t, H)
        if t < H:
            grad[t - 1] += np.outer(d[:, t - 1].sum(axis=0), reward.b[t - 1])
        # u holds R_{h+1,t-1}.T g per draw, as a row vector
        u = np.broadcast_to(g, (A.shape[0], 1, stack.n))
        for h in range(t - 1, 0, -1):
            grad[h - 1] += d_T[h - 1] @ (u @ ba_T[:, h - 1])[:, 0]
            u = u @ A[:, h - 1]
    return grad, values


def saa_gradient(draws, policy, reward, s1, method=nbp_gradient):
    """Sample average of per-draw gradients; invalid draws contribute zero."""
    draws = list(draws)
    if not draws:
        raise ValueError("need at least one posterior draw")
    total = np.zeros(policy.shape)
    for w in draws:
        if validate_model(w):
            total += method(w, policy, reward, s1)
    return total / len(draws)


def random_instance(rng, H, n, m, scale=0.4):
    """Random network, policy, reward and initial state for tests and timing."""
    from .model import ModelParams, PolicyParams, RewardSpec

    w = ModelParams(
        rng.normal(size=(H, n)), rng.normal(size=(H - 1, m)),
        scale * rng.normal(size=(H - 1, n, n)) / np.sqrt(n),
        scale * rng.normal(size=(H - 1, m, n)),
        rng.uniform(0.2, 1.0, (H, n)), rng.uniform(0.2, 1.0, (H - 1, m)),
    )
    policy = PolicyParams(scale * rng.normal(size=(H - 1, n, m)) / np.sqrt(n))
    reward = RewardSpec(rng.normal(size=H), rng.normal(size=(H, m)), rng.normal(size=(H, n)))
    return w, policy, reward, rng.normal(size=n)


def benchmark(horizons, n=5, m=1, repeats=5, seed=0, clock=time.perf_counter):
    """Time brute force against nested backpropagation for each horizon.

    Returns rows ``(H, n, m, method, mean_seconds, stderr_seconds)``.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for H in horizons:
        w, policy, reward, s1 = random_instance(rng, H, n, m)
        for name, fn in (("nbp", nbp_gradient_matrix), ("brute", brute_force_gradient)):
            times = []
            for _ in range(repeats):
                t0 = clock()
                fn(w, policy, reward, s1)
                times.append(clock() - t0)
            times = np.array(times)
            se = times.std(ddof=1) / np.sqrt(repeats) if repeats > 1 else 0.0
            rows.append((H, n, m, name, float(times.mean()), float(se)))
    return rows


def write_benchmark_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["H", "n", "m", "method", "mean_seconds", "stderr_seconds"])
        for H, n, m, name, mean, se in rows:
            writer.writerow([H, n, m, name, repr(mean), repr(se)])
