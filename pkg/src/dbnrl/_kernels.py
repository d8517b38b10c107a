"""Compiled inner loop of the Gibbs sweep.

Runs under numba when it is installed and as plain Python otherwise.
"""

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def _sum_sq(u):
    acc = 0.0
    for i in range(u.shape[0]):
        acc += u[i] * u[i]
    return acc


@njit(cache=True)
def sweep_kernel(S, A, mu_s, mu_a, beta_s, beta_a, v2, sigma2, mask_s, mask_a,
                 beta_s0, beta_a0, delta_s, delta_a, mu_s0, delta_mu, mu_a0, delta_lam,
                 rho_v, rho_sigma, z_bs, z_ba, z_mu, z_lam, g_v, g_sigma):
    R, H, n = S.shape
    m = A.shape[2]
    # E[t, :, k]: residual of s_{t+1}^k; E0[:, k]: deviation of s_1^k
    E = np.empty((max(H - 1, 1), R, n))
    E0 = np.empty((R, n))
    for r in range(R):
        for k in range(n):
            E0[r, k] = S[r, 0, k] - mu_s[0, k]
    for t in range(H - 1):
        for r in range(R):
            for k in range(n):
                acc = S[r, t + 1, k] - mu_s[t + 1, k]
                for j in range(n):
                    acc -= beta_s[t, j, k] * (S[r, t, j] - mu_s[t, j])
                for j in range(m):
                    acc -= beta_a[t, j, k] * (A[r, t, j] - mu_a[t, j])
                E[t, r, k] = acc
    alpha = np.empty(R)
    u = np.empty(R)
    for t in range(H):
        if t < H - 1:
            for k in range(n):
                vv = v2[t + 1, k]
                for j in range(n + m):
                    if j < n:
                        if not mask_s[t, j, k]:
                            beta_s[t, j, k] = 0.0
                            continue
                        cur = beta_s[t, j, k]
                        b0 = beta_s0[t, j, k]
                        d2 = delta_s[t, j, k] ** 2
                        for r in range(R):
                            alpha[r] = S[r, t, j] - mu_s[t, j]
                        z = z_bs[t, j, k]
                    else:
                        jj = j - n
                        if not mask_a[t, jj, k]:
                            beta_a[t, jj, k] = 0.0
                            continue
                        cur = beta_a[t, jj, k]
                        b0 = beta_a0[t, jj, k]
                        d2 = delta_a[t, jj, k] ** 2
                        for r in range(R):
                            alpha[r] = A[r, t, jj] - mu_a[t, jj]
                        z = z_ba[t, jj, k]
                    saa = 0.0
                    sar = 0.0
                    for r in range(R):
                        res = E[t, r, k] + alpha[r] * cur
                        saa += alpha[r] * alpha[r]
                        sar += alpha[r] * res
                    denom = d2 * saa + vv
                    new = (d2 * sar + vv * b0) / denom + np.sqrt(d2 * vv / denom) * z
                    for r in range(R):
                        E[t, r, k] += alpha[r] * (cur - new)
                    if j < n:
                        beta_s[t, j, k] = new
                    else:
                        beta_a[t, j - n, k] = new
        # residual scales of the states at t
        for k in range(n):
            if t == 0:
                ss = _sum_sq(E0[:, k])
            else:
                ss = _sum_sq(E[t - 1, :, k])
            v2[t, k] = (rho_v[t, k] + ss) / 2 / g_v[t, k]
        if t < H - 1:
            for k in range(m):
                for r in range(R):
                    u[r] = A[r, t, k] - mu_a[t, k]
                sigma2[t, k] = (rho_sigma[t, k] + _sum_sq(u)) / 2 / g_sigma[t, k]
        # state means
        for k in range(n):
            vv = v2[t, k]
            d2 = delta_mu[t, k] ** 2
            old = mu_s[t, k]
            own = 0.0
            for r in range(R):
                own += (E0[r, k] if t == 0 else E[t - 1, r, k]) + old
            prec = 1.0 / d2 + R / vv
            num = mu_s0[t, k] / d2 + own / vv
            if t < H - 1:
                for ell in range(n):
                    b = beta_s[t, k, ell]
                    if b != 0.0:
                        w2 = v2[t + 1, ell]
                        csum = 0.0
                        for r in range(R):
                            csum += b * old - E[t, r, ell]
                        prec += R * b * b / w2
                        num += b * csum / w2
            new = num / prec + np.sqrt(1.0 / prec) * z_mu[t, k]
            delta = new - old
            mu_s[t, k] = new
            for r in range(R):
                if t == 0:
                    E0[r, k] -= delta
                else:
                    E[t - 1, r, k] -= delta
            if t < H - 1:
                for ell in range(n):
                    b = beta_s[t, k, ell]
                    if b != 0.0:
                        for r in range(R):
                            E[t, r, ell] += b * delta
        # action means
        if t < H - 1:
            for k in range(m):
                s2 = sigma2[t, k]
                d2 = delta_lam[t, k] ** 2
                old = mu_a[t, k]
                tot = 0.0
                for r in range(R):
                    tot += A[r, t, k]
                prec = 1.0 / d2 + R / s2
                num = mu_a0[t, k] / d2 + tot / s2
                for ell in range(n):
                    b = beta_a[t, k, ell]
                    if b != 0.0:
                        w2 = v2[t + 1, ell]
                        csum = 0.0
                        for r in range(R):
                            csum += b * old - E[t, r, ell]
                        prec += R * b * b / w2
                        num += b * csum / w2
                new = num / prec + np.sqrt(1.0 / prec) * z_lam[t, k]
                delta = new - old
                mu_a[t, k] = new
                for ell in range(n):
                    b = beta_a[t, k, ell]
                    if b != 0.0:
                        for r in range(R):
                            E[t, r, ell] += b * delta
