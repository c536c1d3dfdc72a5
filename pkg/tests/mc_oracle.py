"""Integration oracle for the at-model matrices, independent of the library.

Integrals of the form ``int g(y) f^{1+c}(y) dy`` are rewritten with the
change of measure ``f^{1+c} = C(c) * phi(z; 0, Omega/(1+c))`` (z = y - x beta)
and estimated by scrambled Sobol points mapped to normals, each paired with
its antithetic ``-z``. Scores are built from the dense Omega inverse, so no
library algebra is reused.
"""

import math

import numpy as np
from scipy.stats import norm, qmc


def dense_omega(sigma2_alpha, sigma2_eps, t):
    return sigma2_eps * np.eye(t) + sigma2_alpha * np.ones((t, t))


def mass(omega, c):
    """int f^{1+c} dy for N(0, Omega) in T dimensions."""
    t = omega.shape[0]
    _, logdet = np.linalg.slogdet(omega)
    return math.exp(-0.5 * c * t * math.log(2 * math.pi) - 0.5 * c * logdet - 0.5 * t * math.log1p(c))


def dense_scores(x_i, z, omega):
    """Scores (beta, sigma2_alpha, sigma2_eps) at residuals z (n, T)."""
    t = omega.shape[0]
    inv = np.linalg.inv(omega)
    e = np.ones(t)
    w = z @ inv  # Omega^{-1} r for each row
    u_beta = w @ x_i
    u_alpha = -0.5 * e @ inv @ e + 0.5 * (w @ e) ** 2
    u_eps = -0.5 * np.trace(inv) + 0.5 * np.einsum("nt,nt->n", w, w)
    return np.column_stack([u_beta, u_alpha, u_eps])


def moments(x_i, sigma2_alpha, sigma2_eps, c, m_log2=23, seed=0, chunk_log2=19):
    """Return (int u f^{1+c}, int u u' f^{1+c}) for one unit's regressors x_i (T, K)."""
    t, k = x_i.shape
    omega = dense_omega(sigma2_alpha, sigma2_eps, t)
    chol = np.linalg.cholesky(omega / (1.0 + c))
    sampler = qmc.Sobol(d=t, scramble=True, seed=seed)
    p = k + 2
    first = np.zeros(p)
    second = np.zeros((p, p))
    total = 0
    for _ in range(2 ** (m_log2 - chunk_log2)):
        pts = sampler.random_base2(chunk_log2) if total == 0 else sampler.random(2 ** chunk_log2)
        # Sobol points live on a 2^-30 grid that includes 0; move each to the
        # midpoint of its cell so the normal quantile stays finite
        z = norm.ppf(pts + 2.0 ** -31) @ chol.T
        for sign in (1.0, -1.0):
            u = dense_scores(x_i, sign * z, omega)
            first += u.sum(axis=0)
            second += u.T @ u
            total += u.shape[0]
    scale = mass(omega, c) / total
    if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
        raise FloatingPointError("integration oracle produced non-finite moments")
    return first * scale, second * scale


def oracle_parts(x, sigma2_alpha, sigma2_eps, gamma, seed=0, **kw):
    """Unit-averaged xi, J and K = J(2 gamma) - xi xi' for regressors x (N, T, K).

    Every unit and tilt gets its own scramble, derived from ``seed``.
    """
    xi = j = j2 = 0.0
    kk = 0.0
    for i, x_i in enumerate(x):
        f1, s1 = moments(x_i, sigma2_alpha, sigma2_eps, gamma, seed=np.random.default_rng([seed, 2 * i]), **kw)
        _, s2 = moments(x_i, sigma2_alpha, sigma2_eps, 2.0 * gamma, seed=np.random.default_rng([seed, 2 * i + 1]), **kw)
        xi = xi + f1
        j = j + s1
        kk = kk + s2 - np.outer(f1, f1)
    n = x.shape[0]
    return xi / n, j / n, kk / n
