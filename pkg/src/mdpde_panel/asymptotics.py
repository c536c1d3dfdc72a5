"""Asymptotic covariance pieces of the MDPDE.

Parameter order everywhere is ``(beta_1..beta_K, sigma2_alpha, sigma2_eps)``.

At the model the integrals defining J, xi and K reduce to Gaussian moments
under the tilted law N(0, Omega / (1 + gamma)) with total mass M (1 + gamma).
Writing ``a_j = tr(Omega^{-1} dOmega_j) / 2`` and
``b_jk = tr(Omega^{-1} dOmega_j Omega^{-1} dOmega_k) / 2`` (the Fisher
information of the variance components) gives

    J_beta   = M * X' Omega^{-1} X
    J_var    = M / (1 + gamma) * (b + gamma^2 a a')
    xi_var   = -M * gamma * a
    K        = J(2 gamma) - xi xi'

The beta block and xi agree with the long-hand expressions usually quoted for
this model; the variance block is what :func:`printed_variance_blocks`
returns in long-hand form and the two differ for ``sigma2_eps`` entries.
See ``docs/derivations.md``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import SingularMatrixError, SingularMatrixWarning, StructuralError
from .panel import LOG_2PI, OmegaView, PanelDataset, Theta, residuals

#: Eigenvalues below this fraction of the largest are treated as singular.
SINGULAR_RTOL = 1e-10


@dataclass(frozen=True)
class SandwichParts:
    j_matrix: np.ndarray
    k_matrix: np.ndarray
    xi_per_unit_common: np.ndarray
    m_constant: float


def _omega(theta: Theta, n_periods: int) -> OmegaView:
    return OmegaView.from_theta(theta, n_periods)


def variance_moments(omega: OmegaView):
    """Return ``(a, b)`` for the two variance components.

    ``a`` is half the gradient of log|Omega| and ``b`` the Gaussian Fisher
    information block, both in (sigma2_alpha, sigma2_eps) order.
    """
    t, se, d = omega.n_periods, omega.sigma2_eps, omega.d
    a = np.array([t / (2 * d), ((t - 1) / se + 1 / d) / 2])
    b = np.array([
        [t * t / (2 * d * d), t / (2 * d * d)],
        [t / (2 * d * d), ((t - 1) / se ** 2 + 1 / d ** 2) / 2],
    ])
    return a, b


def log_m_constant(omega: OmegaView, gamma: float) -> float:
    t = omega.n_periods
    return (-0.5 * t * gamma * LOG_2PI - 0.5 * (t + 2) * math.log1p(gamma)
            - 0.5 * gamma * (t - 1) * math.log(omega.sigma2_eps)
            - 0.5 * gamma * math.log(omega.d))


def m_constant(theta: Theta, gamma: float, n_periods: int) -> float:
    """Normalising constant M: the tilted integrals equal M times a moment."""
    return math.exp(log_m_constant(_omega(theta, n_periods), gamma))


def design_information(data: PanelDataset, omega: OmegaView) -> np.ndarray:
    """(1/N) sum_i X_i' Omega^{-1} X_i via Sherman-Morrison."""
    x = data.x
    n, t, _ = x.shape
    sxx = np.einsum("ntk,ntl->kl", x, x)
    xsum = x.sum(axis=1)
    sbar = xsum.T @ xsum
    return (sxx / omega.sigma2_eps - omega.shrink * sbar) / n


def _closed_form_J(data: PanelDataset, omega: OmegaView, gamma: float) -> np.ndarray:
    k = data.n_regressors
    m = math.exp(log_m_constant(omega, gamma))
    a, b = variance_moments(omega)
    out = np.zeros((k + 2, k + 2))
    out[:k, :k] = m * design_information(data, omega)
    out[k:, k:] = m / (1 + gamma) * (b + gamma * gamma * np.outer(a, a))
    return out


def closed_form_J(data: PanelDataset, theta: Theta, gamma: float) -> np.ndarray:
    """At-model J = (1/N) sum_i J^(i); the beta/variance cross blocks vanish."""
    return _closed_form_J(data, _omega(theta, data.n_periods), gamma)


def closed_form_xi(theta: Theta, gamma: float, n_periods: int) -> np.ndarray:
    """At-model xi; identical for every unit and zero in the beta block."""
    omega = _omega(theta, n_periods)
    a, _ = variance_moments(omega)
    m = math.exp(log_m_constant(omega, gamma))
    return np.concatenate([np.zeros(theta.beta.shape[0]), -m * gamma * a])


def closed_form_K(data: PanelDataset, theta: Theta, gamma: float) -> np.ndarray:
    """At-model K = J(2 gamma) - xi xi'."""
    omega = _omega(theta, data.n_periods)
    xi = closed_form_xi(theta, gamma, data.n_periods)
    return _closed_form_J(data, omega, 2 * gamma) - np.outer(xi, xi)


def closed_form_parts(data: PanelDataset, theta: Theta, gamma: float) -> SandwichParts:
    return SandwichParts(
        j_matrix=closed_form_J(data, theta, gamma),
        k_matrix=closed_form_K(data, theta, gamma),
        xi_per_unit_common=closed_form_xi(theta, gamma, data.n_periods),
        m_constant=m_constant(theta, gamma, data.n_periods),
    )


def printed_variance_blocks(theta: Theta, gamma: float, n_periods: int) -> dict:
    """Long-hand variance entries of J^(i) in the form commonly printed.

    Kept for comparison only. The ``sigma2_alpha`` entry coincides with
    :func:`closed_form_J`; the ``sigma2_eps`` and cross entries do not match
    the defining integrals (checked by Monte Carlo in the test suite).
    """
    t, g = n_periods, gamma
    sa, se = theta.sigma2_alpha, theta.sigma2_eps
    d = se + t * sa
    m = m_constant(theta, gamma, n_periods)
    j_aa = m * t * t * (g * g + 2) / (4 * (1 + g) * d * d)
    j_ee = (m * t * t * (g - 1) * (se + (t - 1) * sa) ** 2 / (4 * se ** 2 * d * d)
            + m * t / (4 * se ** 4) * ((t + 2) * se ** 2 + 2 * (t + 2) * se * sa + 3 * t * sa ** 2)
            + 3 * m * t * t * sa ** 2 * (2 * se + t * sa) ** 2 / (4 * se ** 4 * (1 + g) * d * d)
            - t * m * (1 + g) * sa * (2 * se + t * sa) / (2 * se ** 4 * d * d)
            * ((t + 2) * se ** 2 + (t * t + 2 * t + 3) * se * sa + 3 * (t * t - t + 1) * sa ** 2))
    j_ae = (t * m * (1 + g) / (4 * se ** 2 * d * d)
            * (2 * (t + 1) * se ** 2 + (2 * t * t + t + 3) * se * sa + 3 * (t * t - t + 1) * sa ** 2)
            - 3 * m * t * t * sa * (2 * se + t * sa) / (4 * se ** 2 * (1 + g) * d * d)
            - m * t * t * ((t - 1) * sa + se) / (2 * se * d * d))
    return {"sigma2_alpha": j_aa, "sigma2_alpha,sigma2_eps": j_ae, "sigma2_eps": j_ee}


def point_scores(x, r, omega: OmegaView) -> np.ndarray:
    """Scores for residual vectors ``r`` (n, T) with regressors ``x`` (n, T, K)."""
    a, _ = variance_moments(omega)
    v = omega.solve(r)
    sv = v.sum(axis=-1)
    u_beta = np.einsum("ntk,nt->nk", x, v)
    u_alpha = -a[0] + 0.5 * sv * sv
    u_eps = -a[1] + 0.5 * np.einsum("nt,nt->n", v, v)
    return np.column_stack([u_beta, u_alpha, u_eps])


def unit_scores(data: PanelDataset, theta: Theta) -> np.ndarray:
    """Score vectors of every unit, shape (N, K + 2)."""
    return point_scores(data.x, residuals(data, theta), _omega(theta, data.n_periods))


def score_u(data: PanelDataset, theta: Theta, unit_index: int) -> np.ndarray:
    """Gradient of log f_theta(y_i | x_i) in (beta, sigma2_alpha, sigma2_eps)."""
    i = unit_index
    r = data.y[i:i + 1] - data.x[i:i + 1] @ theta.beta
    return point_scores(data.x[i:i + 1], r, _omega(theta, data.n_periods))[0]


def point_information(x, r, omega: OmegaView) -> np.ndarray:
    """Observed information -d u / d theta, shape (n, K + 2, K + 2)."""
    n, t, k = x.shape
    _, b = variance_moments(omega)
    v = omega.solve(r)
    w = omega.solve(v)
    sv = v.sum(axis=-1)
    d = omega.d
    xsum = x.sum(axis=1)
    out = np.empty((n, k + 2, k + 2))
    out[:, :k, :k] = (np.einsum("ntk,ntl->nkl", x, x) / omega.sigma2_eps
                      - omega.shrink * np.einsum("nk,nl->nkl", xsum, xsum))
    ib_alpha = xsum * (sv / d)[:, None]
    ib_eps = np.einsum("ntk,nt->nk", x, w)
    out[:, :k, k] = out[:, k, :k] = ib_alpha
    out[:, :k, k + 1] = out[:, k + 1, :k] = ib_eps
    out[:, k, k] = -b[0, 0] + sv * sv * t / d
    out[:, k, k + 1] = out[:, k + 1, k] = -b[0, 1] + sv * sv / d
    out[:, k + 1, k + 1] = -b[1, 1] + np.einsum("nt,nt->n", v, w)
    return out


def _log_f(r, omega: OmegaView) -> np.ndarray:
    return -0.5 * (omega.n_periods * LOG_2PI + omega.logdet() + omega.quad(r))


def empirical_JK(data: PanelDataset, theta: Theta, gamma: float) -> SandwichParts:
    """Sandwich pieces whose g-integrals are replaced by sample averages.

    J keeps its closed first term and adds the sample version of
    ``int (I - gamma u u') (g - f) f^gamma``; K is the sample covariance of
    ``u f^gamma``. At the MDPDE solution the sample xi equals the model xi.
    """
    omega = _omega(theta, data.n_periods)
    k = data.n_regressors
    r = residuals(data, theta)
    u = point_scores(data.x, r, omega)
    info = point_information(data.x, r, omega)
    fg = np.exp(gamma * _log_f(r, omega))
    j_first = _closed_form_J(data, omega, gamma)

    # int (I - gamma u u') f^{1+gamma} = J - d xi / d theta
    a, b = variance_moments(omega)
    m = math.exp(log_m_constant(omega, gamma))
    dxi = np.zeros((k + 2, k + 2))
    dxi[k:, k:] = gamma * m * (b + gamma * np.outer(a, a))
    model_part = j_first - dxi
    sample_part = np.einsum("n,nij->ij", fg, info - gamma * np.einsum("ni,nj->nij", u, u)) / data.n_units
    j_mat = j_first + (sample_part - model_part)

    uf = u * fg[:, None]
    xi_hat = uf.mean(axis=0)
    k_mat = uf.T @ uf / data.n_units - np.outer(xi_hat, xi_hat)
    return SandwichParts(j_matrix=0.5 * (j_mat + j_mat.T), k_matrix=0.5 * (k_mat + k_mat.T),
                         xi_per_unit_common=xi_hat, m_constant=m)


def symmetric_inverse(mat):
    """Inverse of a symmetric matrix via eigendecomposition.

    Returns ``(inverse, singular)``; directions with eigenvalue below
    ``SINGULAR_RTOL * max|eigenvalue|`` are dropped (pseudo-inverse).
    """
    mat = 0.5 * (np.asarray(mat, dtype=float) + np.asarray(mat, dtype=float).T)
    vals, vecs = np.linalg.eigh(mat)
    scale = np.max(np.abs(vals)) if vals.size else 0.0
    keep = np.abs(vals) > SINGULAR_RTOL * scale
    singular = not np.all(keep) or scale == 0.0
    inv_vals = np.zeros_like(vals)
    inv_vals[keep] = 1.0 / vals[keep]
    return (vecs * inv_vals) @ vecs.T, singular


def sandwich_parts(data, theta, gamma, kind="model") -> SandwichParts:
    if kind == "model":
        return closed_form_parts(data, theta, gamma)
    if kind == "empirical":
        return empirical_JK(data, theta, gamma)
    raise ValueError(f"unknown sandwich kind {kind!r}")


def sandwich_covariance(data: PanelDataset, theta_hat: Theta, gamma: float,
                        kind: str = "model") -> np.ndarray:
    """Finite-sample covariance J^{-1} K J^{-1} / N of the estimate.

    A numerically singular J is replaced by its pseudo-inverse and a
    :class:`SingularMatrixWarning` is issued.
    """
    parts = sandwich_parts(data, theta_hat, gamma, kind)
    j_inv, singular = symmetric_inverse(parts.j_matrix)
    if singular:
        warnings.warn("J is numerically singular; using pseudo-inverse",
                      SingularMatrixWarning, stacklevel=2)
    cov = j_inv @ parts.k_matrix @ j_inv / data.n_units
    return 0.5 * (cov + cov.T)


def _point_terms(x_point, y_point, theta: Theta, data: PanelDataset):
    x_point = np.asarray(x_point, dtype=float)
    y_point = np.asarray(y_point, dtype=float)
    t, k = data.n_periods, data.n_regressors
    if x_point.shape != (t, k) or y_point.shape != (t,):
        raise StructuralError(f"expected x_point ({t}, {k}) and y_point ({t},)")
    omega = _omega(theta, t)
    r = (y_point - x_point @ theta.beta)[None, :]
    return x_point[None], r, omega


def _j_inverse(data, theta, gamma):
    j_inv, singular = symmetric_inverse(closed_form_J(data, theta, gamma))
    if singular:
        raise SingularMatrixError("J is singular; influence function undefined")
    return j_inv


def influence_function(x_point, y_point, theta: Theta, gamma: float,
                       data: PanelDataset) -> np.ndarray:
    """IF = J^{-1} (u f^gamma - xi) at the point (x_point, y_point).

    J is the at-model matrix averaged over the regressors in ``data``.
    """
    x, r, omega = _point_terms(x_point, y_point, theta, data)
    u = point_scores(x, r, omega)[0]
    fg = math.exp(gamma * float(_log_f(r, omega)[0]))
    xi = closed_form_xi(theta, gamma, data.n_periods)
    return _j_inverse(data, theta, gamma) @ (u * fg - xi)


def log_influence_norm_beta(x_point, y_point, theta: Theta, gamma: float,
                            data: PanelDataset) -> float:
    """log of the Euclidean norm of the beta block of the influence function.

    Evaluated in log space so that the redescending tail stays resolvable
    after f^gamma underflows. Returns ``-inf`` when the beta score is 0.
    """
    x, r, omega = _point_terms(x_point, y_point, theta, data)
    k = data.n_regressors
    u = point_scores(x, r, omega)[0]
    j_inv = _j_inverse(data, theta, gamma)
    # J is block diagonal and xi_beta = 0, so the beta block is J_b^{-1} u_b f^gamma
    norm = np.linalg.norm(j_inv[:k, :k] @ u[:k])
    if norm == 0.0:
        return -math.inf
    return math.log(norm) + gamma * float(_log_f(r, omega)[0])
