"""Empirical density power divergence, its gradient and the MDPDE fit.

For gamma > 0 the theta-dependent part of the empirical divergence is

    H(theta) = A(theta) * [ (1+gamma)^{-T/2} - (1+gamma)/(N gamma) sum_i exp(-gamma B_i / 2) ]

with ``A = (2 pi)^{-T gamma/2} |Omega|^{-gamma/2}``. The first bracket term is
``int f^{1+gamma} dy / A`` evaluated exactly; see ``docs/derivations.md``.
For gamma = 0 the objective is the mean negative log-likelihood.

The gradient has the M-estimator form

    grad H = (1 + gamma) [ xi(theta) - (1/N) sum_i u_i f_i^gamma ]

where ``xi`` is the at-model integral of ``u f^{1+gamma}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .asymptotics import (
    closed_form_J,
    point_scores,
    sandwich_covariance,
    symmetric_inverse,
    variance_moments,
)
from .errors import DomainError, NumericError, SingularMatrixWarning
from .panel import LOG_2PI, VARIANCE_FLOOR, OmegaView, PanelDataset, Theta, residuals

LOG_FLOOR = math.log(VARIANCE_FLOOR)
# largest change of a log-variance in one quasi-Newton step
_MAX_LOG_STEP = 5.0


@dataclass(frozen=True)
class DpdConfig:
    """Settings for :func:`fit_mdpde`.

    ``initializer`` is ``"ols-anova"`` or a :class:`Theta`. ``n_restarts``
    counts starting points in total (the initializer plus jittered copies).
    ``covariance`` selects the sandwich flavour (``"model"``,
    ``"empirical"``) or ``None`` to skip it.
    """

    gamma: float
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    parameter_tolerance: float = 1e-10
    initializer: Union[str, Theta] = "ols-anova"
    n_restarts: int = 3
    seed: int = 0
    covariance: Optional[str] = "model"

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise DomainError(f"gamma must be a finite value >= 0, got {self.gamma}")
        if self.gradient_tolerance <= 0 or self.parameter_tolerance <= 0:
            raise DomainError("tolerances must be strictly positive")
        if self.max_iterations < 1 or self.n_restarts < 1:
            raise DomainError("max_iterations and n_restarts must be positive")
        if not (isinstance(self.initializer, Theta) or self.initializer == "ols-anova"):
            raise DomainError("initializer must be 'ols-anova' or a Theta")
        if self.covariance not in (None, "model", "empirical"):
            raise DomainError(f"unknown covariance kind {self.covariance!r}")


@dataclass
class DpdFit:
    """Result of :func:`fit_mdpde`.

    ``gradient_norm_at_solution`` is the max-abs projected gradient in the
    (beta, log sigma2_alpha, log sigma2_eps) coordinates divided by
    ``1 + |objective|``, the quantity compared with the gradient tolerance.
    """

    theta_hat: Theta
    gamma: float
    objective_value: float
    gradient_norm_at_solution: float
    iterations_used: int
    converged: bool
    covariance: Optional[np.ndarray] = None
    notes: list = field(default_factory=list)
    boundary: bool = False
    degenerate: bool = False

    @property
    def beta(self) -> np.ndarray:
        return self.theta_hat.beta

    def standard_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _core(x, y, beta, sa, se, gamma, want_grad=True):
    """Objective (and gradient in theta) from raw arrays; variances must be valid."""
    n, t, _ = x.shape
    omega = OmegaView(sa, se, t)
    r = y - x @ beta
    b = omega.quad(r)
    logdet = omega.logdet()
    if gamma == 0.0:
        value = 0.5 * (t * LOG_2PI + logdet) + 0.5 * float(np.mean(b))
        if not want_grad:
            return value, None
        u = point_scores(x, r, omega)
        return value, -u.mean(axis=0)
    log_a = -0.5 * gamma * (t * LOG_2PI + logdet)
    e = np.exp(-0.5 * gamma * b)
    head = (1.0 + gamma) ** (-0.5 * t)
    value = math.exp(log_a) * (head - (1.0 + gamma) / (gamma * n) * float(np.sum(e)))
    if not want_grad:
        return value, None
    a_var, _ = variance_moments(omega)
    u = point_scores(x, r, omega)
    fg = math.exp(log_a) * e
    xi_scaled = np.zeros(u.shape[1])
    # (1 + gamma) * xi_model = -gamma * a * A * (1+gamma)^{-T/2}
    xi_scaled[-2:] = -gamma * a_var * math.exp(log_a) * head
    grad = xi_scaled - (1.0 + gamma) * (u * fg[:, None]).mean(axis=0)
    return value, grad


def dpd_objective(data: PanelDataset, theta: Theta, gamma: float) -> float:
    """Theta-dependent part of the empirical DPD (mean NLL when gamma = 0)."""
    if gamma < 0 or not math.isfinite(gamma):
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    value, _ = _core(data.x, data.y, theta.beta, theta.sigma2_alpha, theta.sigma2_eps,
                     float(gamma), want_grad=False)
    return value


def dpd_gradient(data: PanelDataset, theta: Theta, gamma: float) -> np.ndarray:
    """Analytic gradient of :func:`dpd_objective` in (beta, sigma2_alpha, sigma2_eps)."""
    if gamma < 0 or not math.isfinite(gamma):
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    _, grad = _core(data.x, data.y, theta.beta, theta.sigma2_alpha, theta.sigma2_eps, float(gamma))
    return grad


class _Problem:
    """Objective in z = (beta, log sigma2_alpha, log sigma2_eps) with lower bounds."""

    def __init__(self, data: PanelDataset, gamma: float):
        self.x, self.y = data.x, data.y
        self.k = data.n_regressors
        self.gamma = float(gamma)
        self.lower = np.full(self.k + 2, -np.inf)
        self.lower[-2:] = LOG_FLOOR

    def theta(self, z) -> Theta:
        return Theta(z[:self.k], math.exp(z[-2]), math.exp(z[-1]))

    def to_z(self, theta: Theta) -> np.ndarray:
        z = np.empty(self.k + 2)
        z[:self.k] = theta.beta
        z[-2] = math.log(max(theta.sigma2_alpha, VARIANCE_FLOOR))
        z[-1] = math.log(max(theta.sigma2_eps, VARIANCE_FLOOR))
        return z

    def __call__(self, z):
        sa, se = math.exp(z[-2]), math.exp(z[-1])
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                value, grad = _core(self.x, self.y, z[:self.k], sa, se, self.gamma)
            except (OverflowError, DomainError):
                return math.inf, None
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            return math.inf, None
        grad = grad.copy()
        grad[-2] *= sa
        grad[-1] *= se
        return value, grad

    def preconditioner(self, z, data) -> np.ndarray:
        """Inverse of (1 + gamma) J in z coordinates, regularised."""
        theta = self.theta(z)
        j = (1.0 + self.gamma) * closed_form_J(data, theta, self.gamma)
        scale = np.ones(self.k + 2)
        scale[-2:] = [theta.sigma2_alpha, theta.sigma2_eps]
        p = j * np.outer(scale, scale)
        vals, vecs = np.linalg.eigh(0.5 * (p + p.T))
        floor = 1e-12 * max(vals.max(), 1e-300)
        return (vecs / np.maximum(vals, floor)) @ vecs.T


def _projected(g, z, lower):
    gp = g.copy()
    active = (z <= lower + 1e-12) & (g > 0)
    gp[active] = 0.0
    return gp, active


def _bfgs(problem: _Problem, z0, h0, config: DpdConfig):
    """Quasi-Newton descent with Armijo backtracking and simple bound projection."""
    z = np.maximum(np.asarray(z0, dtype=float), problem.lower)
    f, g = problem(z)
    if not math.isfinite(f):
        raise NumericError("objective is not finite at the starting point")
    h = h0.copy()
    gtol, ptol = config.gradient_tolerance, config.parameter_tolerance
    it = 0
    converged = False
    for it in range(1, config.max_iterations + 1):
        gp, active = _projected(g, z, problem.lower)
        if np.max(np.abs(gp)) <= gtol * (1.0 + abs(f)):
            converged = True
            it -= 1
            break
        d = -h @ gp
        d[active] = 0.0
        if gp @ d >= 0:
            h = h0.copy()
            d = -h @ gp
            d[active] = 0.0
            if gp @ d >= 0:
                d = -gp
        big = np.max(np.abs(d[-2:]))
        if big > _MAX_LOG_STEP:
            d *= _MAX_LOG_STEP / big
        step, accepted = 1.0, False
        while step > 1e-14:
            z_new = np.maximum(z + step * d, problem.lower)
            f_new, g_new = problem(z_new)
            if math.isfinite(f_new):
                decrease = gp @ (z_new - z)
                if f_new <= f + 1e-4 * decrease:
                    accepted = True
                    break
                # objective flat to rounding: accept if the gradient shrinks
                if (abs(f_new - f) <= 1e-14 * (1.0 + abs(f))
                        and np.max(np.abs(_projected(g_new, z_new, problem.lower)[0]))
                        < np.max(np.abs(gp))):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            if not np.array_equal(h, h0):
                h = h0.copy()
                continue
            break
        s = z_new - z
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            v = np.eye(len(s)) - rho * np.outer(s, yv)
            h = v @ h @ v.T + rho * np.outer(s, s)
        z, f, g = z_new, f_new, g_new
        if np.max(np.abs(s)) <= ptol * (1.0 + np.max(np.abs(z))):
            gp, _ = _projected(g, z, problem.lower)
            converged = np.max(np.abs(gp)) <= gtol * (1.0 + abs(f))
            break
    gp, _ = _projected(g, z, problem.lower)
    gnorm = float(np.max(np.abs(gp))) / (1.0 + abs(f))
    return z, f, gnorm, it, converged


def _starts(problem: _Problem, base: Theta, data: PanelDataset, config: DpdConfig):
    z0 = problem.to_z(base)
    starts = [z0]
    if config.n_restarts > 1:
        rng = np.random.default_rng(config.seed)
        xp, _ = data.pooled()
        bse = np.sqrt(np.diag(np.linalg.pinv(xp.T @ xp)) * (base.sigma2_alpha + base.sigma2_eps))
        for _ in range(config.n_restarts - 1):
            z = z0.copy()
            z[:problem.k] += 2.0 * bse * rng.standard_normal(problem.k)
            # shrink variances on average: pulls starts toward the down-weighting basin
            z[-2:] += rng.normal(-0.7, 0.5, size=2)
            starts.append(np.maximum(z, problem.lower))
    return starts


def fit_mdpde(data: PanelDataset, config: DpdConfig, extra_starts=()) -> DpdFit:
    """Minimise the empirical DPD over beta, sigma2_alpha >= 0, sigma2_eps > 0.

    Every start (initializer, ``n_restarts - 1`` jittered copies, an
    outlier-resistant LAD start when ``n_restarts > 1`` and any
    ``extra_starts`` thetas) is run to convergence and the lowest converged
    objective wins. ``sigma2_alpha`` may settle on the variance floor, which
    is reported as a boundary solution.
    """
    data.check_estimable()
    from .baselines import fit_ols, robust_start

    base = config.initializer if isinstance(config.initializer, Theta) else fit_ols(data)
    problem = _Problem(data, config.gamma)
    starts = _starts(problem, base, data, config)
    if config.n_restarts > 1:
        # least squares starts can sit on a flat plateau of huge variances
        # when a few responses are gross outliers
        starts.append(problem.to_z(robust_start(data)))
    starts += [problem.to_z(t) for t in extra_starts]

    best = None
    for z0 in starts:
        h0 = problem.preconditioner(np.maximum(z0, problem.lower), data)
        result = _bfgs(problem, z0, h0, config)
        if best is None or (result[4], -result[1]) > (best[4], -best[1]):
            best = result
    z, f, gnorm, iters, converged = best

    theta = problem.theta(z)
    notes = []
    boundary = z[-2] <= LOG_FLOOR + 1e-9
    degenerate = z[-1] <= LOG_FLOOR + 1e-9
    if boundary:
        notes.append("boundary solution: sigma2_alpha at the variance floor")
    if degenerate:
        notes.append("degenerate: sigma2_eps at the variance floor")
    if not converged:
        notes.append(f"not converged after {iters} iterations (scaled gradient {gnorm:.3g})")
    cov = None
    if config.covariance is not None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cov = sandwich_covariance(data, theta, config.gamma, kind=config.covariance)
        if any(issubclass(w.category, SingularMatrixWarning) for w in caught):
            notes.append("singular J: covariance uses a pseudo-inverse")
        if boundary:
            notes.append("boundary solution: interpret the covariance with caution")
    return DpdFit(theta_hat=theta, gamma=float(config.gamma), objective_value=float(f),
                  gradient_norm_at_solution=gnorm, iterations_used=int(iters),
                  converged=bool(converged), covariance=cov, notes=notes,
                  boundary=bool(boundary), degenerate=bool(degenerate))


def unit_weights(data: PanelDataset, theta: Theta, gamma: float) -> np.ndarray:
    """Relative down-weighting exp(-gamma B_i / 2) of each unit, in [0, 1]."""
    omega = OmegaView.from_theta(theta, data.n_periods)
    return np.exp(-0.5 * gamma * omega.quad(residuals(data, theta)))
