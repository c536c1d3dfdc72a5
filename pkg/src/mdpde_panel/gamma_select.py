"""Data-driven choice of gamma by minimising an estimated MSE.

For a pilot coefficient vector ``beta_P`` the criterion is

    MSE(gamma) = ||beta_hat(gamma) - beta_P||^2 + tr(Sigma_beta(gamma))

where ``Sigma_beta`` is the beta block of the sandwich covariance at the
gamma fit. The pilot starts as the MDPDE at ``pilot_gamma`` and is replaced
by the fit at the previous stage's minimiser until the chosen gamma settles.

Fits over the grid do not depend on the pilot, so they are computed once and
each pilot iteration only re-scores them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import fit_ols, robust_start
from .dpd import DpdConfig, DpdFit, fit_mdpde
from .errors import DomainError, NumericError, PanelError
from .panel import PanelDataset

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(101))


@dataclass(frozen=True)
class GammaSearchConfig:
    """Settings for :func:`select_gamma`.

    ``covariance`` picks the sandwich flavour behind ``Sigma_beta``: the
    at-model closed forms (default) or the empirical plug-in version.
    """

    grid: Sequence[float] = DEFAULT_GRID
    pilot_gamma: float = 0.5
    max_pilot_iterations: int = 20
    pilot_convergence_tol: float = 0.005
    covariance: str = "model"
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8

    def __post_init__(self):
        grid = tuple(float(g) for g in self.grid)
        if not grid:
            raise DomainError("gamma grid is empty")
        if any(not math.isfinite(g) or g < 0 for g in grid):
            raise DomainError("gamma grid values must be finite and >= 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise DomainError("gamma grid must be strictly increasing")
        if self.pilot_gamma < 0 or not math.isfinite(self.pilot_gamma):
            raise DomainError("pilot_gamma must be finite and >= 0")
        if self.max_pilot_iterations < 1 or self.pilot_convergence_tol < 0:
            raise DomainError("max_pilot_iterations must be >= 1 and the tolerance >= 0")
        if self.covariance not in ("model", "empirical"):
            raise DomainError(f"unknown covariance kind {self.covariance!r}")
        object.__setattr__(self, "grid", grid)


@dataclass
class GammaSelection:
    """Outcome of :func:`select_gamma`.

    ``trace`` holds one ``(iteration, pilot_gamma, chosen_gamma)`` tuple per
    pilot stage; ``mse_curve`` is the criterion over the grid at the last
    stage (``inf`` where the grid fit failed).
    """

    gamma: float
    trace: list
    converged: bool
    fit: DpdFit
    grid: tuple
    mse_curve: np.ndarray
    invalid_gammas: list = field(default_factory=list)


def _mse(fit: DpdFit, beta_pilot) -> float:
    bias = fit.beta - np.asarray(beta_pilot, dtype=float)
    k = bias.shape[0]
    return float(bias @ bias + np.trace(fit.covariance[:k, :k]))


def estimated_mse(data: PanelDataset, gamma: float, beta_pilot, *, fit: Optional[DpdFit] = None,
                  covariance: str = "model") -> float:
    """Squared distance of the gamma fit from the pilot plus tr(Sigma_beta).

    A pre-computed ``fit`` at ``gamma`` may be passed to skip the fit.
    Raises :class:`NumericError` when the fit fails to converge.
    """
    beta_pilot = np.asarray(beta_pilot, dtype=float)
    if beta_pilot.shape != (data.n_regressors,):
        raise DomainError(f"pilot has length {beta_pilot.shape[0]}, expected {data.n_regressors}")
    if fit is None:
        fit = fit_mdpde(data, DpdConfig(gamma, covariance=covariance))
    if not fit.converged or fit.covariance is None:
        raise NumericError(f"MDPDE fit at gamma={gamma} did not converge")
    return _mse(fit, beta_pilot)


def _argmin_smallest(values) -> int:
    """Index of the minimum, earliest index among exact ties; -1 if none finite."""
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        return -1
    return int(np.flatnonzero(values == values[finite].min())[0])


def iterate_pilot(chooser: Callable[[float], float], pilot_gamma: float,
                  max_iterations: int, tol: float):
    """Run the pilot fixed-point iteration for an arbitrary ``chooser``.

    ``chooser`` maps the current pilot gamma to the minimiser it induces.
    Returns ``(gamma, trace, converged)``. Without convergence the last
    chosen value is returned and the trace shows the path taken (a cycle,
    for instance).
    """
    trace = []
    current = float(pilot_gamma)
    for iteration in range(1, max_iterations + 1):
        chosen = float(chooser(current))
        trace.append((iteration, current, chosen))
        if abs(chosen - current) <= tol:
            return chosen, trace, True
        current = chosen
    return current, trace, False


def grid_fits(data: PanelDataset, config: GammaSearchConfig) -> dict:
    """Fit the MDPDE at every grid gamma, warm-starting from the neighbour.

    Each fit also tries the OLS-ANOVA and the LAD start. Failed or
    non-converged fits map to ``None``.
    """
    base = fit_ols(data)
    robust = robust_start(data)
    fits: dict = {}
    warm = base
    for gamma in config.grid:
        cfg = DpdConfig(gamma, max_iterations=config.max_iterations,
                        gradient_tolerance=config.gradient_tolerance,
                        initializer=warm, n_restarts=1, covariance=config.covariance)
        try:
            fit = fit_mdpde(data, cfg, extra_starts=(base, robust))
        except PanelError:
            fit = None
        if fit is not None and fit.converged and fit.covariance is not None:
            fits[gamma] = fit
            warm = fit.theta_hat
        else:
            fits[gamma] = None
    return fits


def select_gamma(data: PanelDataset, config: GammaSearchConfig = GammaSearchConfig()) -> GammaSelection:
    """Adaptive gamma: minimise the estimated MSE, re-anchoring the pilot each stage.

    Raises
    ------
    NumericError
        If no grid point produces a converged fit, or the pilot fit fails.
    """
    data.check_estimable()
    fits = grid_fits(data, config)
    grid = config.grid
    invalid = [g for g in grid if fits[g] is None]
    if len(invalid) == len(grid):
        raise NumericError("no grid gamma produced a converged MDPDE fit")

    pilots: dict = {}

    def pilot_beta(gamma):
        if gamma in fits and fits[gamma] is not None:
            return fits[gamma].beta
        if gamma not in pilots:
            fit = fit_mdpde(data, DpdConfig(gamma, covariance=None))
            if not fit.converged:
                raise NumericError(f"pilot fit at gamma={gamma} did not converge")
            pilots[gamma] = fit.beta
        return pilots[gamma]

    curve = np.full(len(grid), np.inf)

    def chooser(pilot):
        beta_p = pilot_beta(pilot)
        for j, g in enumerate(grid):
            curve[j] = np.inf if fits[g] is None else _mse(fits[g], beta_p)
        return grid[_argmin_smallest(curve)]

    gamma, trace, converged = iterate_pilot(chooser, config.pilot_gamma,
                                            config.max_pilot_iterations,
                                            config.pilot_convergence_tol)
    return GammaSelection(gamma=gamma, trace=trace, converged=converged, fit=fits[gamma],
                          grid=grid, mse_curve=curve.copy(), invalid_gammas=invalid)
