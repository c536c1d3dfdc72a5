"""Least-squares comparison estimators and the estimator plugin slot."""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PanelError, RankDeficiencyError, StructuralError
from .panel import VARIANCE_FLOOR, OmegaView, PanelDataset, Theta, residuals

ESTIMATOR_KINDS = ("ols", "gls", "mdpde-fixed", "mdpde-adaptive", "external-plugin")
_KIND_ALIASES = {"mdpde-fixed-gamma": "mdpde-fixed", "mdpde-fixed-γ": "mdpde-fixed",
                 "mdpde": "mdpde-fixed", "external": "external-plugin"}


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry of a benchmark run.

    ``parameters`` holds kind-specific settings: ``gamma`` for
    ``mdpde-fixed``; grid and pilot settings for ``mdpde-adaptive``;
    ``command`` (list or shell string) for ``external-plugin``.
    """

    name: str
    kind: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        if kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {ESTIMATOR_KINDS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "parameters", dict(self.parameters))
        if kind == "mdpde-fixed" and "gamma" not in self.parameters:
            raise ValueError(f"estimator {self.name!r}: mdpde-fixed needs a gamma parameter")
        if kind == "external-plugin" and "command" not in self.parameters:
            raise ValueError(f"estimator {self.name!r}: external-plugin needs a command")


def check_full_rank(x, names) -> None:
    """Raise :class:`RankDeficiencyError` naming columns spanned by earlier ones."""
    x = np.asarray(x, dtype=float)
    scale = np.linalg.norm(x, axis=0)
    collinear = []
    kept = []
    for j in range(x.shape[1]):
        if scale[j] == 0.0:
            collinear.append(names[j])
            continue
        trial = x[:, kept + [j]] / scale[kept + [j]]
        if np.linalg.matrix_rank(trial, tol=1e-10 * max(trial.shape)) < len(kept) + 1:
            collinear.append(names[j])
        else:
            kept.append(j)
    if collinear:
        raise RankDeficiencyError(
            "design matrix is rank deficient; collinear column(s): " + ", ".join(collinear),
            collinear,
        )


def anova_components(resid) -> tuple[float, float]:
    """One-way ANOVA variance components from an N x T residual matrix.

    sigma2_eps is the within mean square; sigma2_alpha is (between mean
    square - within mean square) / T truncated at 0. sigma2_eps is raised to
    :data:`VARIANCE_FLOOR` when the residuals have no within variation.
    """
    resid = np.asarray(resid, dtype=float)
    n, t = resid.shape
    unit_means = resid.mean(axis=1)
    within = float(np.sum((resid - unit_means[:, None]) ** 2)) / (n * (t - 1))
    between = t * float(np.sum((unit_means - resid.mean()) ** 2)) / (n - 1)
    sigma2_alpha = max((between - within) / t, 0.0)
    return sigma2_alpha, max(within, VARIANCE_FLOOR)


def fit_ols(data: PanelDataset) -> Theta:
    """Pooled OLS with ANOVA variance components from its residuals."""
    data.check_estimable()
    x, y = data.pooled()
    check_full_rank(x, data.regressor_names)
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    theta = Theta(beta, 0.0, 1.0)
    sa, se = anova_components(residuals(data, theta))
    return Theta(beta, sa, se)


def robust_start(data: PanelDataset, iterations: int = 50) -> Theta:
    """Outlier-resistant starting point: pooled LAD beta and MAD variance split.

    beta solves the L1 regression by iteratively reweighted least squares.
    sigma2_eps comes from the MAD of residuals centred on their unit
    medians, sigma2_alpha from the MAD of the unit medians minus the
    within share. Only used to seed the MDPDE optimiser.
    """
    x, y = data.pooled()
    beta = np.linalg.lstsq(x, y, rcond=None)[0]
    for _ in range(iterations):
        r = np.abs(y - x @ beta)
        w = 1.0 / np.maximum(r, 1e-8 * (1.0 + np.median(r)))
        xw = x * w[:, None]
        new = np.linalg.lstsq(xw.T @ x, xw.T @ y, rcond=None)[0]
        if np.max(np.abs(new - beta)) <= 1e-10 * (1.0 + np.max(np.abs(beta))):
            beta = new
            break
        beta = new
    resid = (y - x @ beta).reshape(data.n_units, data.n_periods)
    med = np.median(resid, axis=1)
    t = data.n_periods

    def mad2(v):
        return (1.4826 * np.median(np.abs(v - np.median(v)))) ** 2

    sigma2_eps = max(mad2((resid - med[:, None]).ravel()) * t / max(t - 1, 1), VARIANCE_FLOOR)
    sigma2_alpha = max(mad2(med) - sigma2_eps / t, 0.05 * sigma2_eps)
    return Theta(beta, sigma2_alpha, sigma2_eps)


def _gls_normal_equations(data: PanelDataset, omega: OmegaView):
    x, y = data.x, data.y
    xsum = x.sum(axis=1)
    a = (np.einsum("ntk,ntl->kl", x, x) / omega.sigma2_eps
         - omega.shrink * xsum.T @ xsum)
    b = (np.einsum("ntk,nt->k", x, y) / omega.sigma2_eps
         - omega.shrink * xsum.T @ y.sum(axis=1))
    return a, b


def fit_gls(data: PanelDataset) -> Theta:
    """Feasible GLS: ANOVA variance components from OLS, then one GLS step."""
    first = fit_ols(data)
    omega = OmegaView.from_theta(first, data.n_periods)
    a, b = _gls_normal_equations(data, omega)
    return Theta(np.linalg.solve(a, b), first.sigma2_alpha, first.sigma2_eps)


def ols_beta_covariance(data: PanelDataset, theta: Theta) -> np.ndarray:
    """Model-based covariance of pooled OLS under random effects."""
    x, _ = data.pooled()
    bread = np.linalg.inv(x.T @ x)
    omega = OmegaView.from_theta(theta, data.n_periods)
    xsum = data.x.sum(axis=1)
    meat = omega.sigma2_eps * x.T @ x + omega.sigma2_alpha * xsum.T @ xsum
    cov = bread @ meat @ bread
    return 0.5 * (cov + cov.T)


def gls_beta_covariance(data: PanelDataset, theta: Theta) -> np.ndarray:
    """(sum_i X_i' Omega^{-1} X_i)^{-1} at the supplied variance components."""
    a, _ = _gls_normal_equations(data, OmegaView.from_theta(theta, data.n_periods))
    cov = np.linalg.inv(a)
    return 0.5 * (cov + cov.T)


def parse_theta_json(payload) -> Theta:
    """Read a Theta from a fit report or a bare ``{beta, sigma2_alpha, sigma2_eps}``."""
    if isinstance(payload, (str, bytes)):
        payload = json.loads(payload)
    body = payload.get("theta", payload)
    try:
        return Theta(body["beta"], body["sigma2_alpha"], body["sigma2_eps"])
    except KeyError as exc:
        raise StructuralError(f"plugin output lacks field {exc.args[0]!r}") from None


def run_external_plugin(spec: EstimatorSpec, data: PanelDataset, timeout: float = 600.0) -> Theta:
    """Run an external estimator on ``data`` through the CLI file contract.

    The panel is written as CSV (``unit,period,y,x1..xK``, intercept never
    stored) and its path is appended to ``spec.parameters["command"]``. The
    executable must print a JSON object holding a Theta, either at top level
    or under a ``"theta"`` key, on stdout.
    """
    from .csvio import write_panel_csv

    command = spec.parameters["command"]
    argv = shlex.split(command) if isinstance(command, str) else [str(c) for c in command]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "panel.csv"
        write_panel_csv(data, path)
        proc = subprocess.run(argv + [str(path)], capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        raise PanelError(f"plugin {spec.name!r} exited with {proc.returncode}: {proc.stderr.strip()}")
    theta = parse_theta_json(proc.stdout)
    if theta.beta.shape != (data.n_regressors,):
        raise StructuralError(
            f"plugin {spec.name!r} returned {theta.beta.shape[0]} coefficients, expected {data.n_regressors}"
        )
    return theta
