"""Balanced panel containers and the compound-symmetry covariance algebra.

The per-unit error covariance of the random-effects model is

    Omega = sigma2_eps * I_T + sigma2_alpha * e_T e_T'

and it is handled through two scalars only: every inverse, determinant and
quadratic form below is the closed Sherman-Morrison expression, O(T) per unit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, StructuralError, VarianceFloorWarning

#: Hard lower bound applied to sigma2_eps (and sigma2_alpha when it is
#: reported as a boundary solution) inside all covariance algebra.
VARIANCE_FLOOR = 1e-12

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """A balanced N x T panel with K regressors.

    Parameters
    ----------
    y : array (N, T)
        Responses.
    x : array (N, T, K)
        Regressors. When ``has_intercept`` is true the first column must be 1.
    unit_labels, period_labels : sequences of str, optional
        Identifiers; default to ``"1".."N"`` and ``"1".."T"``.
    regressor_names : sequence of str, optional
        Column names for ``x``; default ``const, x1, ..`` or ``x1, ..``.
    has_intercept : bool
        Whether column 0 of ``x`` is the intercept.
    """

    y: np.ndarray
    x: np.ndarray
    unit_labels: tuple = field(default=None)
    period_labels: tuple = field(default=None)
    regressor_names: tuple = field(default=None)
    has_intercept: bool = True

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        x = np.array(self.x, dtype=float)
        if y.ndim != 2:
            raise StructuralError(f"y must be a 2-d (N, T) array, got shape {y.shape}")
        if x.ndim != 3 or x.shape[:2] != y.shape:
            raise StructuralError(
                f"x must have shape (N, T, K) = {y.shape + ('K',)}, got {x.shape}"
            )
        n, t, k = x.shape
        if n < 1 or t < 1 or k < 1:
            raise StructuralError("panel needs at least one unit, period and regressor")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise StructuralError("panel contains missing or non-finite values")
        if self.has_intercept and not np.all(x[:, :, 0] == 1.0):
            raise StructuralError("intercept declared but x[:, :, 0] is not identically 1")
        units = self.unit_labels or tuple(str(i + 1) for i in range(n))
        periods = self.period_labels or tuple(str(i + 1) for i in range(t))
        if self.regressor_names:
            names = tuple(self.regressor_names)
        elif self.has_intercept:
            names = ("const",) + tuple(f"x{j}" for j in range(1, k))
        else:
            names = tuple(f"x{j + 1}" for j in range(k))
        if len(units) != n or len(periods) != t or len(names) != k:
            raise StructuralError("label lengths do not match the panel dimensions")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "unit_labels", tuple(str(u) for u in units))
        object.__setattr__(self, "period_labels", tuple(str(p) for p in periods))
        object.__setattr__(self, "regressor_names", tuple(str(c) for c in names))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]

    def check_estimable(self) -> None:
        """Raise unless N >= 2, T >= 2 and N*T > K + 2."""
        n, t, k = self.x.shape
        if n < 2 or t < 2:
            raise StructuralError(f"need N >= 2 and T >= 2 for estimation, got N={n}, T={t}")
        if n * t <= k + 2:
            raise StructuralError(
                f"N*T = {n * t} observations do not identify K + 2 = {k + 2} parameters"
            )

    def pooled(self):
        """Return the stacked (N*T, K) design and (N*T,) response."""
        return self.x.reshape(-1, self.n_regressors), self.y.reshape(-1)

    def with_y(self, y) -> "PanelDataset":
        return PanelDataset(y, self.x, self.unit_labels, self.period_labels,
                            self.regressor_names, self.has_intercept)

    def subset(self, units) -> "PanelDataset":
        idx = np.asarray(units)
        return PanelDataset(self.y[idx], self.x[idx],
                            tuple(np.asarray(self.unit_labels)[idx]),
                            self.period_labels, self.regressor_names, self.has_intercept)

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (np.array_equal(self.y, other.y) and np.array_equal(self.x, other.x)
                and self.unit_labels == other.unit_labels
                and self.period_labels == other.period_labels
                and self.regressor_names == other.regressor_names
                and self.has_intercept == other.has_intercept)


@dataclass(frozen=True, eq=False)
class Theta:
    """Parameter triple (beta, sigma2_alpha, sigma2_eps)."""

    beta: np.ndarray
    sigma2_alpha: float
    sigma2_eps: float

    def __post_init__(self):
        beta = np.atleast_1d(np.array(self.beta, dtype=float))
        if beta.ndim != 1:
            raise StructuralError("beta must be a vector")
        sa, se = float(self.sigma2_alpha), float(self.sigma2_eps)
        if not (math.isfinite(sa) and math.isfinite(se) and np.all(np.isfinite(beta))):
            raise DomainError("theta has non-finite entries")
        if se <= 0.0:
            raise DomainError(f"sigma2_eps must be > 0, got {se}")
        if sa < 0.0:
            raise DomainError(f"sigma2_alpha must be >= 0, got {sa}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2_alpha", sa)
        object.__setattr__(self, "sigma2_eps", se)

    @property
    def sigma2_nu(self) -> float:
        return self.sigma2_alpha + self.sigma2_eps

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2_alpha, self.sigma2_eps]])

    @classmethod
    def from_vector(cls, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:-2], vec[-2], vec[-1])

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return (np.array_equal(self.beta, other.beta) and self.sigma2_alpha == other.sigma2_alpha
                and self.sigma2_eps == other.sigma2_eps)

    def as_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta],
                "sigma2_alpha": self.sigma2_alpha, "sigma2_eps": self.sigma2_eps}


@dataclass(frozen=True)
class OmegaView:
    """Compact view of Omega = sigma2_eps I_T + sigma2_alpha e e'.

    ``sigma2_eps`` below :data:`VARIANCE_FLOOR` is raised to the floor with a
    :class:`VarianceFloorWarning`; non-positive values are rejected.
    """

    sigma2_alpha: float
    sigma2_eps: float
    n_periods: int

    def __post_init__(self):
        se, sa = float(self.sigma2_eps), float(self.sigma2_alpha)
        if not (math.isfinite(se) and math.isfinite(sa)):
            raise DomainError("variance components must be finite")
        if se <= 0.0:
            raise DomainError(f"sigma2_eps must be > 0, got {se}")
        if sa < 0.0:
            raise DomainError(f"sigma2_alpha must be >= 0, got {sa}")
        if self.n_periods < 1:
            raise DomainError("T must be positive")
        if se < VARIANCE_FLOOR:
            warnings.warn(f"sigma2_eps={se:.3g} raised to floor {VARIANCE_FLOOR:g}",
                          VarianceFloorWarning, stacklevel=3)
            se = VARIANCE_FLOOR
        object.__setattr__(self, "sigma2_eps", se)
        object.__setattr__(self, "sigma2_alpha", sa)

    @classmethod
    def from_theta(cls, theta: Theta, n_periods: int) -> "OmegaView":
        return cls(theta.sigma2_alpha, theta.sigma2_eps, n_periods)

    @property
    def d(self) -> float:
        """The non-trivial eigenvalue sigma2_eps + T sigma2_alpha."""
        return self.sigma2_eps + self.n_periods * self.sigma2_alpha

    @property
    def shrink(self) -> float:
        """Coefficient c in Omega^{-1} = I/sigma2_eps - c e e'."""
        return self.sigma2_alpha / (self.sigma2_eps * self.d)

    def logdet(self) -> float:
        return (self.n_periods - 1) * math.log(self.sigma2_eps) + math.log(self.d)

    def solve(self, v) -> np.ndarray:
        """Apply Omega^{-1} along the last axis of ``v``."""
        v = np.asarray(v, dtype=float)
        return v / self.sigma2_eps - self.shrink * v.sum(axis=-1, keepdims=True)

    def quad(self, r) -> np.ndarray:
        """r' Omega^{-1} r along the last axis, clipped at 0."""
        r = np.asarray(r, dtype=float)
        s1 = r.sum(axis=-1)
        s2 = np.einsum("...t,...t->...", r, r)
        return np.maximum(s2 / self.sigma2_eps - self.shrink * s1 * s1, 0.0)

    def dense(self) -> np.ndarray:
        """Materialise Omega; for tests and diagnostics only."""
        t = self.n_periods
        return self.sigma2_eps * np.eye(t) + self.sigma2_alpha * np.ones((t, t))


def _check_beta(data: PanelDataset, beta) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (data.n_regressors,):
        raise StructuralError(
            f"beta has length {beta.shape[0]}, panel has K={data.n_regressors} regressors"
        )
    return beta


def residuals(data: PanelDataset, theta: Theta) -> np.ndarray:
    """Return the N x T matrix y_it - x_it' beta."""
    beta = _check_beta(data, theta.beta)
    return data.y - data.x @ beta


def quadratic_form_B(r_i, omega: OmegaView) -> float:
    """Quadratic form r_i' Omega^{-1} r_i for one unit's residual vector."""
    r_i = np.asarray(r_i, dtype=float)
    if r_i.shape != (omega.n_periods,):
        raise StructuralError(f"residual vector has shape {r_i.shape}, expected ({omega.n_periods},)")
    return float(omega.quad(r_i))


def omega_logdet(omega: OmegaView) -> float:
    """log |Omega| = (T-1) log sigma2_eps + log(sigma2_eps + T sigma2_alpha)."""
    value = omega.logdet()
    if not math.isfinite(value):
        raise DomainError("log|Omega| is not finite")
    return value


def unit_log_densities(data: PanelDataset, theta: Theta) -> np.ndarray:
    """Gaussian log f_theta(y_i | x_i) for every unit, shape (N,)."""
    omega = OmegaView.from_theta(theta, data.n_periods)
    b = omega.quad(residuals(data, theta))
    return -0.5 * (data.n_periods * LOG_2PI + omega.logdet() + b)


def log_density(data: PanelDataset, theta: Theta, unit_index: int) -> float:
    """Gaussian log-density of unit ``unit_index`` under the random-effects model."""
    omega = OmegaView.from_theta(theta, data.n_periods)
    r = data.y[unit_index] - data.x[unit_index] @ _check_beta(data, theta.beta)
    return -0.5 * (data.n_periods * LOG_2PI + omega_logdet(omega) + quadratic_form_B(r, omega))


def make_panel(y, x, *, add_intercept: bool = False, **labels) -> PanelDataset:
    """Build a dataset, optionally prepending an intercept column to ``x``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    names: Sequence[str] | None = labels.pop("regressor_names", None)
    has_intercept = labels.pop("has_intercept", add_intercept)
    if add_intercept:
        x = np.concatenate([np.ones(x.shape[:2] + (1,)), x], axis=2)
        if names is not None:
            names = ("const",) + tuple(names)
    return PanelDataset(y, x, regressor_names=names, has_intercept=has_intercept, **labels)
