import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import BETA5, simulate_panel
from mdpde_panel.dpd import DpdConfig, fit_mdpde
from mdpde_panel.errors import DomainError
from mdpde_panel.gamma_select import (
    DEFAULT_GRID,
    GammaSearchConfig,
    _argmin_smallest,
    estimated_mse,
    grid_fits,
    iterate_pilot,
    select_gamma,
)
from mdpde_panel.panel import PanelDataset


def test_default_grid():
    assert DEFAULT_GRID[0] == 0.0 and DEFAULT_GRID[-1] == 1.0 and len(DEFAULT_GRID) == 101
    cfg = GammaSearchConfig()
    assert cfg.pilot_gamma == 0.5 and cfg.max_pilot_iterations == 20
    assert cfg.pilot_convergence_tol == 0.005


@pytest.mark.parametrize("grid", [(), (0.2, 0.1), (0.1, 0.1), (-0.1, 0.2)])
def test_invalid_grids(grid):
    with pytest.raises(DomainError):
        GammaSearchConfig(grid=grid)


def test_mse_equals_trace_when_pilot_is_the_fit(clean_panel):
    fit = fit_mdpde(clean_panel, DpdConfig(0.2))
    value = estimated_mse(clean_panel, 0.2, fit.beta, fit=fit)
    assert value == pytest.approx(np.trace(fit.covariance[:5, :5]), rel=0, abs=0)
    fresh = estimated_mse(clean_panel, 0.2, fit.beta)
    assert_allclose(fresh, value, rtol=1e-8)


def test_mse_checks_pilot_length(clean_panel):
    with pytest.raises(DomainError):
        estimated_mse(clean_panel, 0.2, np.zeros(3))


def test_trace_nondecreasing_in_gamma_at_model(clean_panel):
    cfg = GammaSearchConfig(grid=tuple(np.round(np.arange(0, 0.61, 0.05), 2)))
    fits = grid_fits(clean_panel, cfg)
    traces = [np.trace(fits[g].covariance[:5, :5]) for g in cfg.grid]
    # the fitted variances move with gamma, so allow rounding-level slack only
    assert np.all(np.diff(traces) > -1e-3 * traces[0])


def test_singleton_grid(clean_panel):
    sel = select_gamma(clean_panel, GammaSearchConfig(grid=(0.3,), pilot_gamma=0.3))
    assert sel.gamma == 0.3 and sel.converged
    assert sel.trace == [(1, 0.3, 0.3)]
    sel = select_gamma(clean_panel, GammaSearchConfig(grid=(0.3,)))
    assert sel.gamma == 0.3
    assert sel.trace[-1][2] == 0.3


def test_ties_go_to_smallest():
    assert _argmin_smallest([3.0, 1.0, 1.0, 2.0]) == 1
    assert _argmin_smallest([np.inf, np.inf]) == -1
    assert _argmin_smallest([np.inf, 2.0, 2.0]) == 1


def test_two_cycle_hits_iteration_cap():
    # a chooser that flips between two adjacent grid values forever
    cycle = {0.10: 0.11, 0.11: 0.10}
    gamma, trace, converged = iterate_pilot(lambda g: cycle.get(round(g, 2), 0.10), 0.5, 7, 0.005)
    assert not converged
    assert len(trace) == 7
    chosen = [step[2] for step in trace]
    assert chosen[1:] == [0.11, 0.10] * 3
    assert gamma == chosen[-1]


def test_selection_is_deterministic():
    data = simulate_panel(np.random.default_rng(8), n=40, t=4)
    cfg = GammaSearchConfig(grid=tuple(np.round(np.arange(0, 1.01, 0.05), 2)))
    a, b = select_gamma(data, cfg), select_gamma(data, cfg)
    assert a.gamma == b.gamma and a.trace == b.trace
    assert np.array_equal(a.mse_curve, b.mse_curve)


def test_clean_vs_contaminated_choice():
    rng = np.random.default_rng(31)
    clean = simulate_panel(rng, n=100, t=5)
    y = clean.y.copy()
    cells = rng.choice(500, size=50, replace=False)
    y.flat[cells] += 10.0
    dirty = clean.with_y(y)
    assert select_gamma(clean).gamma <= 0.1
    picked = select_gamma(dirty)
    assert 0.08 <= picked.gamma <= 0.4
    assert picked.converged
    assert np.max(np.abs(picked.fit.beta - BETA5)) < 0.5


def test_failed_grid_points_are_skipped(monkeypatch, clean_panel):
    import mdpde_panel.gamma_select as gs

    real = gs.fit_mdpde

    def flaky(data, cfg, extra_starts=()):
        fit = real(data, cfg, extra_starts)
        if cfg.gamma == 0.2:
            fit.converged = False
        return fit

    monkeypatch.setattr(gs, "fit_mdpde", flaky)
    sel = select_gamma(clean_panel, GammaSearchConfig(grid=(0.0, 0.2, 0.4)))
    assert sel.invalid_gammas == [0.2]
    assert np.isinf(sel.mse_curve[1])
    assert sel.gamma in (0.0, 0.4)
