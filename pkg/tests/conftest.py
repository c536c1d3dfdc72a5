import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mdpde_panel.panel import PanelDataset, Theta  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
BETA5 = np.array([2.0, 2.4, -1.2, 1.6, -0.5])


def simulate_panel(rng, n=100, t=5, beta=BETA5, sigma2_alpha=1.0, sigma2_eps=1.0):
    """Clean panel with an intercept, one skewed regressor and normal ones."""
    k = len(beta)
    x = np.ones((n, t, k))
    if k > 1:
        x[:, :, 1] = rng.chisquare(2, (n, t)) - 2
    if k > 2:
        x[:, :, 2:] = rng.standard_normal((n, t, k - 2))
    alpha = rng.normal(0.0, np.sqrt(sigma2_alpha), n)
    eps = rng.normal(0.0, np.sqrt(sigma2_eps), (n, t))
    y = x @ np.asarray(beta) + alpha[:, None] + eps
    return PanelDataset(y, x)


def random_theta(rng, k):
    return Theta(rng.normal(0, 1, k), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def clean_panel():
    return simulate_panel(np.random.default_rng(2024))
