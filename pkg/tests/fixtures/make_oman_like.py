"""Regenerate ``oman_like.csv``: a synthetic stand-in shaped like a 55-station,
12-month weather panel (evaporation on temperature and humidity).

The real station data is not redistributable; this fixture keeps the same
shape (N=55, T=12, two regressors plus intercept) with 8% of cells carrying
vertical outliers so the adaptive fit has something to down-weight.
"""

from pathlib import Path

import numpy as np

from mdpde_panel.csvio import write_panel_csv
from mdpde_panel.panel import PanelDataset

BETA = np.array([-2.457, 0.1764, 0.4039])
SIGMA_ALPHA, SIGMA_EPS = 0.4674, 1.586


def build(seed: int = 20181231) -> PanelDataset:
    rng = np.random.Generator(np.random.Philox(seed))
    n, t = 55, 12
    month = np.arange(t)
    station_temp = rng.normal(27.0, 3.0, n)
    temp = station_temp[:, None] + 6.0 * np.sin(np.pi * (month - 2) / 6.0) + rng.normal(0, 1.5, (n, t))
    humid = np.clip(rng.normal(4.0, 1.5, (n, t)) + 0.05 * (temp - 27.0), 0.2, None)
    x = np.stack([np.ones((n, t)), temp, humid], axis=2)
    alpha = rng.normal(0.0, SIGMA_ALPHA, n)
    eps = rng.normal(0.0, SIGMA_EPS, (n, t))
    cells = rng.choice(n * t, size=int(round(0.08 * n * t)), replace=False)
    eps.flat[cells] = rng.normal(10.0, 1.0, cells.size)
    y = x @ BETA + alpha[:, None] + eps
    units = tuple(f"S{i + 1:02d}" for i in range(n))
    periods = tuple(f"2018-{m + 1:02d}" for m in range(t))
    return PanelDataset(np.round(y, 3), np.round(x, 3), units, periods,
                        ("const", "temp", "humidity"))


if __name__ == "__main__":
    write_panel_csv(build(), Path(__file__).with_name("oman_like.csv"))
