"""Minimum density power divergence estimation for random-effects panel regression."""

__version__ = "0.1.0"

from .asymptotics import (
    SandwichParts,
    closed_form_J,
    closed_form_K,
    closed_form_xi,
    empirical_JK,
    influence_function,
    m_constant,
    sandwich_covariance,
    score_u,
)
from .baselines import EstimatorSpec, fit_gls, fit_ols
from .csvio import read_panel_csv, write_panel_csv
from .dpd import DpdConfig, DpdFit, dpd_gradient, dpd_objective, fit_mdpde
from .errors import (
    ConfigError,
    DomainError,
    NumericError,
    PanelError,
    PanelParseError,
    RankDeficiencyError,
    SingularMatrixError,
    StructuralError,
)
from .gamma_select import GammaSearchConfig, GammaSelection, estimated_mse, select_gamma
from .panel import (
    OmegaView,
    PanelDataset,
    Theta,
    log_density,
    make_panel,
    omega_logdet,
    quadratic_form_B,
    residuals,
)
from .simulation import (
    ContaminationScheme,
    Law,
    SimDesign,
    SimulationReport,
    generate_replication,
    mpe,
    mse_sqrtN,
    run_experiment,
)
