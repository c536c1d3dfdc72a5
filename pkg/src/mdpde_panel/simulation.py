"""Monte Carlo contamination benchmark: data generation, metrics and runner.

Every replication draws from its own counter-based generator keyed by
``(seed, rep_index, stream)``, so replications are independent of execution
order and can run in worker processes without changing any number.
"""

from __future__ import annotations

import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import EstimatorSpec, fit_gls, fit_ols, run_external_plugin
from .csvio import dump_report
from .dpd import DpdConfig, fit_mdpde
from .errors import ConfigError, DomainError, PanelError, StructuralError
from .gamma_select import DEFAULT_GRID, GammaSearchConfig, select_gamma
from .panel import PanelDataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# stream ids for the per-replication generators
_REGRESSORS, _ALPHA, _ERRORS, _CELLS, _SHIFTS, _LEVERAGE = range(6)

LAW_KINDS = ("normal", "chisq-centered", "student-t")
SCHEME_KINDS = ("none", "random-vertical", "concentrated-vertical", "concentrated-leverage")
PAPER_BETA = (2.0, 2.4, -1.2, 1.6, -0.5)


@dataclass(frozen=True)
class Law:
    """A univariate sampling law.

    ``normal`` takes ``mean`` and ``sd``; ``chisq-centered`` draws
    chi-square(``df``) minus ``df``; ``student-t`` draws t(``df``).
    """

    kind: str = "normal"
    mean: float = 0.0
    sd: float = 1.0
    df: float = 2.0

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise DomainError(f"unknown law {self.kind!r}; expected one of {LAW_KINDS}")
        if self.sd < 0 or self.df <= 0:
            raise DomainError("law needs sd >= 0 and df > 0")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.mean, self.sd, size)
        if self.kind == "chisq-centered":
            return rng.chisquare(self.df, size) - self.df
        return rng.standard_t(self.df, size)


@dataclass(frozen=True)
class SimDesign:
    """Data-generating design for the random-effects panel.

    ``regressor_laws`` lists the laws of the non-intercept columns; by
    default the first is chi-square(2) - 2 and the rest are standard normal.
    """

    n_units: int = 100
    n_periods: int = 5
    beta_true: tuple = PAPER_BETA
    alpha_law: Law = Law()
    error_law: Law = Law()
    regressor_laws: Optional[tuple] = None
    n_replications: int = 200
    seed: int = 0

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta_true)
        object.__setattr__(self, "beta_true", beta)
        if self.n_units < 2 or self.n_periods < 2:
            raise DomainError("design needs n_units >= 2 and n_periods >= 2")
        if self.n_replications < 1:
            raise DomainError("n_replications must be >= 1")
        if len(beta) < 1:
            raise DomainError("beta_true is empty")
        laws = self.regressor_laws
        if laws is None:
            laws = tuple(Law("chisq-centered", df=2.0) if j == 0 else Law()
                         for j in range(len(beta) - 1))
        laws = tuple(laws)
        if len(laws) != len(beta) - 1:
            raise DomainError(
                f"beta_true has length {len(beta)} but {len(laws)} regressor laws were given"
            )
        object.__setattr__(self, "regressor_laws", laws)

    @property
    def n_regressors(self) -> int:
        return len(self.beta_true)


@dataclass(frozen=True)
class ContaminationScheme:
    """Outlier injection recipe.

    Random schemes flag ``round(p N T)`` cells; concentrated schemes flag all
    periods of ``ceil(p N)`` units. Flagged errors are redrawn from
    ``vertical_shift_law``. The leverage scheme then replaces each
    non-intercept regressor entry of a flagged cell with probability
    ``leverage_fraction`` by a draw from ``leverage_law``; responses keep the
    values generated from the original regressors.
    """

    kind: str = "none"
    proportion: float = 0.0
    vertical_shift_law: Law = Law("normal", 10.0, 1.0)
    leverage_law: Law = Law("normal", 5.0, 1.0)
    leverage_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise DomainError(f"unknown contamination kind {self.kind!r}; expected one of {SCHEME_KINDS}")
        if not 0.0 <= self.proportion <= 0.5:
            raise DomainError(f"contamination proportion must lie in [0, 0.5], got {self.proportion}")
        if not 0.0 <= self.leverage_fraction <= 1.0:
            raise DomainError("leverage_fraction must lie in [0, 1]")

    def n_flagged_cells(self, n_units: int, n_periods: int) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "random-vertical":
            count = int(round(self.proportion * n_units * n_periods))
        else:
            count = n_periods * self.n_flagged_units(n_units)
        if count >= n_units * n_periods:
            raise DomainError(
                f"proportion {self.proportion} flags every cell of a {n_units}x{n_periods} panel"
            )
        return count

    def n_flagged_units(self, n_units: int) -> int:
        if not self.kind.startswith("concentrated"):
            return 0
        # guard against 0.1 * 100 = 10.000000000000002 rounding up
        units = math.ceil(round(self.proportion * n_units, 9))
        if units >= n_units:
            raise DomainError(f"proportion {self.proportion} flags every unit of N={n_units}")
        return units

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.proportion:g}"


def replication_rng(seed: int, rep_index: int, stream: int) -> np.random.Generator:
    """Philox generator keyed by the triple ``(seed, rep_index, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep_index, stream])))


def generate_replication(design: SimDesign, scheme: ContaminationScheme, rep_index: int):
    """Draw replication ``rep_index``: returns ``(PanelDataset, outlier_flags)``."""
    n, t, k = design.n_units, design.n_periods, design.n_regressors
    seed = design.seed
    rng_x = replication_rng(seed, rep_index, _REGRESSORS)
    x = np.ones((n, t, k))
    for j, law in enumerate(design.regressor_laws, start=1):
        x[:, :, j] = law.sample(rng_x, (n, t))
    alpha = design.alpha_law.sample(replication_rng(seed, rep_index, _ALPHA), n)
    eps = design.error_law.sample(replication_rng(seed, rep_index, _ERRORS), (n, t))

    flags = np.zeros((n, t), dtype=bool)
    count = scheme.n_flagged_cells(n, t)
    if count:
        rng_cells = replication_rng(seed, rep_index, _CELLS)
        if scheme.kind == "random-vertical":
            flags.flat[rng_cells.choice(n * t, size=count, replace=False)] = True
        else:
            units = rng_cells.choice(n, size=scheme.n_flagged_units(n), replace=False)
            flags[units, :] = True
        shifts = scheme.vertical_shift_law.sample(replication_rng(seed, rep_index, _SHIFTS), count)
        eps[flags] = shifts

    beta = np.asarray(design.beta_true)
    y = x @ beta + alpha[:, None] + eps

    if scheme.kind == "concentrated-leverage" and count and k > 1:
        rng_lev = replication_rng(seed, rep_index, _LEVERAGE)
        cells = x[flags]
        replace = rng_lev.random((count, k - 1)) < scheme.leverage_fraction
        draws = scheme.leverage_law.sample(rng_lev, (count, k - 1))
        cells[:, 1:] = np.where(replace, draws, cells[:, 1:])
        x[flags] = cells
    return PanelDataset(y, x), flags


def mse_sqrtN(beta_hats, beta_true, n_units: int) -> float:
    """Return (N / S) * sum_s ||beta_hat_s - beta||^2."""
    b = np.atleast_2d(np.asarray(beta_hats, dtype=float))
    beta_true = np.asarray(beta_true, dtype=float)
    if b.shape[1] != beta_true.shape[0]:
        raise StructuralError(f"estimates have length {b.shape[1]}, truth has {beta_true.shape[0]}")
    if b.shape[0] < 1:
        raise StructuralError("need at least one replication")
    return float(n_units * np.mean(np.sum((b - beta_true) ** 2, axis=1)))


def mpe(predictions, actuals, outlier_flags) -> float:
    """Outlier-deleted mean squared prediction error, averaged over replications.

    Arrays may be a single ``(N, T)`` replication or stacked ``(S, N, T)``.
    """
    pred = np.asarray(predictions, dtype=float)
    act = np.asarray(actuals, dtype=float)
    flags = np.asarray(outlier_flags, dtype=bool)
    if pred.ndim == 2:
        pred, act, flags = pred[None], act[None], flags[None]
    if not (pred.shape == act.shape == flags.shape):
        raise StructuralError("predictions, actuals and flags must share one shape")
    keep = ~flags.reshape(flags.shape[0], -1)
    if np.any(keep.sum(axis=1) == 0):
        raise DomainError("every cell of a replication is flagged; MPE undefined")
    sq = ((pred - act) ** 2).reshape(keep.shape)
    return float(np.mean(np.sum(sq * keep, axis=1) / keep.sum(axis=1)))


def _adaptive_config(params: dict) -> GammaSearchConfig:
    grid = params.get("grid")
    if grid is None:
        step = float(params.get("grid_step", 0.01))
        top = float(params.get("grid_max", 1.0))
        grid = DEFAULT_GRID if (step, top) == (0.01, 1.0) else tuple(
            round(step * i, 10) for i in range(int(round(top / step)) + 1))
    return GammaSearchConfig(
        grid=grid,
        pilot_gamma=float(params.get("pilot_gamma", 0.5)),
        max_pilot_iterations=int(params.get("max_pilot_iterations", 20)),
        pilot_convergence_tol=float(params.get("pilot_convergence_tol", 0.005)),
        covariance=params.get("covariance", "model"),
    )


def fit_estimator(spec: EstimatorSpec, data: PanelDataset):
    """Fit one estimator; returns ``(beta_hat, gamma_or_None)``.

    Raises :class:`PanelError` subclasses on failure, including a
    non-converged MDPDE.
    """
    if spec.kind == "ols":
        return fit_ols(data).beta, None
    if spec.kind == "gls":
        return fit_gls(data).beta, None
    if spec.kind == "mdpde-fixed":
        fit = fit_mdpde(data, DpdConfig(float(spec.parameters["gamma"]), covariance=None))
        if not fit.converged:
            raise PanelError(f"{spec.name}: " + "; ".join(fit.notes))
        return fit.beta, fit.gamma
    if spec.kind == "mdpde-adaptive":
        sel = select_gamma(data, _adaptive_config(spec.parameters))
        return sel.fit.beta, sel.gamma
    return run_external_plugin(spec, data).beta, None


@dataclass
class ReplicationRecord:
    rep_index: int
    estimator: str
    ok: bool
    beta_hat: Optional[list] = None
    mpe: Optional[float] = None
    gamma: Optional[float] = None
    error: Optional[str] = None


@dataclass
class EstimatorSummary:
    name: str
    kind: str
    mse_sqrtN_beta: Optional[float]
    mpe: Optional[float]
    mean_optimal_gamma: Optional[float]
    n_ok: int
    n_failed: int


@dataclass
class SimulationReport:
    """Per-estimator aggregates plus every replication record."""

    design: SimDesign
    scheme: ContaminationScheme
    seed: int
    summaries: list
    records: list = field(default_factory=list)

    def summary(self, name: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "design": asdict(self.design),
            "scheme": asdict(self.scheme),
            "seed": self.seed,
            "estimators": [asdict(s) for s in self.summaries],
            "replications": [asdict(r) for r in self.records],
        }

    def to_json(self, path=None) -> str:
        return dump_report(self.to_dict(), path)

    def to_csv(self, path=None) -> str:
        """Replication records as CSV (one row per replication and estimator)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        k = self.design.n_regressors
        writer.writerow(["scheme", "rep_index", "estimator", "ok", "mpe", "gamma"]
                        + [f"beta{j}" for j in range(k)] + ["error"])
        for r in self.records:
            beta = r.beta_hat if r.beta_hat is not None else [""] * k
            writer.writerow([self.scheme.label, r.rep_index, r.estimator, int(r.ok),
                             "" if r.mpe is None else repr(r.mpe),
                             "" if r.gamma is None else repr(r.gamma)]
                            + [repr(b) if b != "" else "" for b in beta] + [r.error or ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _run_one(args):
    design, scheme, estimators, rep_index = args
    data, flags = generate_replication(design, scheme, rep_index)
    records = []
    for spec in estimators:
        try:
            beta_hat, gamma = fit_estimator(spec, data)
        except (PanelError, ArithmeticError, ValueError, OSError) as exc:
            records.append(ReplicationRecord(rep_index, spec.name, False, error=str(exc)))
            continue
        pred = data.x @ beta_hat
        records.append(ReplicationRecord(
            rep_index, spec.name, True, beta_hat=[float(b) for b in beta_hat],
            mpe=mpe(pred, data.y, flags), gamma=None if gamma is None else float(gamma)))
    return records


def run_experiment(design: SimDesign, scheme: ContaminationScheme,
                   estimators: Sequence[EstimatorSpec], workers: int = 1) -> SimulationReport:
    """Fit every estimator on the same ``design.n_replications`` datasets.

    Failed fits are recorded and excluded from the aggregates; ``n_failed``
    counts them. Output is identical for any ``workers``.
    """
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise DomainError(f"estimator names must be unique, got {names}")
    jobs = [(design, scheme, tuple(estimators), s) for s in range(design.n_replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        chunks = [_run_one(job) for job in jobs]
    records = [r for chunk in chunks for r in chunk]

    summaries = []
    for spec in estimators:
        ok = [r for r in records if r.estimator == spec.name and r.ok]
        failed = sum(1 for r in records if r.estimator == spec.name and not r.ok)
        gammas = [r.gamma for r in ok if r.gamma is not None]
        summaries.append(EstimatorSummary(
            name=spec.name, kind=spec.kind,
            mse_sqrtN_beta=mse_sqrtN([r.beta_hat for r in ok], design.beta_true, design.n_units) if ok else None,
            mpe=float(np.mean([r.mpe for r in ok])) if ok else None,
            mean_optimal_gamma=float(np.mean(gammas)) if spec.kind == "mdpde-adaptive" and gammas else None,
            n_ok=len(ok), n_failed=failed))
    return SimulationReport(design, scheme, design.seed, summaries, records)


# --------------------------------------------------------------------------
# declarative experiment files


@dataclass
class ExperimentConfig:
    design: SimDesign
    schemes: list
    estimators: list
    workers: int = 1
    name: str = "experiment"


_DESIGN_KEYS = {"n_units", "n_periods", "beta_true", "alpha_law", "error_law",
                "regressor_laws", "n_replications"}
_SCHEME_KEYS = {"kind", "proportion", "vertical_shift_law", "leverage_law", "leverage_fraction"}
_LAW_KEYS = {"kind", "mean", "sd", "df"}
_TOP_KEYS = {"name", "seed", "workers", "design", "scheme", "schemes", "estimators"}


def _line_of(lines, key, after: int = 0) -> Optional[int]:
    """1-based line of the first ``key =`` assignment (or ``[key]`` header) past ``after``."""
    for idx in range(after, len(lines)):
        text = lines[idx].split("#", 1)[0].strip()
        if text.startswith(f"{key} ") or text.startswith(f"{key}=") or text.strip("[] ") == key:
            return idx + 1
    return None


def _headers(lines, *names) -> list:
    """0-based indices of the table headers ``[name]`` / ``[[name]]`` in file order, per name."""
    found = {name: [] for name in names}
    for idx, line in enumerate(lines):
        text = line.split("#", 1)[0].strip()
        if text.startswith("["):
            key = text.strip("[] ")
            if key in found:
                found[key].append(idx)
    return [found[name] for name in names]


def _law(value, where, lines, after) -> Law:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an inline table such as {{kind = \"normal\"}}",
                          _line_of(lines, where.split(".")[-1], after))
    extra = set(value) - _LAW_KEYS
    if extra:
        raise ConfigError(f"{where}: unknown law field(s) {sorted(extra)}",
                          _line_of(lines, where.split(".")[-1], after))
    try:
        return Law(**value)
    except (DomainError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}", _line_of(lines, where.split(".")[-1], after)) from None


def parse_experiment_config(text: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parse a TOML experiment description; schema errors carry a line number."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", getattr(exc, "lineno", None)) from None
    lines = text.splitlines()
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown top-level key {key!r}", _line_of(lines, key))
    if "design" not in doc:
        raise ConfigError("missing [design] table")
    seed = doc.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer", _line_of(lines, "seed"))

    d = doc["design"]
    d_line = (_line_of(lines, "design") or 1) - 1
    extra = set(d) - _DESIGN_KEYS
    if extra:
        key = sorted(extra)[0]
        raise ConfigError(f"unknown design key {key!r}", _line_of(lines, key, d_line))
    kwargs = {k: d[k] for k in ("n_units", "n_periods", "n_replications") if k in d}
    for key, value in kwargs.items():
        if not isinstance(value, int):
            raise ConfigError(f"design.{key} must be an integer", _line_of(lines, key, d_line))
    if "beta_true" in d:
        if not isinstance(d["beta_true"], list) or not all(isinstance(b, (int, float)) for b in d["beta_true"]):
            raise ConfigError("design.beta_true must be a list of numbers", _line_of(lines, "beta_true", d_line))
        kwargs["beta_true"] = tuple(d["beta_true"])
    for key in ("alpha_law", "error_law"):
        if key in d:
            kwargs[key] = _law(d[key], f"design.{key}", lines, d_line)
    if "regressor_laws" in d:
        kwargs["regressor_laws"] = tuple(_law(v, "design.regressor_laws", lines, d_line)
                                         for v in d["regressor_laws"])
    try:
        design = SimDesign(seed=seed, **kwargs)
    except DomainError as exc:
        raise ConfigError(f"design: {exc}", _line_of(lines, "design")) from None

    raw_schemes = doc.get("schemes", [])
    if "scheme" in doc:
        raw_schemes = [doc["scheme"]] + list(raw_schemes)
    if not raw_schemes:
        raw_schemes = [{"kind": "none"}]
    single, multi = _headers(lines, "scheme", "schemes")
    anchors = (single[:1] if "scheme" in doc else []) + multi
    schemes = []
    for idx, raw in enumerate(raw_schemes):
        header = anchors[idx] if idx < len(anchors) else 0
        extra = set(raw) - _SCHEME_KEYS
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(f"unknown scheme key {key!r}", _line_of(lines, key, header))
        kw = {k: raw[k] for k in ("kind", "proportion", "leverage_fraction") if k in raw}
        for key in ("vertical_shift_law", "leverage_law"):
            if key in raw:
                kw[key] = _law(raw[key], f"scheme.{key}", lines, header)
        try:
            schemes.append(ContaminationScheme(**kw))
        except (DomainError, TypeError) as exc:
            message = str(exc)
            key = "kind" if "kind" in message else "leverage_fraction" if "leverage" in message else "proportion"
            raise ConfigError(f"scheme: {exc}", _line_of(lines, key, header) or header + 1) from None

    raw_estimators = doc.get("estimators")
    if not raw_estimators:
        raise ConfigError("at least one [[estimators]] entry is required")
    (anchors,) = _headers(lines, "estimators")
    estimators = []
    for idx, raw in enumerate(raw_estimators):
        header = anchors[idx] if idx < len(anchors) else 0
        if "name" not in raw or "kind" not in raw:
            raise ConfigError("each estimator needs name and kind", header + 1)
        params = {k: v for k, v in raw.items() if k not in ("name", "kind")}
        try:
            estimators.append(EstimatorSpec(str(raw["name"]), str(raw["kind"]), params))
        except ValueError as exc:
            key = "kind" if "kind" in str(exc) else "name"
            raise ConfigError(str(exc), _line_of(lines, key, header) or header + 1) from None
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ConfigError(f"estimator names must be unique, got {names}")
    workers = doc.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer", _line_of(lines, "workers"))
    return ExperimentConfig(design, schemes, estimators, workers, str(doc.get("name", "experiment")))


def load_experiment_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read and validate a TOML experiment file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_experiment_config(text, seed_override)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``table1_N100_T5`` etc.)."""
    from importlib.resources import files

    stem = name if name.endswith(".toml") else name + ".toml"
    path = Path(str(files("mdpde_panel") / "configs" / stem))
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
