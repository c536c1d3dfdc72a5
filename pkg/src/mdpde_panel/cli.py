"""Command-line front end (``mdpde-panel``).

Exit codes are a stable contract:

==== ==========================================
0    success
2    parse or argument error (CSV, report, config, options)
3    rank-deficient design
4    non-convergence (fit or pilot iteration)
5    singular J
==== ==========================================
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import influence_function, log_influence_norm_beta
from .baselines import fit_gls, fit_ols, gls_beta_covariance, ols_beta_covariance, parse_theta_json
from .csvio import dump_report, format_table, load_report, read_panel_csv
from .dpd import DpdConfig, fit_mdpde
from .errors import (
    ConfigError,
    DomainError,
    NumericError,
    PanelParseError,
    RankDeficiencyError,
    SingularMatrixError,
    StructuralError,
)
from .gamma_select import GammaSearchConfig, select_gamma
from .panel import PanelDataset
from .simulation import bundled_config, load_experiment_config, run_experiment

EXIT_OK, EXIT_PARSE, EXIT_RANK, EXIT_NONCONVERGED, EXIT_SINGULAR = 0, 2, 3, 4, 5


def _gamma_arg(text: str):
    if text == "adaptive":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("gamma must be a number >= 0 or 'adaptive'") from None
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError("gamma must be a number >= 0 or 'adaptive'")
    return value


def _proportion(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"trim proportion must lie in [0, 1), got {text}")
    return value


def _se_dict(names, cov):
    if cov is None:
        return None
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    labels = list(names) + ["sigma2_alpha", "sigma2_eps"]
    return {label: float(v) for label, v in zip(labels, se)}


def fit_report(data: PanelDataset, estimator: str = "mdpde", gamma="adaptive",
               covariance: str = "model", seed: int = 0, source: str = "") -> tuple[dict, int]:
    """Fit ``data`` and build the JSON-ready report plus the exit code."""
    report = {
        "command": "fit",
        "estimator": estimator,
        "data": source,
        "n_units": data.n_units,
        "n_periods": data.n_periods,
        "regressor_names": list(data.regressor_names),
        "has_intercept": data.has_intercept,
    }
    code = EXIT_OK
    if estimator in ("ols", "gls"):
        theta = fit_ols(data) if estimator == "ols" else fit_gls(data)
        cov_fn = ols_beta_covariance if estimator == "ols" else gls_beta_covariance
        beta_cov = cov_fn(data, theta)
        se = np.sqrt(np.clip(np.diag(beta_cov), 0.0, None))
        notes = []
        if theta.sigma2_eps <= 1e-12:
            notes.append("degenerate: sigma2_eps at the variance floor")
        if theta.sigma2_alpha == 0.0:
            notes.append("boundary solution: sigma2_alpha truncated at 0")
        report.update(theta=theta.as_dict(), gamma=None, converged=True, iterations=0,
                      objective=None, gradient_norm=None, notes=notes,
                      standard_errors={n: float(s) for n, s in zip(data.regressor_names, se)})
        return report, code

    trace = None
    if gamma == "adaptive":
        selection = select_gamma(data, GammaSearchConfig(covariance=covariance))
        fit = selection.fit
        trace = [list(step) for step in selection.trace]
        report["gamma_selection"] = {"converged": selection.converged, "trace": trace,
                                     "invalid_gammas": selection.invalid_gammas}
        if not selection.converged:
            code = EXIT_NONCONVERGED
    else:
        fit = fit_mdpde(data, DpdConfig(float(gamma), seed=seed, covariance=covariance))
    if not fit.converged:
        code = EXIT_NONCONVERGED
    elif any(note.startswith("singular J") for note in fit.notes) and code == EXIT_OK:
        code = EXIT_SINGULAR
    report.update(theta=fit.theta_hat.as_dict(), gamma=fit.gamma, converged=fit.converged,
                  iterations=fit.iterations_used, objective=fit.objective_value,
                  gradient_norm=fit.gradient_norm_at_solution, notes=list(fit.notes),
                  covariance_kind=covariance,
                  covariance=None if fit.covariance is None else fit.covariance.tolist(),
                  standard_errors=_se_dict(data.regressor_names, fit.covariance))
    return report, code


def _fit_table(report: dict) -> str:
    theta = report["theta"]
    se = report.get("standard_errors") or {}
    rows = []
    for name, b in zip(report["regressor_names"], theta["beta"]):
        rows.append([name, b, se.get(name, float("nan"))])
    for name in ("sigma2_alpha", "sigma2_eps"):
        rows.append([name, theta[name], se.get(name, float("nan"))])
    head = f"estimator: {report['estimator']}"
    if report.get("gamma") is not None:
        head += f"  gamma: {report['gamma']:.4g}"
    head += f"  converged: {report['converged']}"
    return head + "\n" + format_table(["parameter", "estimate", "std.err"], rows)


def cmd_fit(args) -> int:
    data = read_panel_csv(args.csv, intercept=not args.no_intercept)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report, code = fit_report(data, args.estimator, args.gamma, args.covariance,
                                  args.seed, str(args.csv))
    text = dump_report(report, args.output)
    if args.output is None:
        sys.stdout.write(text)
    if args.table:
        print(_fit_table(report), file=sys.stderr if args.output is None else sys.stdout)
    return code


def trimmed_mpe(data: PanelDataset, betas, trims):
    """Mean squared prediction error after dropping the worst ``p`` share of cells.

    For each coefficient vector, the ``floor(p N T)`` cells with the largest
    squared error under that vector are removed. Returns an array
    ``(len(betas), len(trims))``.
    """
    total = data.n_units * data.n_periods
    out = np.empty((len(betas), len(trims)))
    for a, beta in enumerate(betas):
        sq = np.sort(((data.y - data.x @ np.asarray(beta, dtype=float)) ** 2).ravel())
        for b, p in enumerate(trims):
            if not 0.0 <= p < 1.0:
                raise DomainError(f"trim proportion must lie in [0, 1), got {p}")
            drop = int(math.floor(p * total + 1e-9))
            out[a, b] = float(np.mean(sq[:total - drop]))
    return out


def cmd_trimmed_mpe(args) -> int:
    data = read_panel_csv(args.csv, intercept=not args.no_intercept)
    names, betas = [], []
    for path in args.reports:
        report = load_report(path)
        theta = parse_theta_json(report)
        if theta.beta.shape != (data.n_regressors,):
            raise PanelParseError(f"{path}: report has {theta.beta.shape[0]} coefficients, "
                                  f"data has {data.n_regressors}")
        label = report.get("label") or report.get("estimator") or Path(path).stem
        if report.get("gamma") is not None and report.get("estimator") == "mdpde":
            label = f"mdpde({report['gamma']:.4g})"
        names.append(label if label not in names else f"{label}#{len(names)}")
        betas.append(theta.beta)
    table = trimmed_mpe(data, betas, args.trim)
    increase = 100.0 * (table / table[0] - 1.0)
    rows = []
    for a, name in enumerate(names):
        rows.append([name] + [float(v) for v in table[a]])
        if a:
            rows.append(["  increase %"] + [float(v) for v in increase[a]])
    print(format_table(["estimator"] + [f"p={p:g}" for p in args.trim], rows))
    if args.output:
        dump_report({"command": "trimmed-mpe", "data": str(args.csv), "trim": list(args.trim),
                     "estimators": names, "mpe": table, "increase_percent": increase},
                    args.output)
    return EXIT_OK


def _summary_table(reports) -> str:
    header = ["estimator"] + [r.scheme.label for r in reports]
    rows = []
    for idx, s in enumerate(reports[0].summaries):
        cols = [r.summaries[idx] for r in reports]
        rows.append([s.name] + [float("nan") if c.mse_sqrtN_beta is None else c.mse_sqrtN_beta for c in cols])
        rows.append([""] + [float("nan") if c.mpe is None else c.mpe for c in cols])
        if s.kind == "mdpde-adaptive":
            rows.append(["  mean opt gamma"] + [float("nan") if c.mean_optimal_gamma is None
                                                 else c.mean_optimal_gamma for c in cols])
        failed = [c.n_failed for c in cols]
        if any(failed):
            rows.append(["  failed fits"] + [str(f) for f in failed])
    return ("rows: MSE of sqrt(N) beta_hat, then outlier-deleted MPE\n"
            + format_table(header, rows))


def cmd_simulate(args) -> int:
    path = Path(args.config)
    if not path.exists() and not path.suffix:
        path = bundled_config(args.config)
    config = load_experiment_config(path, seed_override=args.seed)
    design = config.design
    if args.replications is not None:
        from dataclasses import replace

        design = replace(design, n_replications=args.replications)
    workers = args.workers if args.workers is not None else config.workers
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for idx, scheme in enumerate(config.schemes):
        report = run_experiment(design, scheme, config.estimators, workers=workers)
        stem = out_dir / f"{config.name}_{idx + 1}"
        report.to_json(stem.with_suffix(".json"))
        report.to_csv(stem.with_suffix(".csv"))
        reports.append(report)
    print(f"{config.name}: N={design.n_units} T={design.n_periods} "
          f"S={design.n_replications} seed={design.seed}")
    print(_summary_table(reports))
    return EXIT_OK


def cmd_influence(args) -> int:
    data = read_panel_csv(args.csv, intercept=not args.no_intercept)
    report = load_report(args.report)
    theta = parse_theta_json(report)
    if theta.beta.shape != (data.n_regressors,):
        raise PanelParseError(f"{args.report}: coefficient count does not match the data")
    gamma = float(args.gamma if args.gamma is not None else (report.get("gamma") or 0.0))
    x0 = data.x.mean(axis=0)
    if data.has_intercept:
        x0[:, 0] = 1.0
    start = 1 if data.has_intercept else 0
    names = list(data.regressor_names) + ["sigma2_alpha", "sigma2_eps"]
    out = sys.stdout if args.output is None else open(args.output, "w", newline="")
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["vertical_shift", "leverage_shift", "if_norm", "log_if_norm_beta"]
                        + [f"if_{n}" for n in names])
        for lev in args.leverage_shifts:
            xp = x0.copy()
            xp[:, start:] += lev
            base = x0 @ theta.beta
            for c in args.shifts:
                yp = base + c
                value = influence_function(xp, yp, theta, gamma, data)
                log_beta = log_influence_norm_beta(xp, yp, theta, gamma, data)
                writer.writerow([repr(float(c)), repr(float(lev)), repr(float(np.linalg.norm(value))),
                                 repr(float(log_beta))] + [repr(float(v)) for v in value])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdpde-panel", description=(
        "Robust random-effects panel regression by minimum density power divergence."))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("csv", type=Path, help="long-format panel: unit,period,y,x1,...,xK")
        p.add_argument("--no-intercept", action="store_true", help="do not prepend an intercept column")

    p = sub.add_parser("fit", help="fit OLS, GLS or the MDPDE and emit a JSON report")
    data_args(p)
    p.add_argument("--estimator", choices=("mdpde", "ols", "gls"), default="mdpde")
    p.add_argument("--gamma", type=_gamma_arg, default="adaptive",
                   help="tuning parameter (>= 0) or 'adaptive' (default)")
    p.add_argument("--covariance", choices=("model", "empirical"), default="model")
    p.add_argument("--seed", type=int, default=0, help="seed for the jittered restarts")
    p.add_argument("--output", "-o", type=Path, help="write the JSON report here instead of stdout")
    p.add_argument("--table", action="store_true", help="also print an aligned text table")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("trimmed-mpe", help="trimmed mean prediction errors of saved fits")
    data_args(p)
    p.add_argument("reports", nargs="+", type=Path, help="fit reports; the first is the reference")
    p.add_argument("--trim", nargs="+", type=_proportion, default=[0.0, 0.1, 0.2])
    p.add_argument("--output", "-o", type=Path)
    p.set_defaults(handler=cmd_trimmed_mpe)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment from a TOML config")
    p.add_argument("config", help="config path or bundled name (table1_N100_T5, table2_vertical, ...)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="worker processes for replications")
    p.add_argument("--replications", type=int, help="override the number of replications")
    p.add_argument("--out-dir", default=".", help="directory for the JSON and CSV reports")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("influence", help="influence function along vertical (and leverage) shifts")
    data_args(p)
    p.add_argument("report", type=Path, help="fit report providing theta and gamma")
    p.add_argument("--shifts", nargs="+", type=float, default=[0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0])
    p.add_argument("--leverage-shifts", nargs="+", type=float, default=[0.0])
    p.add_argument("--gamma", type=float, help="override the report's gamma")
    p.add_argument("--output", "-o", type=Path)
    p.set_defaults(handler=cmd_influence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except RankDeficiencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RANK
    except SingularMatrixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (PanelParseError, ConfigError, StructuralError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
