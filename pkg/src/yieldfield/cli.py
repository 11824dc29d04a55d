"""Command-line orchestration: ingest, fit, forecast, backtest, score,
diagnose, portfolio.

Exit codes: 0 success, 1 numerical or convergence failure, 2 usage or
validation failure. Report commands write CSV tables and, unless
--no-figures is passed, PNG figures alongside them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DATA_ENV_VAR, RunConfig, load_config
from .dataio import (
    YieldPanel,
    month_label,
    parse_fama_bliss,
    to_long_csv,
    to_wide_csv,
)
from .diagnostics import (
    correlation_matrices,
    empirical_variogram,
    extract_residuals,
    summarize_residuals,
)
from .errors import (
    ApproximationError,
    AssemblyError,
    ConvergenceError,
    DomainError,
    LocationError,
    NumericalError,
    ParseError,
    SizeError,
    ValidationError,
    YieldFieldError,
)
from .forecast import (
    BacktestReport,
    BayesForecaster,
    TwoStepForecaster,
    run_backtest,
)
from .inference import fit_joint_lambda, fit_map
from .portfolio import run_portfolio_study
from .scoring import score_backtest

_USAGE_ERRORS = (
    ParseError,
    ValidationError,
    DomainError,
    SizeError,
    LocationError,
    AssemblyError,
)
_NUMERICAL_ERRORS = (NumericalError, ConvergenceError, ApproximationError)


def _load_panel(cfg: RunConfig) -> YieldPanel:
    path = cfg.resolve_data_path()
    if not path.exists():
        raise ValidationError(f"data file not found: {path}")
    return parse_fama_bliss(path.read_text(), restrict_paper=cfg.restrict_paper)


def _outdir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.data:
        cfg.data_path = args.data
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.no_figures:
        cfg.figures = False
    return cfg


def _forecaster(cfg: RunConfig):
    if cfg.trend == "two-step-baseline":
        return TwoStepForecaster(lam=cfg.lambda_value, direct=cfg.baseline_direct_h)
    return BayesForecaster(
        cfg.model_spec(), first_maxfev=cfg.first_maxfev, refit_maxfev=cfg.refit_maxfev
    )


def _fit_full_panel(cfg: RunConfig, panel: YieldPanel):
    spec = cfg.model_spec()
    if spec.lambda_mode == "joint":
        return fit_joint_lambda(spec, panel)
    return fit_map(spec, panel, maxfev=cfg.first_maxfev)


def cmd_ingest(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    (out / "panel_wide.csv").write_text(to_wide_csv(panel))
    (out / "panel_long.csv").write_text(to_long_csv(panel))
    if cfg.figures:
        from . import plots

        plots.panel_figure(panel, out / "panel.png")
    print(
        f"{panel.n_periods} months x {panel.n_maturities} maturities, "
        f"{month_label(panel.dates[0])}..{month_label(panel.dates[-1])}"
    )
    return 0


def cmd_fit(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    fit = _fit_full_panel(cfg, panel)
    (out / "fit.json").write_text(json.dumps(fit.to_json_dict(), indent=2, sort_keys=True))
    fit.save_sidecar(out / "fit_posterior.npz")
    if cfg.figures:
        from . import plots

        plots.factors_figure(
            panel.dates, fit.factor_means, list(fit.spec.factor_set), out / "factors.png"
        )
    print(f"fitted {fit.spec.tag}: log posterior {fit.log_posterior:.3f}")
    return 0


def cmd_forecast(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    forecaster = _forecaster(cfg)
    origin = args.origin or int(panel.dates[-max(cfg.horizons) - 1])
    origin_idx = panel.date_index(origin)
    window = panel.window(0, origin_idx)
    rows = ["model,origin,horizon,maturity,mean,sd"]
    preds = {}
    for h in cfg.horizons:
        pred = forecaster.predict(window, h, cfg.maturities)
        preds[h] = pred
        for j, m in enumerate(cfg.maturities):
            rows.append(
                f"{forecaster.tag},{origin},{h},{m},{pred.mean[j]!r},{pred.sd[j]!r}"
            )
    (out / "predictions.csv").write_text("\n".join(rows) + "\n")
    if cfg.figures:
        from . import plots

        plots.predictions_figure(preds, month_label(origin), out / "predictions.png")
    print(f"wrote forecasts from origin {month_label(origin)}")
    return 0


def cmd_backtest(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    report = run_backtest(
        _forecaster(cfg),
        panel,
        horizons=cfg.horizons,
        maturities=cfg.maturities,
        first_target=cfg.first_target,
        last_target=cfg.last_target,
        scheme=cfg.scheme,
        origin_stride=cfg.origin_stride,
        threads=cfg.effective_threads(),
    )
    (out / "forecasts.csv").write_text(report.forecasts_csv())
    (out / "rmse.csv").write_text(report.rmse_csv())
    if cfg.figures:
        from . import plots

        plots.rmse_figure(report, out / "backtest_rmse.png")
    skipped = f", {len(report.skipped)} origins skipped" if report.skipped else ""
    print(f"backtest {report.model_tag}: {len(report.rows)} forecasts{skipped}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    fpath = Path(cfg.forecasts_file or out / "forecasts.csv")
    if not fpath.exists():
        raise ValidationError(f"forecasts file not found: {fpath}")
    report = BacktestReport.from_forecasts_csv(fpath.read_text())
    table = score_backtest(report, panel, n_draws=cfg.n_draws, seed=cfg.seed)
    (out / "scores.csv").write_text(table.to_csv())
    if cfg.figures:
        from . import plots

        plots.scores_figure(table, out / "scores.png")
    print(f"scored {len(table.raw)} forecasts for {table.model_tag}")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    fit = _fit_full_panel(cfg, panel)
    definition = "vs-trend" if cfg.residual == "none" else "vs-full-latent"
    res = extract_residuals(fit, panel, definition)
    corr_m, corr_t = correlation_matrices(res)
    labels = [f"m{m}" for m in panel.maturities]
    lines = ["," + ",".join(labels)]
    for i, lab in enumerate(labels):
        lines.append(lab + "," + ",".join(repr(float(v)) for v in corr_m[i]))
    (out / "correlation_maturity.csv").write_text("\n".join(lines) + "\n")
    lines = ["t," + ",".join(str(d) for d in panel.dates)]
    for i, d in enumerate(panel.dates):
        lines.append(str(d) + "," + ",".join(repr(float(v)) for v in corr_t[i]))
    (out / "correlation_time.csv").write_text("\n".join(lines) + "\n")
    bins = empirical_variogram(res, seed=cfg.seed)
    lines = ["distance,gamma,count"]
    for d, g, c in bins:
        lines.append(f"{d!r},{g!r},{c}")
    (out / "variogram.csv").write_text("\n".join(lines) + "\n")
    summary = summarize_residuals(res)
    (out / "diagnostics_summary.csv").write_text(summary.to_csv())
    if cfg.figures:
        from . import plots

        plots.correlation_figure(corr_m, corr_t, labels, out / "residual_correlations.png")
        plots.variogram_figure(bins, out / "variogram.png")
    print(
        f"diagnostics for {res.model_tag} ({definition}): abs corr {summary.abs_corr:.4f}, "
        f"Moran's I {summary.morans_i_mean:.4f}, Geary's C {summary.gearys_c_mean:.4f}, "
        f"ACF1 {summary.acf1:.4f}"
    )
    return 0


def cmd_portfolio(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _outdir(cfg, args)
    if not cfg.forecast_files:
        raise ValidationError("portfolio study needs [portfolio].forecast_files")
    reports = {}
    for fname in cfg.forecast_files:
        path = Path(fname)
        if not path.exists():
            raise ValidationError(f"forecast file not found: {path}")
        rep = BacktestReport.from_forecasts_csv(path.read_text())
        reports[rep.model_tag] = rep
    fees = run_portfolio_study(
        reports,
        panel,
        benchmark=cfg.benchmark,
        zetas=cfg.zetas,
        maturities=cfg.risky_maturities,
    )
    (out / "fees.csv").write_text(fees.to_csv())
    if cfg.figures:
        from . import plots

        plots.fees_figure(fees, out / "fees.png")
    print(f"portfolio study over {len(reports) - 1} models vs {cfg.benchmark}")
    return 0


_COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "backtest": cmd_backtest,
    "score": cmd_score,
    "diagnose": cmd_diagnose,
    "portfolio": cmd_portfolio,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yieldfield",
        description="Yield-curve forecasting with factor trends and SPDE residual fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--data", help=f"yield panel file (fallback: ${DATA_ENV_VAR})")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="root random seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads for backtests")
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        if name == "forecast":
            p.add_argument("--origin", type=int, help="forecast origin as YYYYMM")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return _COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except YieldFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
