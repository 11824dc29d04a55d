"""TOML run configuration with strict key validation.

Every paper-gap default from the other modules surfaces here as a named key
so deviations are auditable from the config file alone.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError
from .inference import ModelSpec
from .nsbasis import LambdaPrior

DATA_ENV_VAR = "YIELDFIELD_DATA"

_SCHEMA = {
    "data": {"path", "restrict_paper"},
    "model": {
        "trend", "residual", "lambda_mode", "lambda_value", "lambda_prior",
        "lambda_prior_mean", "lambda_prior_cv", "lambda_prior_shape",
        "alpha_spacetime", "estimate_alpha", "alpha_fixed", "m_order",
        "baseline_direct_h", "tag",
    },
    "mesh": {"factor", "extension"},
    "window": {
        "scheme", "first_target", "last_target", "horizons", "maturities",
        "origin_stride",
    },
    "fit": {"first_maxfev", "refit_maxfev"},
    "scoring": {"n_draws", "forecasts_file"},
    "portfolio": {"zetas", "risky_maturities", "benchmark", "forecast_files"},
    "run": {"seed", "threads"},
    "output": {"directory", "figures"},
}


@dataclass
class RunConfig:
    data_path: str | None = None
    restrict_paper: bool = True
    trend: str = "bdns"
    residual: str = "none"
    lambda_mode: str = "fixed"
    lambda_value: float = 0.0609
    lambda_prior: str = "lognormal"
    lambda_prior_mean: float = 0.068
    lambda_prior_cv: float = 0.19
    lambda_prior_shape: float = 4.0
    alpha_spacetime: int = 1
    estimate_alpha: bool = True
    alpha_fixed: float = 2.0
    m_order: int = 2
    baseline_direct_h: bool = True
    model_tag: str = ""
    mesh_factor: float = 2.0
    mesh_extension: float = 0.2
    scheme: str = "expanding"
    first_target: int = 199501
    last_target: int = 200012
    horizons: tuple = (1, 6, 12)
    maturities: tuple = (3, 12, 36, 60, 120)
    origin_stride: int = 1
    first_maxfev: int = 1500
    refit_maxfev: int = 250
    n_draws: int = 4096
    forecasts_file: str | None = None
    zetas: tuple = (4.0, 2.0, 1.0)
    risky_maturities: tuple = (3, 12, 36, 60)
    benchmark: str = "bdns"
    forecast_files: tuple = ()
    seed: int = 20250801
    threads: int = 0  # 0 means machine parallelism
    out_dir: str = "out"
    figures: bool = True

    def effective_threads(self) -> int:
        if self.threads >= 1:
            return self.threads
        return os.cpu_count() or 1

    def resolve_data_path(self) -> Path:
        path = self.data_path or os.environ.get(DATA_ENV_VAR)
        if not path:
            raise ValidationError(
                f"no data path: set [data].path or the {DATA_ENV_VAR} environment variable"
            )
        return Path(path)

    def model_spec(self) -> ModelSpec:
        prior = None
        if self.lambda_mode == "joint":
            if self.lambda_prior == "lognormal":
                prior = LambdaPrior("lognormal", self.lambda_prior_mean, cv=self.lambda_prior_cv)
            elif self.lambda_prior == "gamma":
                prior = LambdaPrior("gamma", self.lambda_prior_mean, shape=self.lambda_prior_shape)
            else:
                raise ValidationError(f"unknown lambda prior {self.lambda_prior!r}")
        return ModelSpec(
            trend=self.trend if self.trend != "two-step-baseline" else "two-step-baseline",
            residual=self.residual,
            lambda_mode=self.lambda_mode,
            lambda_value=self.lambda_value,
            lambda_prior=prior,
            alpha_spacetime=self.alpha_spacetime,
            estimate_alpha=self.estimate_alpha,
            alpha_fixed=self.alpha_fixed,
            m_order=self.m_order,
            mesh_factor=self.mesh_factor,
            mesh_extension=self.mesh_extension,
            max_horizon=max(self.horizons),
            tag=self.model_tag,
        )


def _check_keys(raw: dict):
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ValidationError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ValidationError(f"config section [{section}] must be a table")
        for key in body:
            if key not in _SCHEMA[section]:
                raise ValidationError(f"unknown key {key!r} in section [{section}]")


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    _check_keys(raw)
    cfg = RunConfig()
    data = raw.get("data", {})
    cfg.data_path = data.get("path", cfg.data_path)
    cfg.restrict_paper = bool(data.get("restrict_paper", cfg.restrict_paper))
    model = raw.get("model", {})
    cfg.trend = model.get("trend", cfg.trend)
    cfg.residual = model.get("residual", cfg.residual)
    cfg.lambda_mode = model.get("lambda_mode", cfg.lambda_mode)
    cfg.lambda_value = float(model.get("lambda_value", cfg.lambda_value))
    cfg.lambda_prior = model.get("lambda_prior", cfg.lambda_prior)
    cfg.lambda_prior_mean = float(model.get("lambda_prior_mean", cfg.lambda_prior_mean))
    cfg.lambda_prior_cv = float(model.get("lambda_prior_cv", cfg.lambda_prior_cv))
    cfg.lambda_prior_shape = float(model.get("lambda_prior_shape", cfg.lambda_prior_shape))
    cfg.alpha_spacetime = int(model.get("alpha_spacetime", cfg.alpha_spacetime))
    cfg.estimate_alpha = bool(model.get("estimate_alpha", cfg.estimate_alpha))
    cfg.alpha_fixed = float(model.get("alpha_fixed", cfg.alpha_fixed))
    cfg.m_order = int(model.get("m_order", cfg.m_order))
    cfg.baseline_direct_h = bool(model.get("baseline_direct_h", cfg.baseline_direct_h))
    cfg.model_tag = model.get("tag", cfg.model_tag)
    mesh = raw.get("mesh", {})
    cfg.mesh_factor = float(mesh.get("factor", cfg.mesh_factor))
    cfg.mesh_extension = float(mesh.get("extension", cfg.mesh_extension))
    window = raw.get("window", {})
    cfg.scheme = window.get("scheme", cfg.scheme)
    cfg.first_target = int(window.get("first_target", cfg.first_target))
    cfg.last_target = int(window.get("last_target", cfg.last_target))
    cfg.horizons = tuple(int(h) for h in window.get("horizons", cfg.horizons))
    cfg.maturities = tuple(int(m) for m in window.get("maturities", cfg.maturities))
    cfg.origin_stride = int(window.get("origin_stride", cfg.origin_stride))
    fit = raw.get("fit", {})
    cfg.first_maxfev = int(fit.get("first_maxfev", cfg.first_maxfev))
    cfg.refit_maxfev = int(fit.get("refit_maxfev", cfg.refit_maxfev))
    scoring = raw.get("scoring", {})
    cfg.n_draws = int(scoring.get("n_draws", cfg.n_draws))
    cfg.forecasts_file = scoring.get("forecasts_file", cfg.forecasts_file)
    portfolio = raw.get("portfolio", {})
    cfg.zetas = tuple(float(z) for z in portfolio.get("zetas", cfg.zetas))
    cfg.risky_maturities = tuple(int(m) for m in portfolio.get("risky_maturities", cfg.risky_maturities))
    cfg.benchmark = portfolio.get("benchmark", cfg.benchmark)
    cfg.forecast_files = tuple(portfolio.get("forecast_files", cfg.forecast_files))
    run = raw.get("run", {})
    cfg.seed = int(run.get("seed", cfg.seed))
    cfg.threads = int(run.get("threads", cfg.threads))
    output = raw.get("output", {})
    cfg.out_dir = output.get("directory", cfg.out_dir)
    cfg.figures = bool(output.get("figures", cfg.figures))

    if cfg.scheme not in ("expanding", "moving"):
        raise ValidationError(f"unknown window scheme {cfg.scheme!r}")
    if cfg.origin_stride < 1 or cfg.threads < 0 or cfg.n_draws < 2:
        raise ValidationError("origin_stride >= 1, threads >= 0, n_draws >= 2 required")
    if not cfg.horizons or not cfg.maturities:
        raise ValidationError("horizons and maturities must be nonempty")
    cfg.model_spec()  # trigger ModelSpec validation early
    return cfg
