"""h-step-ahead predictive distributions and the rolling backtest driver.

Every yield forecast is a linear functional of the joint latent posterior
plus independent future-innovation variance, so predictive moments come from
a handful of sparse solves against the posterior precision; factor-field
posterior cross-covariances are therefore included exactly.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

from .dataio import YieldPanel, month_add, rolling_origins
from .errors import DomainError, ValidationError
from .inference import FitResult, ModelSpec, fit_joint_lambda, fit_map
from .nsbasis import NS_LAMBDA_DEFAULT, gradient_matrix, observation_matrix
from .nsbasis import lambda_latent_gradient, latent_from_lambda
from .twostep import fit_ar1, ols_factors


@dataclass
class PredictiveDistribution:
    """Gaussian forecast per maturity at one (origin, horizon)."""

    origin: int
    horizon: int
    maturities: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    trend_mean: np.ndarray
    field_mean: np.ndarray
    var_trend: np.ndarray
    var_field: np.ndarray
    var_cross: np.ndarray
    var_noise: np.ndarray

    def __post_init__(self):
        if np.any(self.sd <= 0):
            raise DomainError("predictive standard deviations must be positive")

    def sample(self, count: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.mean[None, :] + self.sd[None, :] * rng.standard_normal(
            (count, self.maturities.size)
        )

    def sampler(self, maturity_index: int):
        mu = float(self.mean[maturity_index])
        sd = float(self.sd[maturity_index])
        return lambda count, rng: mu + sd * rng.standard_normal(count)


def forecast_factors(fit: FitResult, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-factor forecast mean and variance at T+h from the AR(1) dynamics."""
    if h < 1:
        raise DomainError("horizon must be >= 1")
    params = fit.factor_params()
    T = fit.ctx.T
    last_idx = [fit.slices[f"factor_{p['name']}"].stop - 1 for p in params]
    last_var = fit.posterior.marginal_variances(last_idx)
    means = np.empty(len(params))
    variances = np.empty(len(params))
    for k, p in enumerate(params):
        dev = float(fit.posterior.mean[last_idx[k]])
        phi2h = p["phi"] ** (2 * h)
        means[k] = p["mu"] + (p["phi"] ** h) * dev
        variances[k] = phi2h * last_var[k] + p["sigma2"] * (1.0 - phi2h) / (1.0 - p["phi"] ** 2)
    return means, variances


def _field_rows(fit: FitResult, h: int, maturities) -> tuple[np.ndarray, np.ndarray]:
    """(n_latent_field, M) evaluation rows for u at (T+h, m) and the forward
    innovation variance not captured by the latent posterior."""
    rep = fit.field_rep
    ctx = fit.ctx
    M = len(maturities)
    if rep is None:
        return np.zeros((0, M)), np.zeros(M)
    if rep.temporal is not None:
        dyn = rep.temporal
        m_scaled = ctx.coord_map.scaled_maturity(np.asarray(maturities, dtype=float))
        from .fem import projection_matrix

        a_m = projection_matrix(rep.mesh, m_scaled[:, None]).toarray()  # (M, n_m)
        Fh = np.linalg.matrix_power(dyn.F, h)
        rows_last = a_m @ Fh  # (M, n_m)
        cov_h = np.zeros_like(dyn.innov_cov)
        Fj = np.eye(dyn.n_space)
        for _ in range(h):
            cov_h = cov_h + Fj @ dyn.innov_cov @ Fj.T
            Fj = dyn.F @ Fj
        extra = np.einsum("ij,jk,ik->i", a_m, cov_h, a_m)
        W = np.zeros((rep.n_latent, M))
        W[(dyn.n_time - 1) * dyn.n_space :, :] = rows_last.T
        return W, extra
    # spatial variants: (T+h, m) is an unobserved location of the same field
    t_star = ctx.T + h
    pts = ctx.coord_map.to_scaled(np.full(M, t_star), np.asarray(maturities, dtype=float))
    P_star = rep.project_points(pts)  # weights included, (M, n_latent)
    return P_star.toarray().T, np.zeros(M)


def forecast_field(fit: FitResult, h: int, maturities) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance of the residual field at (T+h, m)."""
    W_f, extra = _field_rows(fit, h, maturities)
    M = len(maturities)
    if W_f.shape[0] == 0:
        return np.zeros(M), np.zeros(M)
    sl = fit.slices["field"]
    W = np.zeros((fit.posterior.n, M))
    W[sl] = W_f
    mean = W.T @ fit.posterior.mean
    Z = fit.posterior.factor.solve(W)
    var = np.einsum("ij,ij->j", W, Z) + extra
    return mean, var


def predict_yield(fit: FitResult, h: int, maturities) -> PredictiveDistribution:
    """Forecast distribution combining trend, field, and measurement noise."""
    maturities = np.asarray(maturities, dtype=int)
    M = maturities.size
    ctx = fit.ctx
    lam = fit.lambda_hat
    L = observation_matrix(lam, maturities.astype(float)).matrix[:, ctx.factor_cols]
    params = fit.factor_params()
    n = fit.posterior.n

    W_trend = np.zeros((n, M))
    const = np.zeros(M)
    for k, p in enumerate(params):
        sl = fit.slices[f"factor_{p['name']}"]
        W_trend[sl.stop - 1, :] += (p["phi"] ** h) * L[:, k]
        const += p["mu"] * L[:, k]

    W_field = np.zeros((n, M))
    field_rows, field_extra = _field_rows(fit, h, maturities)
    if field_rows.shape[0]:
        W_field[fit.slices["field"]] = field_rows

    W_lam = np.zeros((n, M))
    if "lambda_tilde" in fit.slices:
        # propagate decay-rate uncertainty through the linearized loadings
        dL = gradient_matrix(lam, maturities.astype(float))[:, ctx.factor_cols]
        lt = latent_from_lambda(lam, fit.spec.lambda_prior)
        dlam = lambda_latent_gradient(lt, fit.spec.lambda_prior)
        fmeans, _ = forecast_factors(fit, h)
        sens = (dL * fmeans[None, :]).sum(axis=1) * dlam
        W_lam[fit.slices["lambda_tilde"].start, :] = sens

    W = W_trend + W_field + W_lam
    mu_post = fit.posterior.mean
    Z = fit.posterior.factor.solve(W)

    innov_var = np.zeros(M)
    for k, p in enumerate(params):
        phi2h = p["phi"] ** (2 * h)
        innov_var += (L[:, k] ** 2) * p["sigma2"] * (1.0 - phi2h) / (1.0 - p["phi"] ** 2)

    var_trend = np.einsum("ij,ij->j", W_trend + W_lam, fit.posterior.factor.solve(W_trend + W_lam)) + innov_var
    var_field = (
        np.einsum("ij,ij->j", W_field, fit.posterior.factor.solve(W_field)) + field_extra
        if field_rows.shape[0]
        else np.zeros(M)
    )
    var_latent = np.einsum("ij,ij->j", W, Z)
    total_var = var_latent + innov_var + field_extra + fit.sigma_e2
    var_cross = total_var - var_trend - var_field - fit.sigma_e2

    trend_mean = const + W_trend.T @ mu_post + W_lam.T @ mu_post
    field_mean = W_field.T @ mu_post
    return PredictiveDistribution(
        origin=int(fit.ctx.panel.dates[-1]),
        horizon=h,
        maturities=maturities,
        mean=const + W.T @ mu_post,
        sd=np.sqrt(total_var),
        trend_mean=trend_mean,
        field_mean=field_mean,
        var_trend=var_trend,
        var_field=var_field,
        var_cross=var_cross,
        var_noise=np.full(M, fit.sigma_e2),
    )


def two_step_baseline(
    panel: YieldPanel,
    lam: float = NS_LAMBDA_DEFAULT,
    h: int = 1,
    maturities=None,
    direct: bool = True,
) -> PredictiveDistribution:
    """Classical two-step forecast: per-month OLS factors, least-squares AR(1)
    factor projections (direct h-month lag by default), loadings map back."""
    if panel.n_periods < 24:
        raise ValidationError("two-step baseline needs at least 24 months")
    maturities = panel.maturities if maturities is None else np.asarray(maturities, dtype=int)
    ts = ols_factors(panel, lam)
    L = observation_matrix(lam, maturities.astype(float)).matrix
    means = np.empty(3)
    variances = np.empty(3)
    for k in range(3):
        path = ts.factors[:, k]
        if direct:
            ar = fit_ar1(path, lag=h)
            means[k] = ar.intercept + ar.slope * path[-1]
            variances[k] = ar.innov_var
        else:
            ar = fit_ar1(path, lag=1)
            phi = ar.slope
            means[k] = ar.mean + (phi**h) * (path[-1] - ar.mean)
            variances[k] = ar.innov_var * (1.0 - phi ** (2 * h)) / max(1.0 - phi**2, 1e-12)
    mean = L @ means
    var = (L**2) @ variances + ts.resid_var
    return PredictiveDistribution(
        origin=int(panel.dates[-1]),
        horizon=h,
        maturities=maturities,
        mean=mean,
        sd=np.sqrt(var),
        trend_mean=mean.copy(),
        field_mean=np.zeros_like(mean),
        var_trend=(L**2) @ variances,
        var_field=np.zeros_like(mean),
        var_cross=np.zeros_like(mean),
        var_noise=np.full(mean.size, ts.resid_var),
    )


class TwoStepForecaster:
    """Stateless wrapper of the classical baseline for backtests."""

    def __init__(self, lam: float = NS_LAMBDA_DEFAULT, direct: bool = True, tag: str = "baseline"):
        self.lam = lam
        self.direct = direct
        self.tag = tag

    def predict(self, window_panel: YieldPanel, h: int, maturities) -> PredictiveDistribution:
        return two_step_baseline(window_panel, self.lam, h, maturities, direct=self.direct)


class BayesForecaster:
    """MAP-refitting forecaster; caches one fit per forecast origin.

    Every origin after the first warm-starts from the first origin's estimate,
    so results do not depend on evaluation order (parallel == serial).
    """

    _CACHE_LIMIT = 8  # posteriors are large; keep only a few origins alive

    def __init__(self, spec: ModelSpec, first_maxfev: int = 1500, refit_maxfev: int = 250):
        self.spec = spec
        self.first_maxfev = first_maxfev
        self.refit_maxfev = refit_maxfev
        self.tag = spec.tag
        self._fits: dict[tuple, FitResult] = {}
        self._warm: tuple | None = None

    def _fit(self, window_panel: YieldPanel) -> FitResult:
        key = (int(window_panel.dates[-1]), window_panel.n_periods)
        cached = self._fits.get(key)
        if cached is not None:
            return cached
        if self.spec.lambda_mode == "joint":
            fit = fit_joint_lambda(self.spec, window_panel)
        elif self._warm is None:
            fit = fit_map(self.spec, window_panel, maxfev=self.first_maxfev)
        else:
            fit = fit_map(
                self.spec, window_panel, init=dict(zip(self._warm[0], self._warm[1])),
                maxfev=self.refit_maxfev, restarts=0,
            )
        if self._warm is None:
            fit_vec = np.array([fit.theta[n] for n in fit.ctx.names])
            self._warm = (list(fit.ctx.names), fit_vec)
        self._fits[key] = fit
        while len(self._fits) > self._CACHE_LIMIT:
            self._fits.pop(next(iter(self._fits)))
        return fit

    def predict(self, window_panel: YieldPanel, h: int, maturities) -> PredictiveDistribution:
        return predict_yield(self._fit(window_panel), h, maturities)


@dataclass
class BacktestReport:
    """Aligned forecasts and actuals over rolling origins."""

    model_tag: str
    rows: list = field(default_factory=list)  # (origin, horizon, maturity, mean, sd, actual)
    skipped: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, origin, horizon, maturity, mean, sd, actual):
        self.rows.append((int(origin), int(horizon), int(maturity), float(mean), float(sd), float(actual)))

    def rmse(self) -> dict:
        acc: dict = {}
        for origin, h, m, mean, sd, actual in self.rows:
            acc.setdefault((h, m), []).append((mean - actual) ** 2)
        return {key: float(np.sqrt(np.mean(v))) for key, v in acc.items()}

    def forecasts_csv(self) -> str:
        out = ["model,origin,horizon,maturity,mean,sd,actual"]
        for origin, h, m, mean, sd, actual in self.rows:
            out.append(
                f"{self.model_tag},{origin},{h},{m},{repr(mean)},{repr(sd)},{repr(actual)}"
            )
        return "\n".join(out) + "\n"

    def rmse_csv(self) -> str:
        out = ["model,horizon,maturity,rmse"]
        for (h, m), v in sorted(self.rmse().items()):
            out.append(f"{self.model_tag},{h},{m},{repr(v)}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_forecasts_csv(cls, text: str) -> "BacktestReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 2:
            raise ValidationError("empty forecasts file")
        report = None
        for ln in lines[1:]:
            tag, origin, h, m, mean, sd, actual = ln.split(",")
            if report is None:
                report = cls(model_tag=tag)
            elif tag != report.model_tag:
                raise ValidationError(
                    f"forecasts file mixes model tags {report.model_tag!r} and {tag!r}"
                )
            report.add(int(origin), int(h), int(m), float(mean), float(sd), float(actual))
        return report


def run_backtest(
    forecaster,
    panel: YieldPanel,
    horizons=(1, 6, 12),
    maturities=(3, 12, 36, 60, 120),
    first_target: int | None = None,
    last_target: int | None = None,
    scheme: str = "expanding",
    origin_stride: int = 1,
    threads: int = 1,
    fail_fast: bool = False,
) -> BacktestReport:
    """Rolling out-of-sample evaluation with targets aligned across horizons."""
    maturities = np.asarray(maturities, dtype=int)
    for m in maturities:
        panel.maturity_index(m)
    report = BacktestReport(model_tag=forecaster.tag)
    t_start = time.time()

    tasks = []
    last_t = last_target if last_target is not None else int(panel.dates[-1])
    for h in horizons:
        if first_target is not None:
            first_origin = month_add(first_target, -h)
        else:
            if panel.n_periods <= 24:
                raise ValidationError("panel too short to leave a 24-month training sample")
            # earliest origin that leaves the minimum identifiable sample
            first_origin = int(panel.dates[24])
        windows = rolling_origins(
            panel, first_origin, month_add(last_t, -h), h, scheme=scheme
        )[::origin_stride]
        tasks.extend((h, w) for w in windows)
    # origin-major order so horizons sharing a fit origin stay cache-adjacent
    tasks.sort(key=lambda task: (task[1].train_end, task[0]))

    def run_one(task):
        h, w = task
        window_panel = panel.window(w.train_start, w.train_end)
        origin_date = int(panel.dates[w.train_end])
        logger.debug("forecasting origin %s at horizon %d", origin_date, h)
        try:
            pred = forecaster.predict(window_panel, h, maturities)
        except Exception as exc:  # noqa: BLE001 - origin failures recorded, backtest completes
            if fail_fast:
                raise
            logger.debug("origin %s failed: %r", origin_date, exc)
            return ("skip", origin_date, h, repr(exc))
        target_row = w.train_end + h
        out = []
        for j, m in enumerate(maturities):
            actual = panel.yields[target_row, panel.maturity_index(m)]
            out.append((origin_date, h, int(m), float(pred.mean[j]), float(pred.sd[j]), float(actual)))
        return ("ok", out)

    if threads > 1:
        # first task per horizon runs serially so warm starts are populated
        first_keys = {}
        serial, parallel = [], []
        for task in tasks:
            if task[0] not in first_keys:
                first_keys[task[0]] = True
                serial.append(task)
            else:
                parallel.append(task)
        results = [run_one(t) for t in serial]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results.extend(pool.map(run_one, parallel))
    else:
        results = [run_one(t) for t in tasks]

    for res in results:
        if res[0] == "ok":
            for row in res[1]:
                report.add(*row)
        else:
            report.skipped.append({"origin": res[1], "horizon": res[2], "error": res[3]})
    report.rows.sort(key=lambda r: (r[1], r[0], r[2]))
    report.meta = {
        "n_rows": len(report.rows),
        "n_skipped": len(report.skipped),
        "runtime_seconds": round(time.time() - t_start, 3),
    }
    return report
