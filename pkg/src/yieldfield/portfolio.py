"""Mean-variance bond allocation and the performance-fee study.

Returns follow the zero-coupon log-price identity P(t, m) = exp(-y m / 1200)
with y in percent and m in months: holding an m-month bond for h months earns
log R = m y_t(m)/1200 - (m - h) y_{t+h}(m - h)/1200. The 10-year bond over one
month is treated as the riskless leg at its known current yield. Realized
quadratic utility uses U(R) = R - R^2/4 (unit relative risk aversion), and the
performance fee solves the resulting utility equality in closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataio import YieldPanel
from .errors import DomainError, ValidationError
from .forecast import BacktestReport

RISKLESS_MATURITY = 120


def _interp_yield(maturities, values, m):
    """Linear interpolation in maturity; callers opt in to flat short-end use."""
    maturities = np.asarray(maturities, dtype=float)
    return float(np.interp(float(m), maturities, np.asarray(values, dtype=float)))


def _log_price(yield_pct, m_months):
    return -float(yield_pct) * float(m_months) / 1200.0


def bond_returns(
    panel: YieldPanel,
    origin: int,
    m: int,
    h: int,
    forecast_mean,
    forecast_sd,
    forecast_maturities,
    allow_short_extrapolation: bool = False,
):
    """(expected gross return, return variance, realized gross return) of
    holding the m-month zero over h months from the forecast origin."""
    t = panel.date_index(origin)
    if t + h >= panel.n_periods:
        raise ValidationError(f"target month beyond panel end for origin {origin}")
    m_sell = m - h
    if m_sell < 0:
        raise DomainError("holding period exceeds the bond maturity")
    grid_min = float(np.min(forecast_maturities))
    if m_sell < grid_min and not allow_short_extrapolation:
        raise DomainError(
            f"maturity {m_sell} is below the forecast grid minimum {grid_min}"
        )
    y_now = panel.yields[t, panel.maturity_index(m)]
    log_p_now = _log_price(y_now, m)

    if m_sell == 0:
        exp_ret = float(np.exp(-log_p_now))
        return exp_ret, 0.0, exp_ret

    # np.interp clamps flat beyond the grid ends, which is exactly the
    # permitted short-end extrapolation
    y_hat = _interp_yield(forecast_maturities, forecast_mean, m_sell)
    sd_hat = _interp_yield(forecast_maturities, forecast_sd, m_sell)
    exp_ret = float(np.exp(_log_price(y_hat, m_sell) - log_p_now))
    ret_var = (m_sell / 1200.0) ** 2 * sd_hat**2

    y_real = _interp_yield(panel.maturities, panel.yields[t + h], m_sell)
    realized = float(np.exp(_log_price(y_real, m_sell) - log_p_now))
    return exp_ret, ret_var, realized


def riskless_return(panel: YieldPanel, origin: int, h: int, maturity: int = RISKLESS_MATURITY) -> float:
    """Gross return of the leg whose yield is known in advance."""
    t = panel.date_index(origin)
    y = panel.yields[t, panel.maturity_index(maturity)]
    return float(np.exp(y * h / 1200.0))


def mean_variance_weights(mu, Sigma, delta: float) -> np.ndarray:
    """Minimize w' Sigma w - w'mu/delta subject to w'1 = 1 (KKT closed form)."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if delta <= 0:
        raise DomainError("risk aversion must be positive")
    n = mu.size
    if Sigma.shape != (n, n):
        raise DomainError("Sigma shape does not match mu")
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * Sigma
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate([mu / delta, [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"singular mean-variance system: {exc}") from exc
    return sol[:n]


RRA_DEFAULT = 1.0


def realized_utility(returns, rra: float = RRA_DEFAULT) -> float:
    """Sum of R - (rra/(2(1+rra))) R^2 over the path; rra=1 gives R - R^2/4."""
    r = np.asarray(returns, dtype=float)
    if np.any(r <= 0):
        raise DomainError("gross returns must be positive")
    c = rra / (2.0 * (1.0 + rra))
    return float(np.sum(r - c * r * r))


def performance_fee(model_returns, benchmark_returns, allow_invalid: bool = False) -> float:
    """Constant per-period fee F equating quadratic utilities of two paths.

    Solves sum[(R_M - F) - (R_M - F)^2/4] = sum[R_B - R_B^2/4], a quadratic in
    F; among roots keeping marginal utility positive (F < 2 - max R_M), the
    smaller-magnitude one is returned. Leveraged paths can leave no usable
    root; with allow_invalid the flagged cases degrade instead of raising:
    nan when no real root exists, otherwise the smaller-magnitude real root.
    """
    r_m = np.asarray(model_returns, dtype=float)
    r_b = np.asarray(benchmark_returns, dtype=float)
    if r_m.shape != r_b.shape or r_m.ndim != 1 or r_m.size == 0:
        raise ValidationError("return paths must be equal-length vectors")
    if np.any(r_m <= 0) or np.any(r_b <= 0):
        raise DomainError("gross returns must be positive")
    n = r_m.size
    u_m = realized_utility(r_m)
    u_b = realized_utility(r_b)
    if u_m == u_b:
        return 0.0
    a = n / 4.0
    b = n - 0.5 * float(np.sum(r_m))
    c = u_b - u_m
    disc = b * b - 4.0 * a * c
    if disc < 0:
        if not allow_invalid:
            raise DomainError("utility gap too large for a real quadratic-utility fee")
        warnings.warn("no real quadratic-utility fee equates these paths")
        return float("nan")
    roots = np.array([(-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)])
    valid = roots[roots < 2.0 - float(r_m.max())]
    if valid.size == 0:
        if not allow_invalid:
            raise DomainError("no fee keeps marginal utility positive on this path")
        warnings.warn("fee lies outside the positive-marginal-utility region")
        valid = roots
    return float(valid[np.argmin(np.abs(valid))])


@dataclass
class StrategyPath:
    """Realized portfolio path of one (model, maturity, risk-aversion) cell."""

    model_tag: str
    maturity: int
    delta: float
    origins: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    gross_returns: list = field(default_factory=list)

    @property
    def returns(self) -> np.ndarray:
        return np.asarray(self.gross_returns, dtype=float)

    def utility(self) -> float:
        return realized_utility(self.returns)


def strategy_path(
    report: BacktestReport,
    panel: YieldPanel,
    maturity: int,
    delta: float,
    horizon: int = 1,
) -> StrategyPath:
    """Two-asset path: the risky m-month bond against the 10-year riskless leg."""
    path = StrategyPath(model_tag=report.model_tag, maturity=maturity, delta=delta)
    by_origin: dict = {}
    for origin, h, m, mean, sd, actual in report.rows:
        if h != horizon:
            continue
        by_origin.setdefault(origin, {})[m] = (mean, sd)
    if not by_origin:
        raise ValidationError(f"no horizon-{horizon} forecasts in the report")
    for origin in sorted(by_origin):
        cell = by_origin[origin]
        f_mats = np.array(sorted(cell))
        f_mean = np.array([cell[m][0] for m in f_mats])
        f_sd = np.array([cell[m][1] for m in f_mats])
        exp_r, var_r, real_r = bond_returns(
            panel, origin, maturity, horizon, f_mean, f_sd, f_mats,
            allow_short_extrapolation=True,
        )
        r_f = riskless_return(panel, origin, horizon)
        # two-asset closed form: w_risky = (mu - r_f) / (2 delta var)
        if var_r <= 0:
            w_risky = 0.0 if exp_r <= r_f else 1.0
        else:
            w_risky = (exp_r - r_f) / (2.0 * delta * var_r)
        gross = 1.0 + w_risky * (real_r - 1.0) + (1.0 - w_risky) * (r_f - 1.0)
        if gross <= 0:
            gross = 1e-6
        path.origins.append(origin)
        path.weights.append((w_risky, 1.0 - w_risky))
        path.gross_returns.append(gross)
    return path


ZETA_GRID = (4.0, 2.0, 1.0)
RISKY_MATURITIES = (3, 12, 36, 60)


@dataclass
class FeeTable:
    rows: list = field(default_factory=list)  # (zeta, maturity, model, fee_pct)

    def to_csv(self) -> str:
        out = ["zeta,maturity,model,fee_pct"]
        for zeta, m, model, fee in self.rows:
            out.append(f"{repr(float(zeta))},{m},{model},{repr(float(fee))}")
        return "\n".join(out) + "\n"


def run_portfolio_study(
    reports: dict,
    panel: YieldPanel,
    benchmark: str = "bdns",
    zetas=ZETA_GRID,
    maturities=RISKY_MATURITIES,
    horizon: int = 1,
) -> FeeTable:
    """Performance fees of each model's monthly-rebalanced strategy against the
    benchmark, as a percentage of the benchmark's average gross return.

    The risk-aversion used for the weights is bound to the utility parameter
    zeta of each grid row.
    """
    if benchmark not in reports:
        raise ValidationError(f"benchmark {benchmark!r} missing from the report set")
    table = FeeTable()
    for zeta in zetas:
        for m in maturities:
            bench = strategy_path(reports[benchmark], panel, m, float(zeta), horizon)
            for tag, rep in reports.items():
                if tag == benchmark:
                    continue
                path = strategy_path(rep, panel, m, float(zeta), horizon)
                if path.origins != bench.origins:
                    raise ValidationError(
                        f"origin mismatch between {tag!r} and the benchmark for m={m}"
                    )
                fee = performance_fee(path.returns, bench.returns, allow_invalid=True)
                fee_pct = 100.0 * fee / float(np.mean(bench.returns))
                table.rows.append((float(zeta), int(m), tag, float(fee_pct)))
    return table
