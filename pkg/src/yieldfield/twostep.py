"""Classical two-step estimation: per-month OLS of yields on the loadings,
then least-squares AR(1) projections of each factor path.

Used both as the benchmark forecaster and to seed the MAP optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import YieldPanel
from .errors import DomainError, ValidationError
from .nsbasis import NS_LAMBDA_DEFAULT, observation_matrix

MIN_WINDOW = 24


@dataclass(frozen=True)
class Ar1Fit:
    intercept: float
    slope: float
    innov_var: float
    lag: int

    @property
    def mean(self) -> float:
        if abs(1.0 - self.slope) < 1e-12:
            return self.intercept / 1e-12
        return self.intercept / (1.0 - self.slope)


@dataclass(frozen=True)
class TwoStepFit:
    lam: float
    factors: np.ndarray        # (T, 3) OLS paths: level, slope, curvature
    resid_var: float           # pooled cross-sectional OLS residual variance
    loadings: np.ndarray       # (M, 3)
    maturities: np.ndarray


def ols_factors(panel: YieldPanel, lam: float = NS_LAMBDA_DEFAULT) -> TwoStepFit:
    """Regress each month's curve on the three loadings."""
    L = observation_matrix(lam, panel.maturities).matrix
    if np.linalg.matrix_rank(L) < 3:
        raise DomainError("loading matrix is rank deficient for this maturity grid")
    # one shared design, solve all months at once
    coef, res, _, _ = np.linalg.lstsq(L, panel.yields.T, rcond=None)
    fitted = L @ coef
    resid = panel.yields.T - fitted
    dof = max(panel.n_maturities - 3, 1) * panel.n_periods
    return TwoStepFit(
        lam=lam,
        factors=coef.T,
        resid_var=float(np.sum(resid**2) / dof),
        loadings=L,
        maturities=panel.maturities,
    )


def fit_ar1(series: np.ndarray, lag: int = 1) -> Ar1Fit:
    """Least-squares projection of x_t on (1, x_{t-lag})."""
    x = np.asarray(series, dtype=float)
    if x.size <= lag + 1:
        raise ValidationError(f"series too short for lag {lag}")
    X = np.column_stack([np.ones(x.size - lag), x[:-lag]])
    y = x[lag:]
    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(y.size - 2, 1)
    return Ar1Fit(
        intercept=float(beta[0]),
        slope=float(beta[1]),
        innov_var=float(resid @ resid / dof),
        lag=lag,
    )
