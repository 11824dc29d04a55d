import numpy as np
import pytest

from yieldfield.dataio import YieldPanel, month_add
from yieldfield.nsbasis import observation_matrix
from yieldfield.twostep import fit_ar1, ols_factors


def constant_panel(T=30, value=5.0):
    mats = np.array([3, 12, 36, 60, 120])
    dates = np.array([month_add(198501, k) for k in range(T)])
    return YieldPanel(dates=dates, maturities=mats, yields=np.full((T, 5), value))


class TestOlsFactors:
    def test_single_period_matches_dense_least_squares(self, dns_panel):
        panel, _ = dns_panel
        ts = ols_factors(panel, 0.0609)
        L = observation_matrix(0.0609, panel.maturities).matrix
        for t in (0, 57, panel.n_periods - 1):
            ref = np.linalg.solve(L.T @ L, L.T @ panel.yields[t])
            assert np.max(np.abs(ts.factors[t] - ref)) < 1e-10

    def test_constant_panel_gives_constant_factors(self):
        panel = constant_panel()
        ts = ols_factors(panel)
        assert np.allclose(np.diff(ts.factors, axis=0), 0.0, atol=1e-12)
        fitted = ts.factors @ ts.loadings.T
        assert np.max(np.abs(fitted - panel.yields)) < 1e-10

    def test_residual_variance_is_small_for_exact_dns_surface(self):
        mats = np.array([3, 12, 36, 60, 120])
        L = observation_matrix(0.0609, mats).matrix
        rng = np.random.default_rng(0)
        factors = np.column_stack([
            6 + 0.3 * rng.standard_normal(40),
            -1 + 0.3 * rng.standard_normal(40),
            0.5 + 0.3 * rng.standard_normal(40),
        ])
        dates = np.array([month_add(198501, k) for k in range(40)])
        panel = YieldPanel(dates=dates, maturities=mats, yields=np.maximum(factors @ L.T, 0.01))
        assert ols_factors(panel).resid_var < 1e-18


class TestAr1Fit:
    def test_recovers_simulated_coefficients(self):
        rng = np.random.default_rng(1)
        x = np.empty(4000)
        x[0] = 0.0
        for t in range(1, x.size):
            x[t] = 1.0 + 0.7 * x[t - 1] + 0.5 * rng.standard_normal()
        ar = fit_ar1(x)
        assert ar.slope == pytest.approx(0.7, abs=0.03)
        assert ar.intercept == pytest.approx(1.0, abs=0.12)
        assert ar.innov_var == pytest.approx(0.25, rel=0.1)
        assert ar.mean == pytest.approx(1.0 / 0.3, rel=0.05)

    def test_direct_lag_projection(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(200)
        ar = fit_ar1(x, lag=6)
        X = np.column_stack([np.ones(194), x[:-6]])
        ref = np.linalg.lstsq(X, x[6:], rcond=None)[0]
        assert ar.intercept == pytest.approx(ref[0], abs=1e-10)
        assert ar.slope == pytest.approx(ref[1], abs=1e-10)
