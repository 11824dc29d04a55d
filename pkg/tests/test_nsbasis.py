import decimal

import numpy as np
import pytest

from yieldfield.errors import DomainError
from yieldfield.nsbasis import (
    LambdaPrior,
    NS_LAMBDA_DEFAULT,
    gradient_matrix,
    lambda_from_latent,
    lambda_latent_gradient,
    latent_from_lambda,
    loading_gradient,
    loading_row,
    observation_matrix,
)

PAPER_MATURITIES = (3, 6, 9, 12, 15, 18, 21, 24, 30, 36, 48, 60, 72, 84, 96, 108, 120)


def high_precision_slope(lam, m):
    """(1 - e^{-lam m})/(lam m) at 50 significant digits."""
    decimal.getcontext().prec = 50
    x = decimal.Decimal(str(lam)) * decimal.Decimal(str(m))
    return float((1 - (-x).exp()) / x)


class TestLoadingRow:
    def test_curvature_peak_near_30_months(self):
        curv = [loading_row(NS_LAMBDA_DEFAULT, m)[2] for m in range(1, 121)]
        peak = 1 + int(np.argmax(curv))
        assert 28 <= peak <= 32

    def test_small_argument_limit(self):
        _, slope, curv = loading_row(1e-9, 1.0)
        assert slope == pytest.approx(1.0, abs=1e-8)
        assert curv == pytest.approx(0.0, abs=1e-8)

    def test_matches_high_precision_evaluation(self):
        _, slope, _ = loading_row(NS_LAMBDA_DEFAULT, 120.0)
        assert slope == pytest.approx(high_precision_slope(NS_LAMBDA_DEFAULT, 120.0), rel=1e-14)

    def test_rejects_nonpositive_inputs(self):
        with pytest.raises(DomainError):
            loading_row(0.0, 12.0)
        with pytest.raises(DomainError):
            loading_row(0.05, -1.0)


class TestObservationMatrix:
    def test_level_column_is_ones(self):
        L = observation_matrix(NS_LAMBDA_DEFAULT, PAPER_MATURITIES)
        assert L.matrix.shape == (17, 3)
        assert np.all(L.matrix[:, 0] == 1.0)

    def test_single_maturity(self):
        L = observation_matrix(NS_LAMBDA_DEFAULT, [3])
        assert L.matrix.shape == (1, 3)

    def test_slope_decreases_with_maturity(self):
        L = observation_matrix(NS_LAMBDA_DEFAULT, [3, 120])
        assert L.matrix[0, 1] > L.matrix[1, 1]


class TestLoadingGradient:
    def test_matches_central_differences_at_paper_point(self):
        lam, m = NS_LAMBDA_DEFAULT, 24.0
        eps = 1e-6
        ds, dc = loading_gradient(lam, m)
        s_hi, c_hi = loading_row(lam + eps, m)[1:]
        s_lo, c_lo = loading_row(lam - eps, m)[1:]
        assert ds == pytest.approx((s_hi - s_lo) / (2 * eps), rel=1e-6)
        assert dc == pytest.approx((c_hi - c_lo) / (2 * eps), rel=1e-6)

    def test_level_gradient_is_zero(self):
        G = gradient_matrix(NS_LAMBDA_DEFAULT, np.array(PAPER_MATURITIES, dtype=float))
        assert np.all(G[:, 0] == 0.0)

    def test_slope_gradient_negative_at_long_end(self):
        ds, _ = loading_gradient(NS_LAMBDA_DEFAULT, 120.0)
        assert ds < 0

    def test_gradient_grid_against_finite_differences(self):
        lams = np.linspace(0.01, 0.2, 20)
        mats = np.linspace(1.0, 120.0, 20)
        eps = 1e-6
        for lam in lams:
            G = gradient_matrix(lam, mats)
            Lp = observation_matrix(lam + eps, mats).matrix
            Lm = observation_matrix(lam - eps, mats).matrix
            fd = (Lp - Lm) / (2 * eps)
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(G[:, 1:] - fd[:, 1:]) / scale[:, 1:]) < 1e-5


class TestLoadingShapeInvariants:
    # the curvature peak sits at ~1.79/lam months, so it is interior to the
    # 1..120 grid only for lam above ~0.015
    def test_slope_and_curvature_ranges(self):
        for lam in np.linspace(0.01, 0.2, 12):
            L = observation_matrix(lam, np.arange(1.0, 121.0)).matrix
            assert np.all(L[:, 1] > 0) and np.all(L[:, 1] <= 1.0)
            assert np.all(L[:, 2] >= 0) and np.all(L[:, 2] < 0.4)
            dcurv = np.diff(L[:, 2])
            sign_changes = np.sum(np.diff(np.sign(dcurv[dcurv != 0])) != 0)
            expected = 1 if 1.8 / lam < 120 else 0
            assert sign_changes == expected


class TestLambdaPrior:
    def test_lognormal_median_from_mean_cv(self):
        prior = LambdaPrior("lognormal", mean=0.068, cv=0.19)
        expected = 0.068 / np.sqrt(1.0 + 0.19**2)
        assert lambda_from_latent(0.0, prior) == pytest.approx(expected, rel=1e-12)

    def test_gamma_median_from_incomplete_gamma_inversion(self):
        from scipy.special import gammaincinv

        prior = LambdaPrior("gamma", mean=0.068, shape=4.0)
        rate = 4.0 / 0.068
        expected = gammaincinv(4.0, 0.5) / rate
        assert lambda_from_latent(0.0, prior) == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("family", ["lognormal", "gamma"])
    def test_monotone_in_latent(self, family):
        prior = LambdaPrior(family, mean=0.068)
        vals = [lambda_from_latent(t, prior) for t in (-1.0, 0.0, 1.0)]
        assert vals[0] < vals[1] < vals[2]

    @pytest.mark.parametrize("family", ["lognormal", "gamma"])
    def test_latent_roundtrip_identity(self, family):
        prior = LambdaPrior(family, mean=0.068)
        for lam in (0.03, 0.068, 0.12):
            assert lambda_from_latent(latent_from_lambda(lam, prior), prior) == pytest.approx(
                lam, abs=1e-10
            )

    def test_latent_gradient_positive_and_matches_fd(self):
        prior = LambdaPrior("lognormal", mean=0.068, cv=0.19)
        eps = 1e-6
        for t in (-0.8, 0.0, 1.3):
            g = lambda_latent_gradient(t, prior)
            fd = (lambda_from_latent(t + eps, prior) - lambda_from_latent(t - eps, prior)) / (2 * eps)
            assert g == pytest.approx(fd, rel=1e-5)
            assert g > 0
