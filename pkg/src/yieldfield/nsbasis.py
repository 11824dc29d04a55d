"""Nelson-Siegel loading functions and the decay-parameter machinery.

The three loadings at maturity m (months) for decay rate lam (1/months) are

    level(m)     = 1
    slope(m)     = (1 - exp(-lam*m)) / (lam*m)
    curvature(m) = slope(m) - exp(-lam*m)

With lam = 0.0609 the curvature loading peaks near 30 months. For joint
estimation the decay rate is driven by a standard-normal latent variable
through lam = q(Phi(lam_tilde)), where q is the quantile function of the
configured prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .errors import DomainError

NS_LAMBDA_DEFAULT = 0.0609

# below this value of lam*m the closed forms lose digits to cancellation
_SERIES_THRESHOLD = 1e-4
_PROB_CLAMP = 1e-12


def _slope_term(x):
    """(1 - exp(-x))/x with a series branch for tiny x."""
    x = np.asarray(x, dtype=float)
    small = x < _SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    direct = (1.0 - np.exp(-safe)) / safe
    series = 1.0 - x / 2.0 + x * x / 6.0
    return np.where(small, series, direct)


def _slope_term_deriv(x):
    """d/dx of (1 - exp(-x))/x, series branch for tiny x."""
    x = np.asarray(x, dtype=float)
    small = x < _SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    direct = (np.exp(-safe) * (1.0 + safe) - 1.0) / (safe * safe)
    series = -0.5 + x / 3.0 - x * x / 8.0
    return np.where(small, series, direct)


def loading_row(lam: float, m: float) -> tuple[float, float, float]:
    """Return (level, slope, curvature) loadings at one maturity."""
    if lam <= 0 or m <= 0:
        raise DomainError(f"loading_row requires lam > 0 and m > 0, got ({lam}, {m})")
    x = lam * m
    s = float(_slope_term(x))
    return 1.0, s, s - math.exp(-x)


@dataclass(frozen=True)
class NsLoadings:
    """Observation matrix of Nelson-Siegel loadings at a maturity grid."""

    lam: float
    maturities: np.ndarray
    matrix: np.ndarray  # (M, 3): level, slope, curvature columns

    def row(self, m: float) -> np.ndarray:
        return np.array(loading_row(self.lam, m))


def observation_matrix(lam: float, maturities) -> NsLoadings:
    maturities = np.asarray(maturities, dtype=float)
    if maturities.size == 0:
        raise DomainError("observation_matrix requires a nonempty maturity list")
    if lam <= 0 or np.any(maturities <= 0):
        raise DomainError("observation_matrix requires lam > 0 and maturities > 0")
    x = lam * maturities
    s = _slope_term(x)
    mat = np.column_stack([np.ones_like(s), s, s - np.exp(-x)])
    return NsLoadings(lam=float(lam), maturities=maturities, matrix=mat)


def loading_gradient(lam: float, m: float) -> tuple[float, float]:
    """d(slope)/d(lam) and d(curvature)/d(lam) at one maturity.

    slope = f(lam*m) with f = (1-e^{-x})/x, so d(slope)/d(lam) = m f'(lam*m);
    curvature adds +m e^{-lam m} from the -e^{-lam m} term.
    """
    if lam <= 0 or m <= 0:
        raise DomainError(f"loading_gradient requires lam > 0 and m > 0, got ({lam}, {m})")
    x = lam * m
    fp = float(_slope_term_deriv(x))
    dslope = m * fp
    dcurv = m * (fp + math.exp(-x))
    return dslope, dcurv


def gradient_matrix(lam: float, maturities) -> np.ndarray:
    """(M, 3) array of loading derivatives in lam; level column is zero."""
    maturities = np.asarray(maturities, dtype=float)
    x = lam * maturities
    fp = _slope_term_deriv(x)
    dslope = maturities * fp
    dcurv = maturities * (fp + np.exp(-x))
    return np.column_stack([np.zeros_like(dslope), dslope, dcurv])


@dataclass(frozen=True)
class LambdaPrior:
    """Prior for the decay rate, given by mean and cv (lognormal) or shape (gamma)."""

    family: str = "lognormal"
    mean: float = 0.068
    cv: float = 0.19
    shape: float = 4.0

    def __post_init__(self):
        if self.family not in ("lognormal", "gamma"):
            raise DomainError(f"unknown lambda prior family: {self.family!r}")
        if self.mean <= 0:
            raise DomainError("lambda prior mean must be positive")
        if self.family == "lognormal" and self.cv <= 0:
            raise DomainError("lognormal prior needs cv > 0")
        if self.family == "gamma" and self.shape <= 0:
            raise DomainError("gamma prior needs shape > 0")

    def _dist(self):
        if self.family == "lognormal":
            sigma2 = math.log1p(self.cv**2)
            mu = math.log(self.mean) - sigma2 / 2.0
            return stats.lognorm(s=math.sqrt(sigma2), scale=math.exp(mu))
        rate = self.shape / self.mean
        return stats.gamma(self.shape, scale=1.0 / rate)

    def quantile(self, p):
        return self._dist().ppf(p)

    def cdf(self, x):
        return self._dist().cdf(x)

    def pdf(self, x):
        return self._dist().pdf(x)

    @property
    def median(self) -> float:
        return float(self._dist().median())


def lambda_from_latent(tilde: float, prior: LambdaPrior) -> float:
    """Map the standard-normal latent to a decay rate via the prior quantile."""
    p = np.clip(ndtr(tilde), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return float(prior.quantile(p))


def latent_from_lambda(lam: float, prior: LambdaPrior) -> float:
    p = np.clip(prior.cdf(lam), _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return float(ndtri(p))


def lambda_latent_gradient(tilde: float, prior: LambdaPrior) -> float:
    """d(lam)/d(lam_tilde) by the inverse-function rule on the quantile map."""
    p = float(np.clip(ndtr(tilde), _PROB_CLAMP, 1.0 - _PROB_CLAMP))
    lam = float(prior.quantile(p))
    dens = float(prior.pdf(lam))
    if dens <= 0.0:
        return 0.0
    return float(stats.norm.pdf(tilde)) / dens
