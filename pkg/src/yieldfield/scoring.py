"""Proper scoring rules for Gaussian predictive distributions.

CRPS and its scaled version use closed forms; the tail-weighted variants use
Monte Carlo U-statistics with deterministic per-cell seeds. All penalties are
positively oriented (lower is better); the scaled scores follow the
-E|X-y|/E|X-X'| - log(E|X-X'|)/2 form, whose scale term makes them
unit-dependent by design.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .dataio import YieldPanel
from .errors import DomainError, ValidationError

_SQRT_PI = np.sqrt(np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _check_sigma(sigma):
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")


def expected_abs_error_gaussian(mu, sigma, y) -> float:
    """E|X - y| for X ~ N(mu, sigma^2)."""
    z = (y - mu) / sigma
    return float(sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * _phi(z)))


def crps_gaussian(mu, sigma, y) -> float:
    """Closed-form CRPS penalty: sigma * [z(2Phi(z)-1) + 2phi(z) - 1/sqrt(pi)]."""
    _check_sigma(sigma)
    z = (y - mu) / sigma
    return float(sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * _phi(z) - 1.0 / _SQRT_PI))


def scrps_gaussian(mu, sigma, y) -> float:
    """Scale-adjusted score -E|X-y|/E|X-X'| - log(E|X-X'|)/2 with E|X-X'| = 2 sigma/sqrt(pi)."""
    _check_sigma(sigma)
    spread = 2.0 * sigma / _SQRT_PI
    return float(-expected_abs_error_gaussian(mu, sigma, y) / spread - 0.5 * np.log(spread))


def pairwise_mean_abs_diff(x: np.ndarray) -> float:
    """U-statistic mean |x_i - x_j| over all pairs, O(n log n) via sorting."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < 2:
        return 0.0
    k = np.arange(n)
    total = float(np.sum((2.0 * k - (n - 1)) * x))
    return 2.0 * total / (n * (n - 1))


def _tail_transform(x, threshold):
    return np.maximum(x, threshold)


def wcrps_mc(sampler, y, threshold, n_draws=4096, seed=0) -> float:
    """Tail-weighted CRPS with indicator weight 1{t > threshold}.

    The kernel integral reduces to g(x, x') = |max(x, c) - max(x', c)|, so the
    score is E g(X, y) - E g(X, X')/2 over draws from the sampler.
    """
    if n_draws < 2:
        raise DomainError("n_draws must be >= 2")
    if not np.isfinite(threshold):
        raise DomainError("threshold must be finite")
    rng = np.random.default_rng(seed)
    x = np.asarray(sampler(n_draws, rng), dtype=float)
    zx = _tail_transform(x, threshold)
    zy = max(float(y), threshold)
    return float(np.mean(np.abs(zx - zy)) - 0.5 * pairwise_mean_abs_diff(zx))


def swcrps_mc(sampler, y, threshold, n_draws=4096, seed=0) -> tuple[float, bool]:
    """Scaled tail-weighted score; undefined (flagged False) when the
    predictive mass sits entirely below the threshold."""
    if n_draws < 2:
        raise DomainError("n_draws must be >= 2")
    rng = np.random.default_rng(seed)
    x = np.asarray(sampler(n_draws, rng), dtype=float)
    zx = _tail_transform(x, threshold)
    zy = max(float(y), threshold)
    spread = pairwise_mean_abs_diff(zx)
    if spread <= 0.0:
        return float("nan"), False
    return float(-np.mean(np.abs(zx - zy)) / spread - 0.5 * np.log(spread)), True


def cell_seed(root_seed: int, *parts) -> int:
    """Deterministic per-cell seed from a stable hash of the identifying parts."""
    text = "|".join(str(p) for p in (root_seed,) + parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


TAIL_RISE = 1.05


@dataclass
class ScoreTable:
    """Per-(model, horizon, maturity) mean scores with raw per-origin rows."""

    model_tag: str
    raw: list = field(default_factory=list)
    # raw rows: (origin, horizon, maturity, crps, scrps, wcrps, swcrps, sw_defined)

    def add(self, origin, horizon, maturity, crps, scrps, wcrps, swcrps, sw_defined):
        self.raw.append(
            (int(origin), int(horizon), int(maturity), float(crps), float(scrps),
             float(wcrps), float(swcrps), bool(sw_defined))
        )

    def summary(self) -> dict:
        cells: dict = {}
        for origin, h, m, c, s, w, sw, ok in self.raw:
            cell = cells.setdefault((h, m), {"crps": [], "scrps": [], "wcrps": [], "swcrps": [], "n_undefined": 0})
            cell["crps"].append(c)
            cell["scrps"].append(s)
            cell["wcrps"].append(w)
            if ok:
                cell["swcrps"].append(sw)
            else:
                cell["n_undefined"] += 1
        out = {}
        for key, cell in cells.items():
            out[key] = {
                "crps": float(np.mean(cell["crps"])),
                "scrps": float(np.mean(cell["scrps"])),
                "wcrps": float(np.mean(cell["wcrps"])),
                "swcrps": float(np.mean(cell["swcrps"])) if cell["swcrps"] else float("nan"),
                "n_undefined": cell["n_undefined"],
            }
        return out

    def to_csv(self) -> str:
        out = ["model,horizon,maturity,crps,scrps,wcrps,swcrps,n_undefined"]
        for (h, m), cell in sorted(self.summary().items()):
            out.append(
                f"{self.model_tag},{h},{m},{repr(cell['crps'])},{repr(cell['scrps'])},"
                f"{repr(cell['wcrps'])},{repr(cell['swcrps'])},{cell['n_undefined']}"
            )
        return "\n".join(out) + "\n"


def score_backtest(report, panel: YieldPanel, n_draws: int = 4096, seed: int = 0) -> ScoreTable:
    """Score every stored forecast; tail thresholds are a 5% rise over the
    yield observed at the forecast origin."""
    table = ScoreTable(model_tag=report.model_tag)
    if not report.rows:
        raise ValidationError("backtest report holds no forecasts")
    for origin, h, m, mean, sd, actual in report.rows:
        try:
            base = panel.yields[panel.date_index(origin), panel.maturity_index(m)]
        except ValidationError as exc:
            raise ValidationError(f"threshold base yield missing for {origin}, m={m}") from exc
        threshold = TAIL_RISE * float(base)
        crps = crps_gaussian(mean, sd, actual)
        scrps = scrps_gaussian(mean, sd, actual)
        sampler = lambda count, rng, mu=mean, s=sd: mu + s * rng.standard_normal(count)
        wseed = cell_seed(seed, report.model_tag, origin, h, m)
        wcrps = wcrps_mc(sampler, actual, threshold, n_draws=n_draws, seed=wseed)
        swcrps, ok = swcrps_mc(sampler, actual, threshold, n_draws=n_draws, seed=wseed)
        table.add(origin, h, m, crps, scrps, wcrps, swcrps if ok else float("nan"), ok)
    return table
