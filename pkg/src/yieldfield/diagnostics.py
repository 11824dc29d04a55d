"""Residual extraction and dependence diagnostics.

Cross-maturity and cross-time correlation matrices, the empirical variogram
in (month, log-maturity) coordinates, Moran's I / Geary's C with a
row-standardized adjacent-maturity weight matrix, and lag-1 autocorrelation,
with averaged-over-time wrappers and permutation p-values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import YieldPanel
from .errors import DomainError, ValidationError

RESIDUAL_DEFINITIONS = ("vs-trend", "vs-full-latent")


@dataclass
class ResidualField:
    """T x M residual grid with its diagnostic coordinates."""

    values: np.ndarray
    time_index: np.ndarray      # 1..T
    log_maturity: np.ndarray    # log(months)
    model_tag: str
    definition: str

    def __post_init__(self):
        if self.values.shape != (self.time_index.size, self.log_maturity.size):
            raise ValidationError("residual grid shape mismatch")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("residuals must be finite")


def extract_residuals(fit, panel: YieldPanel, definition: str = "vs-trend") -> ResidualField:
    """vs-trend: y - A(lambda) E[beta]; vs-full-latent also removes E[u]."""
    if definition not in RESIDUAL_DEFINITIONS:
        raise ValidationError(f"unknown residual definition {definition!r}")
    ctx = fit.ctx
    if ctx.T != panel.n_periods or ctx.M != panel.n_maturities:
        raise ValidationError("fit does not cover this panel window")
    from .nsbasis import observation_matrix

    L = observation_matrix(fit.lambda_hat, panel.maturities.astype(float)).matrix[:, ctx.factor_cols]
    trend = fit.factor_means @ L.T
    resid = panel.yields - trend
    if definition == "vs-full-latent":
        if "field" in fit.slices and fit.field_rep is not None:
            rep = fit.field_rep
            A_field = (
                ctx.proj_field
                if rep.temporal is not None
                else rep.expand_projection(ctx.proj_field)
            )
            # rows follow the same month-major layout as the panel
            u_mean = A_field @ fit.posterior.mean[fit.slices["field"]]
            resid = resid - u_mean.reshape(panel.n_periods, panel.n_maturities)
    return ResidualField(
        values=resid,
        time_index=np.arange(1, panel.n_periods + 1),
        log_maturity=np.log(panel.maturities.astype(float)),
        model_tag=fit.spec.tag,
        definition=definition,
    )


def correlation_matrices(res: ResidualField) -> tuple[np.ndarray, np.ndarray]:
    """(M x M cross-maturity, T x T cross-time) Pearson correlations."""
    T, M = res.values.shape
    if T < 3 or M < 3:
        raise DomainError("need at least 3 periods and 3 maturities")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr_m = np.corrcoef(res.values, rowvar=False)
        corr_t = np.corrcoef(res.values, rowvar=True)
    return corr_m, corr_t


def mean_abs_offdiag(corr: np.ndarray) -> float:
    n = corr.shape[0]
    mask = ~np.eye(n, dtype=bool)
    vals = np.abs(corr[mask])
    return float(np.nanmean(vals))


def empirical_variogram(
    res: ResidualField,
    n_bins: int = 15,
    max_dist: float | None = None,
    max_pairs: int = 1_000_000,
    seed: int = 0,
):
    """Binned semivariogram over Euclidean distance in (month, log-maturity)."""
    if n_bins < 2:
        raise DomainError("n_bins must be >= 2")
    T, M = res.values.shape
    tt, mm = np.meshgrid(res.time_index.astype(float), res.log_maturity, indexing="ij")
    coords = np.column_stack([tt.ravel(), mm.ravel()])
    vals = res.values.ravel()
    n = vals.size
    n_pairs_total = n * (n - 1) // 2
    rng = np.random.default_rng(seed)
    if n_pairs_total > max_pairs:
        i = rng.integers(0, n, size=2 * max_pairs)
        j = rng.integers(0, n, size=2 * max_pairs)
        keep = i < j
        i, j = i[keep][:max_pairs], j[keep][:max_pairs]
    else:
        i, j = np.triu_indices(n, k=1)
    d = np.linalg.norm(coords[i] - coords[j], axis=1)
    sq = 0.5 * (vals[i] - vals[j]) ** 2
    top = float(max_dist) if max_dist is not None else float(d.max()) * 0.6
    edges = np.linspace(0.0, top, n_bins + 1)
    out = []
    for b in range(n_bins):
        sel = (d > edges[b]) & (d <= edges[b + 1])
        count = int(sel.sum())
        gamma = float(sq[sel].mean()) if count else float("nan")
        out.append(((edges[b] + edges[b + 1]) / 2.0, gamma, count))
    return out


def adjacency_weights(n: int, row_standardize: bool = True) -> np.ndarray:
    """First-order adjacency on an ordered grid, zero diagonal."""
    W = np.zeros((n, n))
    idx = np.arange(n - 1)
    W[idx, idx + 1] = 1.0
    W[idx + 1, idx] = 1.0
    if row_standardize:
        W = W / W.sum(axis=1, keepdims=True)
    return W


def _check_slice(values, W):
    values = np.asarray(values, dtype=float)
    if values.size < 3:
        raise DomainError("need at least 3 locations")
    if W.shape != (values.size, values.size):
        raise DomainError("weight matrix shape mismatch")
    if np.any(W < 0) or np.any(np.diag(W) != 0):
        raise DomainError("weights must be nonnegative with a zero diagonal")
    return values


def morans_i(values, W) -> float:
    values = _check_slice(values, W)
    z = values - values.mean()
    denom = float(z @ z)
    if denom == 0.0:
        return float("nan")
    s0 = float(W.sum())
    return float(values.size / s0 * (z @ W @ z) / denom)


def gearys_c(values, W) -> float:
    values = _check_slice(values, W)
    z = values - values.mean()
    denom = float(z @ z)
    if denom == 0.0:
        return float("nan")
    s0 = float(W.sum())
    diff2 = (values[:, None] - values[None, :]) ** 2
    return float((values.size - 1) / (2.0 * s0) * float(np.sum(W * diff2)) / denom)


def permutation_pvalue(stat_fn, values, W, n_perm: int = 999, seed: int = 0) -> float:
    """Two-sided permutation p-value for a spatial statistic."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    observed = stat_fn(values, W)
    if not np.isfinite(observed):
        return float("nan")
    draws = np.empty(n_perm)
    for k in range(n_perm):
        draws[k] = stat_fn(rng.permutation(values), W)
    center = draws.mean()
    p = (np.sum(np.abs(draws - center) >= abs(observed - center)) + 1.0) / (n_perm + 1.0)
    return float(p)


def average_over_time(res: ResidualField, stat_fn, W=None, p_values: bool = False, seed: int = 0):
    """Apply a cross-maturity statistic to every month and average."""
    T, M = res.values.shape
    W = adjacency_weights(M) if W is None else W
    stats = np.array([stat_fn(res.values[t], W) for t in range(T)])
    out = {
        "mean": float(np.nanmean(stats)),
        "sd": float(np.nanstd(stats, ddof=1)),
    }
    if p_values:
        pv = np.array(
            [permutation_pvalue(stat_fn, res.values[t], W, seed=seed + t) for t in range(T)]
        )
        out["share_significant"] = float(np.nanmean(pv < 0.05))
    return out


def acf1(res: ResidualField) -> float:
    """Lag-1 autocorrelation per maturity column, averaged across maturities."""
    T, M = res.values.shape
    if T < 3:
        raise DomainError("need at least 3 periods")
    vals = []
    for j in range(M):
        x = res.values[:, j]
        x = x - x.mean()
        denom = float(x @ x)
        if denom == 0.0:
            continue
        vals.append(float(x[1:] @ x[:-1]) / denom)
    if not vals:
        return float("nan")
    return float(np.mean(vals))


@dataclass
class DiagnosticsSummary:
    """Table-4-shaped residual dependence summary."""

    model_tag: str
    abs_corr: float
    morans_i_mean: float
    morans_i_sd: float
    gearys_c_mean: float
    acf1: float
    share_significant: float | None = None

    def to_csv(self) -> str:
        header = "model,abs_corr,morans_i,gearys_c,acf1"
        row = (
            f"{self.model_tag},{repr(self.abs_corr)},{repr(self.morans_i_mean)},"
            f"{repr(self.gearys_c_mean)},{repr(self.acf1)}"
        )
        return header + "\n" + row + "\n"


def summarize_residuals(res: ResidualField, p_values: bool = False, seed: int = 0) -> DiagnosticsSummary:
    corr_m, _ = correlation_matrices(res)
    mi = average_over_time(res, morans_i, p_values=p_values, seed=seed)
    gc = average_over_time(res, gearys_c)
    return DiagnosticsSummary(
        model_tag=res.model_tag,
        abs_corr=mean_abs_offdiag(corr_m),
        morans_i_mean=mi["mean"],
        morans_i_sd=mi["sd"],
        gearys_c_mean=gc["mean"],
        acf1=acf1(res),
        share_significant=mi.get("share_significant"),
    )
