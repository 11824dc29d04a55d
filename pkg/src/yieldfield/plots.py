"""Figure rendering for the CLI report paths.

Each helper writes one PNG next to the delimited output and returns the path.
All figures use the Agg backend so runs are headless and deterministic.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataio import YieldPanel, month_label

_FIGSIZE = (7.0, 4.4)


def _finish(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def panel_figure(panel: YieldPanel, path) -> Path:
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    im = ax.pcolormesh(
        np.arange(panel.n_periods), panel.maturities, panel.yields.T, shading="auto", cmap="viridis"
    )
    ticks = np.linspace(0, panel.n_periods - 1, 6).astype(int)
    ax.set_xticks(ticks)
    ax.set_xticklabels([month_label(panel.dates[t]) for t in ticks], rotation=30, ha="right")
    ax.set_ylabel("maturity (months)")
    ax.set_title("zero-coupon yields (percent)")
    fig.colorbar(im, ax=ax)
    return _finish(fig, path)


def factors_figure(dates, factor_means, names, path) -> Path:
    fig, axes = plt.subplots(len(names), 1, figsize=(7.0, 2.0 * len(names)), sharex=True)
    axes = np.atleast_1d(axes)
    x = np.arange(len(dates))
    for k, (ax, name) in enumerate(zip(axes, names)):
        ax.plot(x, factor_means[:, k], lw=1.2)
        ax.set_ylabel(name)
    ticks = np.linspace(0, len(dates) - 1, 6).astype(int)
    axes[-1].set_xticks(ticks)
    axes[-1].set_xticklabels([month_label(dates[t]) for t in ticks], rotation=30, ha="right")
    axes[0].set_title("posterior factor paths")
    return _finish(fig, path)


def rmse_figure(report, path) -> Path:
    rmse = report.rmse()
    horizons = sorted({h for h, _ in rmse})
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for h in horizons:
        mats = sorted(m for hh, m in rmse if hh == h)
        ax.plot(mats, [rmse[(h, m)] for m in mats], marker="o", label=f"h={h}")
    ax.set_xlabel("maturity (months)")
    ax.set_ylabel("RMSE (percent)")
    ax.set_title(f"out-of-sample RMSE: {report.model_tag}")
    ax.legend()
    return _finish(fig, path)


def scores_figure(table, path) -> Path:
    summary = table.summary()
    horizons = sorted({h for h, _ in summary})
    fig, axes = plt.subplots(1, len(horizons), figsize=(3.2 * len(horizons), 3.6), sharey=False)
    axes = np.atleast_1d(axes)
    for ax, h in zip(axes, horizons):
        mats = sorted(m for hh, m in summary if hh == h)
        ax.bar([str(m) for m in mats], [summary[(h, m)]["crps"] for m in mats])
        ax.set_title(f"h={h}")
        ax.set_xlabel("maturity")
    axes[0].set_ylabel("CRPS")
    fig.suptitle(f"probabilistic scores: {table.model_tag}")
    return _finish(fig, path)


def correlation_figure(corr_maturity, corr_time, labels_m, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.4, 4.2))
    for ax, corr, title in ((ax1, corr_maturity, "across maturities"), (ax2, corr_time, "across time")):
        im = ax.imshow(corr, cmap="RdBu_r", vmin=-1, vmax=1, origin="lower")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    ax1.set_xticks(range(len(labels_m)))
    ax1.set_xticklabels(labels_m, rotation=90, fontsize=6)
    ax1.set_yticks(range(len(labels_m)))
    ax1.set_yticklabels(labels_m, fontsize=6)
    fig.suptitle("residual correlation heatmaps")
    return _finish(fig, path)


def variogram_figure(bins, path) -> Path:
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    d = [b[0] for b in bins if b[2] > 0]
    g = [b[1] for b in bins if b[2] > 0]
    ax.plot(d, g, marker="o", lw=1.0)
    ax.set_xlabel("distance in (month, log-maturity) space")
    ax.set_ylabel("semivariance")
    ax.set_title("empirical residual variogram")
    return _finish(fig, path)


def predictions_figure(preds: dict, origin_label: str, path) -> Path:
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for h, pred in sorted(preds.items()):
        ax.errorbar(pred.maturities, pred.mean, yerr=2 * pred.sd, marker="o", label=f"h={h}")
    ax.set_xlabel("maturity (months)")
    ax.set_ylabel("yield (percent)")
    ax.set_title(f"forecasts from {origin_label}")
    ax.legend()
    return _finish(fig, path)


def fees_figure(fee_table, path) -> Path:
    rows = fee_table.rows
    zetas = sorted({r[0] for r in rows}, reverse=True)
    models = sorted({r[2] for r in rows})
    maturities = sorted({r[1] for r in rows})
    fig, axes = plt.subplots(1, len(zetas), figsize=(3.4 * len(zetas), 3.8), sharey=True)
    axes = np.atleast_1d(axes)
    width = 0.8 / max(len(models), 1)
    for ax, z in zip(axes, zetas):
        for k, model in enumerate(models):
            vals = []
            for m in maturities:
                match = [r[3] for r in rows if r[0] == z and r[1] == m and r[2] == model]
                vals.append(match[0] if match else np.nan)
            ax.bar(np.arange(len(maturities)) + k * width, vals, width=width, label=model)
        ax.set_xticks(np.arange(len(maturities)) + 0.4 - width / 2)
        ax.set_xticklabels([str(m) for m in maturities])
        ax.set_title(f"zeta={z:g}")
        ax.set_xlabel("risky maturity")
    axes[0].set_ylabel("performance fee (% of benchmark return)")
    axes[-1].legend(fontsize=7)
    return _finish(fig, path)
