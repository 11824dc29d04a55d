"""Synthetic panel generators used by the recovery tests and demos."""

from __future__ import annotations

import numpy as np

from .dataio import YieldPanel, month_add
from .fem import CoordMap, assemble, build_mesh_1d, projection_matrix
from .nsbasis import observation_matrix
from .spdefields import kappa_from_range, spatiotemporal_precision


def simulate_ar1(n, mu, phi, sigma, rng):
    x = np.empty(n)
    x[0] = mu + sigma / np.sqrt(1.0 - phi**2) * rng.standard_normal()
    for t in range(1, n):
        x[t] = mu + phi * (x[t - 1] - mu) + sigma * rng.standard_normal()
    return x


DEFAULT_FACTORS = (
    {"mu": 7.5, "phi": 0.97, "sigma": 0.25},   # level
    {"mu": -1.5, "phi": 0.93, "sigma": 0.30},  # slope
    {"mu": 0.5, "phi": 0.85, "sigma": 0.40},   # curvature
)


def simulate_dns_panel(
    T=120,
    maturities=(3, 6, 9, 12, 15, 18, 21, 24, 30, 36, 48, 60, 72, 84, 96, 108, 120),
    lam=0.0609,
    factors=DEFAULT_FACTORS,
    sigma_e=0.10,
    seed=0,
    start=198501,
):
    """DNS panel with iid measurement noise; returns (panel, factor paths)."""
    rng = np.random.default_rng(seed)
    maturities = np.asarray(maturities, dtype=int)
    paths = np.column_stack(
        [simulate_ar1(T, f["mu"], f["phi"], f["sigma"], rng) for f in factors]
    )
    L = observation_matrix(lam, maturities).matrix
    grid = paths @ L.T + sigma_e * rng.standard_normal((T, maturities.size))
    grid = np.maximum(grid, 0.01)
    dates = np.array([month_add(start, k) for k in range(T)])
    return YieldPanel(dates=dates, maturities=maturities, yields=grid), paths


def simulate_spatiotemporal_panel(
    T=120,
    maturities=(3, 6, 9, 12, 15, 18, 21, 24, 30, 36, 48, 60, 72, 84, 96, 108, 120),
    lam=0.068,
    factors=DEFAULT_FACTORS,
    sigma_e=0.05,
    field_range=0.5,
    field_sigma=0.25,
    gamma_t=0.3,
    alpha=1,
    mesh_factor=2.0,
    seed=0,
    start=198501,
):
    """DNS trend plus a dynamic maturity-field residual simulated exactly from
    its one-step propagator; returns (panel, factors, field values at data)."""
    rng = np.random.default_rng(seed)
    maturities = np.asarray(maturities, dtype=int)
    M = maturities.size
    paths = np.column_stack(
        [simulate_ar1(T, f["mu"], f["phi"], f["sigma"], rng) for f in factors]
    )
    L = observation_matrix(lam, maturities).matrix

    cmap = CoordMap.for_window(T, maturities)
    m_scaled = cmap.scaled_maturity(maturities.astype(float))
    spacing = np.median(np.diff(m_scaled))
    mesh = build_mesh_1d((0.0, 1.0), resolution=spacing / mesh_factor, extension=0.2)
    ops = assemble(mesh)
    kappa = kappa_from_range(field_range, alpha - 0.5)
    rep = spatiotemporal_precision(
        ops, T, kappa=kappa, gamma_t=gamma_t, sigma_noise=field_sigma, alpha=alpha, mesh=mesh
    )
    dyn = rep.temporal
    chol_stat = np.linalg.cholesky(dyn.stationary_cov)
    chol_inn = np.linalg.cholesky(
        dyn.innov_cov + 1e-14 * np.eye(dyn.n_space) * dyn.innov_cov.max()
    )
    u = np.empty((T, dyn.n_space))
    u[0] = chol_stat @ rng.standard_normal(dyn.n_space)
    for t in range(1, T):
        u[t] = dyn.F @ u[t - 1] + chol_inn @ rng.standard_normal(dyn.n_space)
    P = projection_matrix(mesh, m_scaled[:, None]).toarray()
    field_at_data = u @ P.T

    grid = paths @ L.T + field_at_data + sigma_e * rng.standard_normal((T, M))
    grid = np.maximum(grid, 0.01)
    dates = np.array([month_add(start, k) for k in range(T)])
    return YieldPanel(dates=dates, maturities=maturities, yields=grid), paths, field_at_data
