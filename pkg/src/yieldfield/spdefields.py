"""Sparse precision constructions for the residual-field variants.

Spatial variants (stationary, nonstationary, anisotropic) discretize
L^(alpha/2)(tau u) = W on the scaled time-maturity rectangle; non-integer
alpha goes through the partial-fraction rational expansion, giving
m_order + 1 independent GMRF terms whose weighted sum represents the field.
The dynamic variant discretizes du/dt + gamma (kappa^2 - Lap)^alpha u = dW_Q
on the maturity interval by backward Euler, yielding a block-tridiagonal
joint precision over all months.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_discrete_lyapunov
from scipy.special import gammaln

from .errors import DomainError
from .fem import AssembledOperators, Mesh, assemble, projection_matrix
from .gmrf import SparseSymmetric, block_diag
from .rational import best_rational_neg_power

RATIONAL_ORDER_DEFAULT = 2
_INT_TOL = 1e-12


def matern_nu(alpha: float, d: int) -> float:
    nu = alpha - d / 2.0
    if nu <= 0:
        raise DomainError(f"alpha={alpha} gives non-positive smoothness in d={d}")
    return nu


def kappa_from_range(rho: float, nu: float) -> float:
    if rho <= 0:
        raise DomainError("correlation range must be positive")
    return math.sqrt(8.0 * nu) / rho


def tau_from_sigma(sigma: float, kappa: float, alpha: float, d: int) -> float:
    """Scale parameter for a target marginal standard deviation sigma."""
    if sigma <= 0 or kappa <= 0:
        raise DomainError("sigma and kappa must be positive")
    nu = matern_nu(alpha, d)
    log_tau = (
        0.5 * (gammaln(nu) - gammaln(alpha) - (d / 2.0) * math.log(4.0 * math.pi))
        - math.log(sigma)
        - nu * math.log(kappa)
    )
    return math.exp(log_tau)


@dataclass
class TemporalDynamics:
    """One-step propagator of the dynamic field: u_{t+1} = F u_t + innovation."""

    F: np.ndarray
    innov_cov: np.ndarray
    stationary_cov: np.ndarray
    n_space: int
    n_time: int


@dataclass
class FieldRepresentation:
    """Latent GMRF representation of one residual-field variant."""

    variant: str
    precision: SparseSymmetric
    n_vertices: int
    term_weights: np.ndarray
    mesh: Mesh | None = None
    ops: AssembledOperators | None = None
    temporal: TemporalDynamics | None = None
    alpha: float = 2.0

    @property
    def n_latent(self) -> int:
        return self.precision.n

    @property
    def n_terms(self) -> int:
        return self.term_weights.size

    def expand_projection(self, proj: sp.spmatrix) -> sp.csr_matrix:
        """Map vertex-level evaluation rows to the stacked multi-term latent."""
        if self.temporal is not None:
            raise DomainError("use spacetime rows for the dynamic variant")
        return sp.hstack([w * proj for w in self.term_weights], format="csr")

    def project_points(self, points_scaled) -> sp.csr_matrix:
        return self.expand_projection(projection_matrix(self.mesh, points_scaled))

    def project_spacetime(self, t_indices, maturity_scaled) -> sp.csr_matrix:
        """Rows evaluating the dynamic field at (month t, scaled maturity) pairs.

        t_indices are 1-based months; each row lands in that month's block.
        """
        if self.temporal is None:
            raise DomainError("spacetime rows only exist for the dynamic variant")
        t_idx = np.asarray(t_indices, dtype=int)
        if np.any(t_idx < 1) or np.any(t_idx > self.temporal.n_time):
            raise DomainError("time index outside the represented window")
        rows1d = projection_matrix(self.mesh, np.asarray(maturity_scaled, dtype=float)[:, None])
        rows1d = rows1d.tocoo()
        n_m = self.temporal.n_space
        cols = rows1d.col + (t_idx[rows1d.row] - 1) * n_m
        return sp.coo_matrix(
            (rows1d.data, (rows1d.row, cols)), shape=(t_idx.size, self.n_latent)
        ).tocsr()


def _integer_spatial_precision(ops: AssembledOperators, kappa: float, alpha: int):
    C, G, Cl = ops.C, ops.G, ops.C_lumped
    if alpha == 1:
        return (kappa**2) * C + G
    GclG = G @ sp.diags(1.0 / Cl) @ G
    return (kappa**4) * C + (2.0 * kappa**2) * G + GclG


def stationary_precision(
    ops: AssembledOperators,
    kappa: float,
    tau: float,
    alpha: float = 2.0,
    m_order: int = RATIONAL_ORDER_DEFAULT,
    mesh: Mesh | None = None,
    variant: str = "stationary",
) -> FieldRepresentation:
    """Whittle-Matern precision tau^2 (kappa^2 C + G) (alpha=1) or the alpha=2 form."""
    if kappa <= 0 or tau <= 0:
        raise DomainError("kappa and tau must be positive")
    if abs(alpha - round(alpha)) > _INT_TOL and alpha > 1:
        return rational_precision(ops, kappa, tau, alpha, m_order=m_order, mesh=mesh, variant=variant)
    alpha_i = int(round(alpha))
    if alpha_i not in (1, 2):
        raise DomainError(f"integer path supports alpha in {{1, 2}}, got {alpha}")
    Q = (tau**2) * _integer_spatial_precision(ops, kappa, alpha_i)
    return FieldRepresentation(
        variant=variant,
        precision=SparseSymmetric(Q),
        n_vertices=ops.n,
        term_weights=np.array([1.0]),
        mesh=mesh,
        ops=ops,
        alpha=float(alpha),
    )


def _gershgorin_max(op_csr: sp.csr_matrix) -> float:
    return float(np.max(np.abs(op_csr).sum(axis=1)))


def operator_max_eig(ops: AssembledOperators) -> float:
    """Largest eigenvalue of C_lumped^{-1} G, computed once per assembly."""
    cached = getattr(ops, "_lam_max_G", None)
    if cached is not None:
        return cached
    isq = sp.diags(1.0 / np.sqrt(ops.C_lumped))
    sym = (isq @ ops.G @ isq).tocsr()
    try:
        from scipy.sparse.linalg import eigsh

        lam = float(eigsh(sym, k=1, which="LA", return_eigenvectors=False, tol=1e-6)[0])
    except Exception:
        lam = _gershgorin_max(sym)
    ops._lam_max_G = lam
    return lam


_SPECTRAL_TAIL_TOL = 0.01


def _spectral_cap(lam_min: float, lam_max_fem: float, nu: float) -> float:
    """Upper end of the rational-fit interval.

    Modes above ratio * lam_min carry less than _SPECTRAL_TAIL_TOL of the
    covariance mass (tail fraction ~ ratio^{-nu}), so the fit concentrates
    where the spectrum matters; beyond the cap the expansion extrapolates and
    every block stays positive definite because the poles are negative.
    """
    ratio = max(50.0, _SPECTRAL_TAIL_TOL ** (-1.0 / nu))
    return min(lam_max_fem, ratio * lam_min)


def _build_rational(P_low, P_high, lam_min, lam_max, frac, m_order):
    """Blocks Q_k and weights w_k so that sum_k w_k^2 Q_k^{-1} = L^{-alpha} C_l^{-1}."""
    expansion = best_rational_neg_power(frac, lam_min / lam_max, 1.0, degree=m_order)
    scale = lam_max ** (-frac)
    blocks = [SparseSymmetric(P_low)]
    weights = [math.sqrt(expansion.offset * scale)]
    for pole, res in zip(expansion.poles, expansion.residues):
        blocks.append(SparseSymmetric(P_high / lam_max - pole * P_low))
        weights.append(math.sqrt(res * scale))
    return blocks, np.asarray(weights), expansion


def rational_precision(
    ops: AssembledOperators,
    kappa: float,
    tau: float,
    alpha: float,
    m_order: int = RATIONAL_ORDER_DEFAULT,
    mesh: Mesh | None = None,
    variant: str = "stationary",
) -> FieldRepresentation:
    """Fractional-alpha field as m_order + 1 GMRF terms with partial-fraction weights."""
    if abs(alpha - round(alpha)) <= _INT_TOL:
        return stationary_precision(ops, kappa, tau, int(round(alpha)), mesh=mesh, variant=variant)
    if not (1.0 < alpha < 3.0):
        raise DomainError(f"fractional path supports alpha in (1, 3), got {alpha}")
    if m_order < 1:
        raise DomainError("m_order must be >= 1")
    if kappa <= 0 or tau <= 0:
        raise DomainError("kappa and tau must be positive")
    Cl = sp.diags(ops.C_lumped)
    Cl_inv = sp.diags(1.0 / ops.C_lumped)
    K = (kappa**2) * Cl + ops.G
    low = int(math.floor(alpha))
    frac = alpha - low
    # powers of the lumped operator: P_j = C_l (C_l^{-1} K)^j
    P = [Cl.tocsc(), K.tocsc()]
    for _ in range(2, low + 2):
        P.append((P[-1] @ Cl_inv @ K).tocsc())
    lam_min = kappa**2
    nu = alpha - ops.dim / 2.0
    lam_max = _spectral_cap(lam_min, kappa**2 + operator_max_eig(ops), nu)
    blocks, weights, _ = _build_rational(P[low], P[low + 1], lam_min, lam_max, frac, m_order)
    # tau^2 lives in the precision blocks, matching the integer-path convention
    return FieldRepresentation(
        variant=variant,
        precision=block_diag([b * tau**2 for b in blocks]),
        n_vertices=ops.n,
        term_weights=weights,
        mesh=mesh,
        ops=ops,
        alpha=float(alpha),
    )


_RANGE_RATIO_WARN = 1e3


def nonstationary_precision(
    mesh: Mesh,
    gamma: np.ndarray,
    alpha: float = 2.0,
    m_order: int = RATIONAL_ORDER_DEFAULT,
) -> FieldRepresentation:
    """Log-linear range and sd surfaces: log rho = g0 + g2 t + g4 m, log sigma = g1 + g3 t + g5 m.

    kappa^2 enters through element-centroid-weighted mass matrices and the
    sd surface through the symmetric vertex scaling D_tau Q D_tau.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (6,):
        raise DomainError("nonstationary model needs six coefficients")
    if not np.all(np.isfinite(gamma)):
        raise DomainError("nonstationary coefficients must be finite")
    nu = matern_nu(alpha, d=2)

    cent = mesh.vertices[mesh.elements].mean(axis=1)
    log_rho_e = gamma[0] + gamma[2] * cent[:, 0] + gamma[4] * cent[:, 1]
    if log_rho_e.max() - log_rho_e.min() > math.log(_RANGE_RATIO_WARN):
        warnings.warn("correlation range varies by more than 1000x across the domain")
    kappa2_e = 8.0 * nu * np.exp(-2.0 * log_rho_e)

    vx = mesh.vertices
    log_rho_v = gamma[0] + gamma[2] * vx[:, 0] + gamma[4] * vx[:, 1]
    log_sigma_v = gamma[1] + gamma[3] * vx[:, 0] + gamma[5] * vx[:, 1]
    log_kappa_v = 0.5 * math.log(8.0 * nu) - log_rho_v
    log_tau_v = (
        0.5 * (gammaln(nu) - gammaln(alpha) - math.log(4.0 * math.pi))
        - log_sigma_v
        - nu * log_kappa_v
    )
    D_tau = sp.diags(np.exp(log_tau_v))

    ops = assemble(mesh)
    C_k2 = assemble(mesh, mass_weights=kappa2_e).C

    integer = abs(alpha - round(alpha)) <= _INT_TOL
    if integer and int(round(alpha)) == 1:
        blocks = [SparseSymmetric(D_tau @ (C_k2 + ops.G) @ D_tau)]
        weights = np.array([1.0])
    elif integer and int(round(alpha)) == 2:
        C_k4 = assemble(mesh, mass_weights=kappa2_e**2).C
        G_k2 = assemble(mesh, stiffness_weights=kappa2_e).G
        GclG = ops.G @ sp.diags(1.0 / ops.C_lumped) @ ops.G
        blocks = [SparseSymmetric(D_tau @ (C_k4 + 2.0 * G_k2 + GclG) @ D_tau)]
        weights = np.array([1.0])
    elif integer:
        raise DomainError(f"integer path supports alpha in {{1, 2}}, got {alpha}")
    else:
        if not (1.0 < alpha < 3.0):
            raise DomainError(f"fractional path supports alpha in (1, 3), got {alpha}")
        Cl = sp.diags(ops.C_lumped)
        Cl_inv = sp.diags(1.0 / ops.C_lumped)
        # lump the kappa^2-weighted mass so operator powers stay sparse;
        # constant coefficients then reduce exactly to the stationary path
        Dk2 = sp.diags(np.asarray(C_k2.sum(axis=1)).ravel())
        K = (Dk2 + ops.G).tocsc()
        low = int(math.floor(alpha))
        frac = alpha - low
        P = [Cl.tocsc(), K]
        for _ in range(2, low + 2):
            P.append((P[-1] @ Cl_inv @ K).tocsc())
        # Rayleigh bound: eigenvalues of Cl^{-1}(Dk2 + G) are at least min(Dk2/Cl)
        ratios = Dk2.diagonal() / ops.C_lumped
        lam_min = float(ratios.min())
        lam_max = _spectral_cap(
            lam_min, float(ratios.max()) + operator_max_eig(ops), alpha - 1.0
        )
        raw_blocks, weights, _ = _build_rational(P[low], P[low + 1], lam_min, lam_max, frac, m_order)
        blocks = [SparseSymmetric(D_tau @ b.mat @ D_tau) for b in raw_blocks]
    return FieldRepresentation(
        variant="nonstationary",
        precision=block_diag(blocks),
        n_vertices=ops.n,
        term_weights=np.asarray(weights, dtype=float),
        mesh=mesh,
        ops=ops,
        alpha=float(alpha),
    )


def anisotropy_matrix(log_ratio: float, angle: float) -> np.ndarray:
    """Unit-determinant H = R diag(e^{2u}, e^{-2u}) R^T for u = log_ratio, R = R(angle)."""
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([math.exp(2.0 * log_ratio), math.exp(-2.0 * log_ratio)]) @ R.T


def anisotropic_precision(
    mesh: Mesh,
    kappa: float,
    tau: float,
    alpha: float = 2.0,
    log_ratio: float = 0.0,
    angle: float = 0.0,
    H: np.ndarray | None = None,
    m_order: int = RATIONAL_ORDER_DEFAULT,
) -> FieldRepresentation:
    """Stationary field with the Laplacian deformed by a unit-determinant SPD H."""
    if H is None:
        H = anisotropy_matrix(log_ratio, angle)
    ops_h = assemble(mesh, H=H)
    if abs(alpha - round(alpha)) <= _INT_TOL:
        return stationary_precision(ops_h, kappa, tau, int(round(alpha)), mesh=mesh, variant="anisotropic")
    return rational_precision(ops_h, kappa, tau, alpha, m_order=m_order, mesh=mesh, variant="anisotropic")


def spatiotemporal_precision(
    ops1d: AssembledOperators,
    n_time: int,
    kappa: float,
    gamma_t: float,
    sigma_noise: float,
    alpha: int = 1,
    dt: float = 1.0,
    mesh: Mesh | None = None,
) -> FieldRepresentation:
    """Backward-Euler discretization of the dynamic maturity-field equation.

    Per step: (C + dt S) u_{t+1} = C u_t + w,  w ~ N(0, Q_w^{-1}) with
    S = gamma_t K_alpha and Q_w = (kappa^2 C + G)/(sigma^2 dt); u_1 starts at
    the stationary marginal of the chain. Blocks stay sparse because every
    block is a product of banded 1-D matrices.
    """
    if gamma_t <= 0 or kappa <= 0:
        raise DomainError("gamma_t and kappa must be positive")
    if sigma_noise <= 0:
        raise DomainError("sigma_noise must be positive")
    if alpha not in (1, 2):
        raise DomainError("dynamic variant supports integer alpha in {1, 2}")
    if n_time < 1:
        raise DomainError("n_time must be >= 1")
    C = ops1d.C.tocsc()
    n_m = C.shape[0]
    K1 = ((kappa**2) * C + ops1d.G).tocsc()
    K_alpha = K1 if alpha == 1 else _integer_spatial_precision(ops1d, kappa, 2).tocsc()
    S = gamma_t * K_alpha
    B = (C + dt * S).tocsc()
    Qw = (K1 / (sigma_noise**2 * dt)).tocsc()

    B_d = B.toarray()
    C_d = C.toarray()
    F = np.linalg.solve(B_d, C_d)
    B_inv = np.linalg.inv(B_d)
    innov_cov = B_inv @ np.linalg.inv(Qw.toarray()) @ B_inv.T
    stat_cov = solve_discrete_lyapunov(F, innov_cov)
    stat_cov = 0.5 * (stat_cov + stat_cov.T)
    Q_stat = np.linalg.inv(stat_cov)
    Q_stat = 0.5 * (Q_stat + Q_stat.T)

    BQwB = (B @ Qw @ B).tocoo()
    CQwC = (C @ Qw @ C).tocoo()
    CQwB = (C @ Qw @ B).tocoo()

    rows, cols, vals = [], [], []

    def put(block, t_row, t_col):
        rows.append(block.row + t_row * n_m)
        cols.append(block.col + t_col * n_m)
        vals.append(block.data)

    stat_coo = sp.coo_matrix(Q_stat)
    put(stat_coo, 0, 0)
    for t in range(n_time - 1):
        put(BQwB, t + 1, t + 1)
        put(CQwC, t, t)
        neg = sp.coo_matrix(-CQwB)
        put(neg, t, t + 1)
        put(sp.coo_matrix(-CQwB.T), t + 1, t)
    n = n_m * n_time
    Q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsc()
    return FieldRepresentation(
        variant="spatiotemporal",
        precision=SparseSymmetric(Q),
        n_vertices=n_m,
        term_weights=np.array([1.0]),
        mesh=mesh,
        ops=ops1d,
        temporal=TemporalDynamics(
            F=F, innov_cov=innov_cov, stationary_cov=stat_cov, n_space=n_m, n_time=n_time
        ),
        alpha=float(alpha),
    )
