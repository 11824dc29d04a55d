import math

import numpy as np
import pytest
import scipy.sparse as sp

from oracles import matern_correlation
from yieldfield.errors import DomainError
from yieldfield.fem import AssembledOperators, assemble, build_mesh_1d, build_mesh_2d
from yieldfield.gmrf import SparseFactor, ar1_precision
from yieldfield.rational import best_rational_neg_power, interpolate_rational
from yieldfield.spdefields import (
    anisotropic_precision,
    anisotropy_matrix,
    kappa_from_range,
    nonstationary_precision,
    rational_precision,
    spatiotemporal_precision,
    stationary_precision,
    tau_from_sigma,
)


def field_covariance(rep):
    """Dense covariance of the represented field at mesh vertices."""
    cov = np.linalg.inv(rep.precision.to_dense())
    nv = rep.n_vertices
    w = rep.term_weights
    out = np.zeros((nv, nv))
    for k in range(rep.n_terms):
        out += w[k] ** 2 * cov[k * nv : (k + 1) * nv, k * nv : (k + 1) * nv]
    return out


class TestRationalApproximation:
    def test_interpolation_hits_the_nodes(self):
        nodes = np.linspace(0.2, 1.0, 5)
        f = nodes**-0.4
        r = interpolate_rational(nodes, f)
        assert np.max(np.abs(r(nodes) - f)) < 1e-12

    @pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
    def test_partial_fractions_reproduce_and_are_admissible(self, s):
        exp = best_rational_neg_power(s, 1e-4, 1.0, degree=2)
        x = np.exp(np.linspace(np.log(1e-4), 0.0, 500))
        assert np.all(exp.poles < 0)
        assert np.all(exp.residues > 0)
        assert exp.offset >= 0
        rel = np.abs(exp(x) - x**-s) / x**-s
        assert rel.max() < 0.10
        assert rel.max() == pytest.approx(exp.sup_rel_error, rel=0.3)

    def test_narrow_interval_is_accurate(self):
        exp = best_rational_neg_power(0.5, 1e-2, 1.0, degree=2)
        x = np.exp(np.linspace(np.log(1e-2), 0.0, 500))
        assert np.max(np.abs(exp(x) - x**-0.5) / x**-0.5) < 0.01

    def test_bad_exponent_rejected(self):
        from yieldfield.errors import ApproximationError

        with pytest.raises(ApproximationError):
            best_rational_neg_power(1.5, 0.01, 1.0)


@pytest.fixture(scope="module")
def plane_setup():
    nu = 1.0
    rho = 0.35
    kappa = kappa_from_range(rho, nu)
    sigma = 0.7
    tau = tau_from_sigma(sigma, kappa, 2.0, d=2)
    mesh = build_mesh_2d((0, 1), (0, 1), resolution=rho / 9, extension=0.35)
    return mesh, assemble(mesh), kappa, tau, sigma, rho


class TestStationary:
    def test_marginal_variance_matches_sigma_link(self, plane_setup):
        mesh, ops, kappa, tau, sigma, rho = plane_setup
        rep = stationary_precision(ops, kappa, tau, 2.0, mesh=mesh)
        cov = np.linalg.inv(rep.precision.to_dense())
        center = np.argmin(np.abs(mesh.vertices - 0.5).sum(axis=1))
        assert cov[center, center] == pytest.approx(sigma**2, rel=0.05)

    def test_correlation_at_range_is_near_matern_value(self, plane_setup):
        mesh, ops, kappa, tau, sigma, rho = plane_setup
        rep = stationary_precision(ops, kappa, tau, 2.0, mesh=mesh)
        cov = np.linalg.inv(rep.precision.to_dense())
        center = np.argmin(np.abs(mesh.vertices - 0.5).sum(axis=1))
        d = np.linalg.norm(mesh.vertices - mesh.vertices[center], axis=1)
        sel = np.abs(d - rho) < 0.02
        corr = cov[center, sel] / np.sqrt(cov[center, center] * np.diag(cov)[sel])
        target = matern_correlation([rho], kappa, 1.0)[0]  # about 0.14
        assert abs(corr.mean() - target) < 0.03
        assert abs(target - 0.13) < 0.02

    def test_large_kappa_kills_long_range_correlation(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.05, extension=0.2)
        ops = assemble(mesh)
        kappa = 60.0
        rep = stationary_precision(ops, kappa, tau_from_sigma(1.0, kappa, 2.0, 2), 2.0, mesh=mesh)
        cov = np.linalg.inv(rep.precision.to_dense())
        center = np.argmin(np.abs(mesh.vertices - 0.5).sum(axis=1))
        d = np.linalg.norm(mesh.vertices - mesh.vertices[center], axis=1)
        far = d > 20.0 / kappa
        corr = np.abs(cov[center, far]) / np.sqrt(cov[center, center] * np.diag(cov)[far])
        assert corr.max() < 1e-3

    def test_alpha_one_form(self, plane_setup):
        mesh, ops, kappa, tau, *_ = plane_setup
        rep = stationary_precision(ops, kappa, tau, 1.0, mesh=mesh)
        expected = (tau**2) * ((kappa**2) * ops.C + ops.G)
        assert abs((rep.precision.mat - expected)).max() < 1e-12


@pytest.fixture(scope="module")
def line_setup():
    alpha = 1.5
    nu = alpha - 0.5
    rho = 0.3
    kappa = kappa_from_range(rho, nu)
    sigma = 1.3
    tau = tau_from_sigma(sigma, kappa, alpha, d=1)
    mesh = build_mesh_1d((0, 1), resolution=rho / 32, extension=1.0)
    return mesh, assemble(mesh), kappa, tau, sigma, alpha


class TestRationalField:
    def test_integer_alpha_delegates_exactly(self, line_setup):
        mesh, ops, kappa, tau, *_ = line_setup
        a = rational_precision(ops, kappa, tau, 2.0, mesh=mesh)
        b = stationary_precision(ops, kappa, tau, 2.0, mesh=mesh)
        diff = (a.precision.mat - b.precision.mat)
        assert diff.nnz == 0 or np.abs(diff.data).max() < 1e-10

    def test_fractional_covariance_matches_matern(self, line_setup):
        mesh, ops, kappa, tau, sigma, alpha = line_setup
        rep = rational_precision(ops, kappa, tau, alpha, m_order=2, mesh=mesh)
        covf = field_covariance(rep)
        x = mesh.vertices[:, 0]
        i0 = int(np.argmin(np.abs(x - 0.5)))
        dist = np.abs(x - x[i0])
        target = sigma**2 * matern_correlation(dist, kappa, alpha - 0.5)
        sel = (dist >= 0.5 / kappa) & (dist <= 3.0 / kappa)
        rel = np.abs(covf[i0, sel] - target[sel]) / np.abs(target[sel])
        assert rel.max() < 0.02

    def test_wider_band_within_five_percent(self, line_setup):
        mesh, ops, kappa, tau, sigma, alpha = line_setup
        rep = rational_precision(ops, kappa, tau, alpha, m_order=2, mesh=mesh)
        covf = field_covariance(rep)
        x = mesh.vertices[:, 0]
        i0 = int(np.argmin(np.abs(x - 0.5)))
        dist = np.abs(x - x[i0])
        target = sigma**2 * matern_correlation(dist, kappa, alpha - 0.5)
        sel = (dist >= 0.25 / kappa) & (dist <= 4.0 / kappa)
        rel = np.abs(covf[i0, sel] - target[sel]) / np.abs(target[sel])
        assert rel.max() < 0.05

    def test_higher_order_does_not_increase_error(self, line_setup):
        mesh, ops, kappa, tau, sigma, alpha = line_setup
        x = mesh.vertices[:, 0]
        i0 = int(np.argmin(np.abs(x - 0.5)))
        dist = np.abs(x - x[i0])
        target = sigma**2 * matern_correlation(dist, kappa, alpha - 0.5)
        sel = (dist >= 0.5 / kappa) & (dist <= 3.0 / kappa)
        errs = []
        for m_order in (1, 2):
            rep = rational_precision(ops, kappa, tau, alpha, m_order=m_order, mesh=mesh)
            covf = field_covariance(rep)
            errs.append(np.max(np.abs(covf[i0, sel] - target[sel]) / np.abs(target[sel])))
        assert errs[1] <= errs[0] + 1e-12

    def test_term_count_is_order_plus_one(self, line_setup):
        mesh, ops, kappa, tau, sigma, alpha = line_setup
        rep = rational_precision(ops, kappa, tau, alpha, m_order=2, mesh=mesh)
        assert rep.n_terms == 3
        assert rep.n_latent == 3 * rep.n_vertices

    def test_alpha_domain_guard(self, line_setup):
        _, ops, kappa, tau, *_ = line_setup
        with pytest.raises(DomainError):
            rational_precision(ops, kappa, tau, 0.7)


@pytest.fixture(scope="module")
def coarse_mesh():
    return build_mesh_2d((0, 1), (0, 1), resolution=0.07, extension=0.25)


class TestNonstationary:
    def test_constant_coefficients_reduce_to_stationary(self, coarse_mesh):
        rho, sigma = 0.3, 0.8
        gam = np.array([math.log(rho), math.log(sigma), 0, 0, 0, 0])
        rep_ns = nonstationary_precision(coarse_mesh, gam, alpha=2.0)
        kappa = kappa_from_range(rho, 1.0)
        tau = tau_from_sigma(sigma, kappa, 2.0, 2)
        rep_st = stationary_precision(assemble(coarse_mesh), kappa, tau, 2.0, mesh=coarse_mesh)
        diff = (rep_ns.precision.mat - rep_st.precision.mat).toarray()
        assert np.linalg.norm(diff) / np.linalg.norm(rep_st.precision.to_dense()) < 1e-10

    def test_constant_coefficients_reduce_fractional_path(self, coarse_mesh):
        rho, sigma, alpha = 0.3, 0.8, 1.6
        gam = np.array([math.log(rho), math.log(sigma), 0, 0, 0, 0])
        rep_ns = nonstationary_precision(coarse_mesh, gam, alpha=alpha)
        kappa = kappa_from_range(rho, alpha - 1.0)
        tau = tau_from_sigma(sigma, kappa, alpha, 2)
        rep_st = rational_precision(assemble(coarse_mesh), kappa, tau, alpha, mesh=coarse_mesh)
        a, b = rep_ns.precision.to_dense(), rep_st.precision.to_dense()
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-8

    def test_range_grows_with_maturity_coordinate(self, coarse_mesh):
        # gamma4 > 0: longer range (slower correlation decay) at high m
        gam = np.array([math.log(0.22), math.log(0.8), 0.0, 0.0, 0.9, 0.0])
        rep = nonstationary_precision(coarse_mesh, gam, alpha=2.0)
        cov = np.linalg.inv(rep.precision.to_dense())
        v = rep.mesh.vertices

        def corr_at(p0, step):
            i = np.argmin(np.linalg.norm(v - p0, axis=1))
            j = np.argmin(np.linalg.norm(v - (p0 + step), axis=1))
            return cov[i, j] / math.sqrt(cov[i, i] * cov[j, j])

        low = corr_at(np.array([0.5, 0.15]), np.array([0.2, 0.0]))
        high = corr_at(np.array([0.5, 0.85]), np.array([0.2, 0.0]))
        assert high > low

    def test_sd_increases_along_time(self, coarse_mesh):
        # gamma3 > 0: marginal sd grows with the time coordinate
        gam = np.array([math.log(0.3), math.log(0.5), 0.0, 1.0, 0.0, 0.0])
        rep = nonstationary_precision(coarse_mesh, gam, alpha=2.0)
        cov = np.linalg.inv(rep.precision.to_dense())
        v = rep.mesh.vertices
        sds = np.sqrt(np.diag(cov))
        interior = (v[:, 1] > 0.45) & (v[:, 1] < 0.55) & (v[:, 0] > 0.1) & (v[:, 0] < 0.9)
        t = v[interior, 0]
        s = sds[interior]
        order = np.argsort(t)
        assert s[order][-1] > s[order][0]
        assert np.corrcoef(t, s)[0, 1] > 0.9

    def test_extreme_range_ratio_warns(self, coarse_mesh):
        gam = np.array([math.log(0.3), 0.0, 8.0, 0.0, 0.0, 0.0])
        with pytest.warns(UserWarning):
            nonstationary_precision(coarse_mesh, gam, alpha=2.0)


class TestAnisotropic:
    def test_identity_deformation_equals_stationary_bitwise(self, plane_setup):
        mesh, ops, kappa, tau, *_ = plane_setup
        rep_a = anisotropic_precision(mesh, kappa, tau, 2.0, log_ratio=0.0, angle=0.0)
        rep_s = stationary_precision(assemble(mesh), kappa, tau, 2.0, mesh=mesh)
        assert (rep_a.precision.mat != rep_s.precision.mat).nnz == 0

    def test_elliptical_correlation_contours(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.04, extension=0.3)
        kappa = kappa_from_range(0.5, 1.0)
        tau = tau_from_sigma(1.0, kappa, 2.0, 2)
        H = np.diag([4.0, 1.0])
        rep = anisotropic_precision(mesh, kappa, tau, 2.0, H=H)
        cov = np.linalg.inv(rep.precision.to_dense())
        v = mesh.vertices
        c = np.argmin(np.linalg.norm(v - 0.5, axis=1))

        def corr_to(p):
            j = np.argmin(np.linalg.norm(v - p, axis=1))
            return cov[c, j] / math.sqrt(cov[c, c] * cov[j, j])

        # anisotropic distance sqrt(h' H^{-1} h): d along x equals d/2 along y
        d = 0.24
        corr_x = corr_to(v[c] + np.array([d, 0.0]))
        corr_y = corr_to(v[c] + np.array([0.0, d / 2.0]))
        assert corr_x == pytest.approx(corr_y, rel=0.10)

    def test_unit_determinant_preserves_variance(self, plane_setup):
        mesh, ops, kappa, tau, *_ = plane_setup
        rep_iso = stationary_precision(ops, kappa, tau, 2.0, mesh=mesh)
        rep_an = anisotropic_precision(mesh, kappa, tau, 2.0, log_ratio=0.4, angle=0.6)
        ci = np.linalg.inv(rep_iso.precision.to_dense())
        ca = np.linalg.inv(rep_an.precision.to_dense())
        center = np.argmin(np.abs(mesh.vertices - 0.5).sum(axis=1))
        assert ca[center, center] == pytest.approx(ci[center, center], rel=0.05)

    def test_anisotropy_matrix_has_unit_determinant(self):
        H = anisotropy_matrix(0.7, 1.1)
        assert np.linalg.det(H) == pytest.approx(1.0, rel=1e-12)
        assert np.all(np.linalg.eigvalsh(H) > 0)


class TestSpatiotemporal:
    def single_vertex_ops(self, c=0.7):
        return AssembledOperators(
            C=sp.csc_matrix(np.array([[c]])), C_lumped=np.array([c]),
            G=sp.csc_matrix((1, 1)), dim=1,
        )

    def test_single_vertex_reduces_to_ar1(self):
        c, kappa, gamma_t, sig, T = 0.7, 1.3, 0.4, 0.9, 8
        rep = spatiotemporal_precision(self.single_vertex_ops(c), T, kappa, gamma_t, sig, alpha=1)
        phi = 1.0 / (1.0 + gamma_t * kappa**2)
        tau = kappa**2 * c**3 * (1 + gamma_t * kappa**2) ** 2 / sig**2
        ref = ar1_precision(T, tau, phi).to_dense()
        assert np.max(np.abs(rep.precision.to_dense() - ref)) / tau < 1e-12

    def test_single_vertex_alpha_two(self):
        c, kappa, gamma_t, sig, T = 0.5, 1.1, 0.3, 0.8, 6
        rep = spatiotemporal_precision(self.single_vertex_ops(c), T, kappa, gamma_t, sig, alpha=2)
        phi = 1.0 / (1.0 + gamma_t * kappa**4)
        tau = kappa**2 * c**3 * (1 + gamma_t * kappa**4) ** 2 / sig**2
        ref = ar1_precision(T, tau, phi).to_dense()
        assert np.max(np.abs(rep.precision.to_dense() - ref)) / tau < 1e-12

    def test_temporal_correlation_decays_monotonically(self):
        mesh = build_mesh_1d((0, 1), resolution=0.2, extension=0.2)
        rep = spatiotemporal_precision(assemble(mesh), 20, 2.0, 0.5, 1.0, alpha=1, mesh=mesh)
        cov = np.linalg.inv(rep.precision.to_dense())
        nm = rep.temporal.n_space
        i = nm // 2
        corr = [
            cov[i, k * nm + i] / math.sqrt(cov[i, i] * cov[k * nm + i, k * nm + i])
            for k in range(8)
        ]
        assert all(np.diff(corr) < 0)

    def test_fast_mean_reversion_kills_lag_one_correlation(self):
        mesh = build_mesh_1d((0, 1), resolution=0.2, extension=0.2)
        ops = assemble(mesh)
        rep = spatiotemporal_precision(ops, 6, 2.0, 5e4, 1.0, alpha=1, mesh=mesh)
        cov = np.linalg.inv(rep.precision.to_dense())
        nm = rep.temporal.n_space
        i = nm // 2
        lag1 = cov[i, nm + i] / math.sqrt(cov[i, i] * cov[nm + i, nm + i])
        assert abs(lag1) < 1e-3

    def test_bandwidth_contract(self):
        mesh = build_mesh_1d((0, 1), resolution=0.15, extension=0.2)
        rep = spatiotemporal_precision(assemble(mesh), 15, 2.0, 0.5, 1.0, alpha=1, mesh=mesh)
        coo = rep.precision.mat.tocoo()
        nm = rep.temporal.n_space
        assert np.max(np.abs(coo.row - coo.col)) <= 2 * nm

    def test_spacetime_projection_rows(self):
        mesh = build_mesh_1d((0, 1), resolution=0.25, extension=0.0)
        rep = spatiotemporal_precision(assemble(mesh), 4, 2.0, 0.5, 1.0, alpha=1, mesh=mesh)
        rows = rep.project_spacetime([1, 3, 4], [0.1, 0.5, 0.9])
        assert rows.shape == (3, rep.n_latent)
        n_m = rep.temporal.n_space
        dense = rows.toarray()
        # row k lands entirely inside month t_k's block and sums to one
        for k, t in enumerate([1, 3, 4]):
            block = dense[k, (t - 1) * n_m : t * n_m]
            assert block.sum() == pytest.approx(1.0)
            outside = np.delete(dense[k], np.arange((t - 1) * n_m, t * n_m))
            assert np.all(outside == 0.0)
        with pytest.raises(DomainError):
            rep.project_spacetime([5], [0.5])

    def test_domain_guards(self):
        ops = self.single_vertex_ops()
        with pytest.raises(DomainError):
            spatiotemporal_precision(ops, 5, -1.0, 0.5, 1.0)
        with pytest.raises(DomainError):
            spatiotemporal_precision(ops, 5, 1.0, 0.0, 1.0)
        with pytest.raises(DomainError):
            spatiotemporal_precision(ops, 5, 1.0, 0.5, 1.0, alpha=3)


class TestPositiveDefiniteness:
    def test_all_variants_factorize_over_random_hyperparameters(self):
        rng = np.random.default_rng(0)
        mesh2 = build_mesh_2d((0, 1), (0, 1), resolution=0.12, extension=0.2)
        ops2 = assemble(mesh2)
        mesh1 = build_mesh_1d((0, 1), resolution=0.12, extension=0.2)
        ops1 = assemble(mesh1)
        for k in range(100):
            rho = float(np.exp(rng.uniform(np.log(0.05), np.log(1.5))))
            sigma = float(np.exp(rng.uniform(np.log(0.05), np.log(3.0))))
            alpha = float(rng.uniform(1.05, 2.95))
            nu = alpha - 1.0
            kappa = kappa_from_range(rho, nu)
            tau = tau_from_sigma(sigma, kappa, alpha, 2)
            variant = k % 5
            if variant == 0:
                rep = stationary_precision(ops2, kappa, tau, 2.0, mesh=mesh2)
            elif variant == 1:
                rep = rational_precision(ops2, kappa, tau, alpha, mesh=mesh2)
            elif variant == 2:
                gam = np.array([
                    np.log(rho), np.log(sigma),
                    rng.normal(0, 0.5), rng.normal(0, 0.5),
                    rng.normal(0, 0.5), rng.normal(0, 0.5),
                ])
                rep = nonstationary_precision(mesh2, gam, alpha=alpha)
            elif variant == 3:
                rep = anisotropic_precision(
                    mesh2, kappa, tau, alpha,
                    log_ratio=rng.normal(0, 0.5), angle=rng.normal(0, 1.0),
                )
            else:
                rep = spatiotemporal_precision(
                    ops1, 6, kappa_from_range(rho, 0.5), float(np.exp(rng.normal(-1, 1))),
                    sigma, alpha=1, mesh=mesh1,
                )
            SparseFactor(rep.precision)  # must not raise
