import numpy as np
import pytest

from oracles import tri_quadrature_mass, tri_quadrature_stiffness
from yieldfield.errors import DomainError, LocationError, SizeError
from yieldfield.fem import (
    CoordMap,
    assemble,
    build_mesh_1d,
    build_mesh_2d,
    projection_matrix,
)


class TestMeshConstruction:
    def test_unit_square_coarse_counts(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.5, extension=0.0)
        assert mesh.n_vertices == 9
        assert mesh.elements.shape == (8, 3)

    def test_extension_enlarges_bounding_box(self):
        mesh = build_mesh_2d((0, 10), (0, 10), resolution=1.0, extension=0.2)
        assert mesh.vertices.min() == pytest.approx(-2.0)
        assert mesh.vertices.max() == pytest.approx(12.0)

    def test_triangles_positively_oriented(self):
        mesh = build_mesh_2d((0, 1), (0, 2), resolution=0.3, extension=0.1)
        coords = mesh.vertices[mesh.elements]
        x, y = coords[..., 0], coords[..., 1]
        det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        assert np.all(det > 0)

    def test_interval_counts(self):
        mesh = build_mesh_1d((0, 1), resolution=0.25, extension=0.0)
        assert mesh.n_vertices == 5
        assert mesh.elements.shape == (4, 2)

    def test_size_guard(self):
        with pytest.raises(SizeError):
            build_mesh_2d((0, 1), (0, 1), resolution=1e-4, extension=0.0)

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            build_mesh_1d((1, 1), resolution=0.1)
        with pytest.raises(DomainError):
            build_mesh_2d((0, 1), (0, 1), resolution=-0.1)


class TestAssembly1D:
    def test_interior_mass_row_sums_equal_spacing(self):
        mesh = build_mesh_1d((0, 1), resolution=0.25, extension=0.0)
        ops = assemble(mesh)
        C = ops.C.toarray()
        assert C[2].sum() == pytest.approx(0.25, rel=1e-12)
        assert np.allclose(ops.C_lumped, C.sum(axis=1))

    def test_interior_stiffness_row(self):
        h = 0.25
        mesh = build_mesh_1d((0, 1), resolution=h, extension=0.0)
        G = assemble(mesh).G.toarray()
        assert np.allclose(G[2, 1:4], [-1 / h, 2 / h, -1 / h], rtol=1e-12)

    def test_mass_total_equals_length(self):
        mesh = build_mesh_1d((0, 2), resolution=0.13, extension=0.0)
        ops = assemble(mesh)
        assert ops.C.sum() == pytest.approx(2.0, rel=1e-10)


class TestAssembly2D:
    def test_element_matrices_match_quadrature_oracle(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=1.0, extension=0.0)
        ops = assemble(mesh)
        n = mesh.n_vertices
        C_ref = np.zeros((n, n))
        G_ref = np.zeros((n, n))
        for el in mesh.elements:
            v = mesh.vertices[el]
            Ce = tri_quadrature_mass(v[0], v[1], v[2])
            Ge = tri_quadrature_stiffness(v[0], v[1], v[2])
            for a in range(3):
                for b in range(3):
                    C_ref[el[a], el[b]] += Ce[a, b]
                    G_ref[el[a], el[b]] += Ge[a, b]
        assert np.max(np.abs(ops.C.toarray() - C_ref)) < 1e-12
        assert np.max(np.abs(ops.G.toarray() - G_ref)) < 1e-12

    def test_stiffness_row_sums_vanish(self):
        mesh = build_mesh_2d((0, 3), (0, 1), resolution=0.21, extension=0.15)
        G = assemble(mesh).G
        assert np.max(np.abs(np.asarray(G.sum(axis=1)))) < 1e-10

    def test_identity_deformation_is_bitwise_default(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.2, extension=0.0)
        a = assemble(mesh)
        b = assemble(mesh, H=np.eye(2))
        assert (a.G != b.G).nnz == 0

    def test_scalar_deformation_scales_stiffness(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.2, extension=0.0)
        G1 = assemble(mesh).G
        Ga = assemble(mesh, H=np.diag([1.7, 1.7])).G
        assert np.max(np.abs((Ga - 1.7 * G1).toarray())) < 1e-12

    def test_anisotropic_assembly_matches_oracle(self):
        H = np.array([[2.0, 0.4], [0.4, 0.7]])
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.5, extension=0.0)
        G = assemble(mesh, H=H).G.toarray()
        n = mesh.n_vertices
        ref = np.zeros((n, n))
        for el in mesh.elements:
            v = mesh.vertices[el]
            Ge = tri_quadrature_stiffness(v[0], v[1], v[2], H=H)
            for a in range(3):
                for b in range(3):
                    ref[el[a], el[b]] += Ge[a, b]
        assert np.max(np.abs(G - ref)) < 1e-12

    def test_mass_total_equals_area(self):
        mesh = build_mesh_2d((0, 2), (0, 3), resolution=0.17, extension=0.0)
        assert assemble(mesh).C.sum() == pytest.approx(6.0, rel=1e-10)

    def test_non_spd_H_rejected(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.5)
        with pytest.raises(DomainError):
            assemble(mesh, H=np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestProjection:
    def test_vertex_hits_are_one_hot(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.5, extension=0.0)
        P = projection_matrix(mesh, mesh.vertices[:3])
        D = P.toarray()
        for i in range(3):
            assert D[i, i] == pytest.approx(1.0)
            assert D[i].sum() == pytest.approx(1.0)

    def test_centroid_weights_are_thirds(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=1.0, extension=0.0)
        el = mesh.elements[0]
        centroid = mesh.vertices[el].mean(axis=0)
        row = projection_matrix(mesh, [centroid]).toarray()[0]
        assert np.allclose(np.sort(row[row > 0]), [1 / 3, 1 / 3, 1 / 3])

    def test_linear_reproduction(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.23, extension=0.1)
        f = lambda p: 2.0 * p[:, 0] - 3.0 * p[:, 1] + 1.0
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.05, 0.95, size=(100, 2))
        P = projection_matrix(mesh, pts)
        nodal = f(mesh.vertices)
        assert np.max(np.abs(P @ nodal - f(pts))) < 1e-12

    def test_rows_are_convex_weights(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.3, extension=0.0)
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 1, size=(50, 2))
        P = projection_matrix(mesh, pts)
        assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
        assert P.data.min() >= -1e-12 and P.data.max() <= 1.0 + 1e-12
        assert np.max((P != 0).sum(axis=1)) <= 3

    def test_outside_hull_raises_with_index(self):
        mesh = build_mesh_2d((0, 1), (0, 1), resolution=0.5, extension=0.0)
        with pytest.raises(LocationError) as err:
            projection_matrix(mesh, [[0.5, 0.5], [2.0, 0.5]])
        assert err.value.index == 1

    def test_1d_hat_weights(self):
        mesh = build_mesh_1d((0, 1), resolution=0.25, extension=0.0)
        row = projection_matrix(mesh, [[0.3]]).toarray()[0]
        assert row[1] == pytest.approx(0.8)
        assert row[2] == pytest.approx(0.2)


class TestCoordMap:
    def test_training_window_maps_to_unit_square(self):
        mats = np.array([3, 6, 12, 24, 60, 120])
        cmap = CoordMap.for_window(100, mats)
        pts = cmap.to_scaled([1, 100], [3, 120])
        assert np.allclose(pts[0], [0.0, 0.0])
        assert np.allclose(pts[1], [1.0, 1.0])

    def test_mesh_export_csv(self):
        mesh = build_mesh_1d((0, 1), resolution=0.5)
        assert "index" in mesh.vertex_csv().splitlines()[0]
        assert len(mesh.element_csv().splitlines()) == mesh.elements.shape[0] + 1
