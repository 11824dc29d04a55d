"""Structured triangulations of rectangles (and 1-D intervals), piecewise
linear mass/stiffness assembly, and barycentric point-evaluation matrices.

All SPDE fields live on scaled coordinates: calendar time in months divided by
the training range and maturity on a log scale divided by its range, so both
axes have comparable magnitude before any anisotropy estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, LocationError, SizeError

MAX_VERTICES = 1_000_000


@dataclass(frozen=True)
class Mesh:
    """Structured simplicial mesh; elements are triangles (2-D) or intervals (1-D)."""

    vertices: np.ndarray    # (n, dim)
    elements: np.ndarray    # (ne, dim + 1) vertex indices, positively oriented
    boundary: np.ndarray    # (n,) bool
    dim: int
    origin: np.ndarray = field(default=None, repr=False)   # grid lower corner
    spacing: np.ndarray = field(default=None, repr=False)  # grid step per axis
    shape: tuple = field(default=None, repr=False)         # vertices per axis

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def vertex_csv(self) -> str:
        cols = ",".join(f"x{k}" for k in range(self.dim))
        rows = [f"index,{cols},boundary"]
        for i, v in enumerate(self.vertices):
            rows.append(f"{i}," + ",".join(repr(float(c)) for c in v) + f",{int(self.boundary[i])}")
        return "\n".join(rows) + "\n"

    def element_csv(self) -> str:
        rows = ["index," + ",".join(f"v{k}" for k in range(self.dim + 1))]
        for i, e in enumerate(self.elements):
            rows.append(f"{i}," + ",".join(str(int(v)) for v in e))
        return "\n".join(rows) + "\n"


def build_mesh_1d(maturity_range, resolution: float, extension: float = 0.0) -> Mesh:
    lo, hi = float(maturity_range[0]), float(maturity_range[1])
    if hi <= lo:
        raise DomainError("empty 1-D range")
    if resolution <= 0 or extension < 0:
        raise DomainError("resolution must be positive and extension nonnegative")
    pad = extension * (hi - lo)
    a, b = lo - pad, hi + pad
    n_int = max(1, int(np.ceil((b - a) / resolution)))
    if n_int + 1 > MAX_VERTICES:
        raise SizeError(f"1-D mesh would have {n_int + 1} vertices")
    x = np.linspace(a, b, n_int + 1)
    elements = np.column_stack([np.arange(n_int), np.arange(1, n_int + 1)])
    boundary = np.zeros(n_int + 1, dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(
        vertices=x[:, None],
        elements=elements,
        boundary=boundary,
        dim=1,
        origin=np.array([a]),
        spacing=np.array([(b - a) / n_int]),
        shape=(n_int + 1,),
    )


def build_mesh_2d(time_range, maturity_range, resolution, extension: float = 0.0) -> Mesh:
    """Right-triangle mesh on the rectangle enlarged by `extension` of each range per side."""
    tx0, tx1 = float(time_range[0]), float(time_range[1])
    my0, my1 = float(maturity_range[0]), float(maturity_range[1])
    if tx1 <= tx0 or my1 <= my0:
        raise DomainError("empty 2-D range")
    res = np.broadcast_to(np.asarray(resolution, dtype=float), (2,))
    if np.any(res <= 0) or extension < 0:
        raise DomainError("resolution must be positive and extension nonnegative")
    padx = extension * (tx1 - tx0)
    pady = extension * (my1 - my0)
    ax, bx = tx0 - padx, tx1 + padx
    ay, by = my0 - pady, my1 + pady
    nx = max(1, int(np.ceil((bx - ax) / res[0])))
    ny = max(1, int(np.ceil((by - ay) / res[1])))
    if (nx + 1) * (ny + 1) > MAX_VERTICES:
        raise SizeError(f"2-D mesh would have {(nx + 1) * (ny + 1)} vertices")
    xs = np.linspace(ax, bx, nx + 1)
    ys = np.linspace(ay, by, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(order="C"), Y.ravel(order="C")])

    # vertex index (i, j) -> i * (ny + 1) + j
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    v00 = (i * (ny + 1) + j).ravel()
    v10 = ((i + 1) * (ny + 1) + j).ravel()
    v01 = (i * (ny + 1) + j + 1).ravel()
    v11 = ((i + 1) * (ny + 1) + j + 1).ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.vstack([lower, upper])

    boundary = np.zeros(vertices.shape[0], dtype=bool)
    bi = np.arange(nx + 1)
    bj = np.arange(ny + 1)
    boundary[bi * (ny + 1)] = True
    boundary[bi * (ny + 1) + ny] = True
    boundary[bj] = True
    boundary[nx * (ny + 1) + bj] = True
    return Mesh(
        vertices=vertices,
        elements=elements,
        boundary=boundary,
        dim=2,
        origin=np.array([ax, ay]),
        spacing=np.array([(bx - ax) / nx, (by - ay) / ny]),
        shape=(nx + 1, ny + 1),
    )


@dataclass
class AssembledOperators:
    """Mass, lumped mass (as a diagonal vector), and stiffness matrices."""

    C: sp.csc_matrix
    C_lumped: np.ndarray
    G: sp.csc_matrix
    dim: int

    @property
    def n(self) -> int:
        return self.C.shape[0]


def _element_areas_grads(mesh: Mesh):
    """Signed areas and constant basis gradients for all triangles."""
    coords = mesh.vertices[mesh.elements]  # (ne, 3, 2)
    x, y = coords[..., 0], coords[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * det
    if np.any(area <= 1e-12):
        raise DomainError("mesh contains degenerate or negatively oriented triangles")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]  # (ne, 3, 2)
    return area, grads


_MASS_2D = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
_MASS_1D = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


def _accumulate(n, elements, local):
    """Scatter (ne, k, k) element matrices into a global sparse matrix."""
    ne, k, _ = local.shape
    rows = np.repeat(elements, k, axis=1).ravel()
    cols = np.tile(elements, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()


def assemble(mesh: Mesh, H=None, mass_weights=None, stiffness_weights=None) -> AssembledOperators:
    """Exact P1 mass/stiffness assembly; H is an SPD 2x2 deformation for the gradient
    inner product; optional per-element scalar weights multiply the local matrices."""
    n = mesh.n_vertices
    ne = mesh.elements.shape[0]
    mw = np.ones(ne) if mass_weights is None else np.asarray(mass_weights, dtype=float)
    sw = np.ones(ne) if stiffness_weights is None else np.asarray(stiffness_weights, dtype=float)
    if mesh.dim == 1:
        h = np.abs(np.diff(mesh.vertices[mesh.elements, 0], axis=1)).ravel()
        if np.any(h <= 1e-12):
            raise DomainError("mesh contains degenerate intervals")
        if H is not None and not np.allclose(np.atleast_2d(H), np.eye(1)):
            raise DomainError("anisotropy is undefined on a 1-D mesh")
        local_C = (h * mw)[:, None, None] * _MASS_1D[None]
        local_G = (sw / h)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None]
    else:
        if H is None:
            H = np.eye(2)
        H = np.asarray(H, dtype=float)
        if H.shape != (2, 2) or abs(H[0, 1] - H[1, 0]) > 1e-12:
            raise DomainError("H must be a symmetric 2x2 matrix")
        evals = np.linalg.eigvalsh(H)
        if evals.min() <= 0:
            raise DomainError("H must be positive definite")
        area, grads = _element_areas_grads(mesh)
        local_C = (area * mw)[:, None, None] * _MASS_2D[None]
        Hg = grads @ H.T  # (ne, 3, 2)
        local_G = (area * sw)[:, None, None] * np.einsum("eik,ejk->eij", grads, Hg)
    C = _accumulate(n, mesh.elements, local_C)
    G = _accumulate(n, mesh.elements, local_G)
    return AssembledOperators(C=C, C_lumped=np.asarray(C.sum(axis=1)).ravel(), G=G, dim=mesh.dim)


_HULL_TOL = 1e-9


def projection_matrix(mesh: Mesh, points) -> sp.csr_matrix:
    """Rows of barycentric weights evaluating the P1 field at each point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != mesh.dim:
        raise DomainError(f"points must have {mesh.dim} coordinates")
    lo = mesh.origin
    hi = mesh.origin + mesh.spacing * (np.asarray(mesh.shape) - 1)
    span = hi - lo
    rows, cols, vals = [], [], []
    for idx, p in enumerate(points):
        if np.any(p < lo - _HULL_TOL * span) or np.any(p > hi + _HULL_TOL * span):
            raise LocationError(f"point {idx} at {tuple(p)} is outside the mesh hull", index=idx)
        loc = np.clip((p - lo) / mesh.spacing, 0.0, np.asarray(mesh.shape, dtype=float) - 1.0)
        cell = np.minimum(loc.astype(int), np.asarray(mesh.shape) - 2)
        frac = loc - cell
        if mesh.dim == 1:
            i = int(cell[0])
            u = float(frac[0])
            rows += [idx, idx]
            cols += [i, i + 1]
            vals += [1.0 - u, u]
        else:
            i, jj = int(cell[0]), int(cell[1])
            u, v = float(frac[0]), float(frac[1])
            ny1 = mesh.shape[1]
            v00 = i * ny1 + jj
            v10 = (i + 1) * ny1 + jj
            v01 = i * ny1 + jj + 1
            v11 = (i + 1) * ny1 + jj + 1
            if v <= u:  # lower triangle (v00, v10, v11)
                w = [1.0 - u, u - v, v]
                vv = [v00, v10, v11]
            else:       # upper triangle (v00, v11, v01)
                w = [1.0 - v, u, v - u]
                vv = [v00, v11, v01]
            rows += [idx] * 3
            cols += vv
            vals += w
    P = sp.coo_matrix((vals, (rows, cols)), shape=(points.shape[0], mesh.n_vertices))
    return P.tocsr()


@dataclass(frozen=True)
class CoordMap:
    """Raw (month index, maturity in months) -> scaled mesh coordinates.

    Time is divided by the training range and maturity enters on a log scale
    divided by its own range, so one unit means 'the full data extent' on
    either axis.
    """

    t_span: float
    log_m_min: float
    log_m_span: float

    @classmethod
    def for_window(cls, n_periods: int, maturities) -> "CoordMap":
        mats = np.asarray(maturities, dtype=float)
        log_m = np.log(mats)
        span = log_m.max() - log_m.min()
        return cls(
            t_span=float(max(n_periods - 1, 1)),
            log_m_min=float(log_m.min()),
            log_m_span=float(span if span > 0 else 1.0),
        )

    def to_scaled(self, t_month, m_months) -> np.ndarray:
        t = (np.asarray(t_month, dtype=float) - 1.0) / self.t_span
        m = (np.log(np.asarray(m_months, dtype=float)) - self.log_m_min) / self.log_m_span
        return np.column_stack([np.broadcast_arrays(t, m)[0], np.broadcast_arrays(t, m)[1]])

    def scaled_maturity(self, m_months) -> np.ndarray:
        return (np.log(np.asarray(m_months, dtype=float)) - self.log_m_min) / self.log_m_span
