"""Sparse symmetric matrices, Cholesky-style factorization, AR(1) precisions,
Gaussian posteriors, and the closed-form Gaussian log marginal likelihood.

Factorizations use SuperLU in symmetric mode (no numerical pivoting, minimum
degree ordering on A^T + A), which on an SPD matrix produces P^T L D L^T P and
therefore serves as a sparse Cholesky: log-determinants come from the diagonal
of U = D L^T P, and sampling solves the permuted triangular system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, NumericalError

_PHI_CLAMP = 1.0 - 1e-12


class SparseSymmetric:
    """Symmetric sparse matrix carrier. Stores the full CSC matrix."""

    def __init__(self, mat):
        mat = sp.csc_matrix(mat)
        if mat.shape[0] != mat.shape[1]:
            raise DomainError("SparseSymmetric must be square")
        mat.sum_duplicates()
        mat.eliminate_zeros()
        self.mat = mat

    @classmethod
    def from_triplets(cls, n, rows, cols, values) -> "SparseSymmetric":
        """Build from upper-triangle triplets (row <= col); the lower half is mirrored."""
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        values = np.asarray(values, dtype=float)
        if np.any(rows > cols):
            raise DomainError("triplets must satisfy row <= col")
        off = rows != cols
        r = np.concatenate([rows, cols[off]])
        c = np.concatenate([cols, rows[off]])
        v = np.concatenate([values, values[off]])
        return cls(sp.coo_matrix((v, (r, c)), shape=(n, n)))

    @classmethod
    def diagonal(cls, values) -> "SparseSymmetric":
        return cls(sp.diags(np.asarray(values, dtype=float)).tocsc())

    @classmethod
    def identity(cls, n, scale=1.0) -> "SparseSymmetric":
        return cls(sp.identity(n, format="csc") * scale)

    @property
    def n(self) -> int:
        return self.mat.shape[0]

    @property
    def nnz(self) -> int:
        return self.mat.nnz

    def to_dense(self) -> np.ndarray:
        return self.mat.toarray()

    def symmetry_error(self) -> float:
        d = self.mat - self.mat.T
        return 0.0 if d.nnz == 0 else float(np.abs(d.data).max())

    def __add__(self, other):
        other = other.mat if isinstance(other, SparseSymmetric) else other
        return SparseSymmetric(self.mat + other)

    def __mul__(self, scalar):
        return SparseSymmetric(self.mat * float(scalar))

    __rmul__ = __mul__

    def __matmul__(self, vec):
        return self.mat @ vec

    def dump_matrix_market(self, path):
        from scipy.io import mmwrite

        mmwrite(str(path), self.mat.tocoo(), symmetry="symmetric")


def block_diag(blocks) -> SparseSymmetric:
    mats = [b.mat if isinstance(b, SparseSymmetric) else sp.csc_matrix(b) for b in blocks]
    return SparseSymmetric(sp.block_diag(mats, format="csc"))


_JITTER = 1e-10


class SparseFactor:
    """Cholesky-like factorization of an SPD sparse matrix via symmetric-mode SuperLU."""

    def __init__(self, Q):
        mat = Q.mat if isinstance(Q, SparseSymmetric) else sp.csc_matrix(Q)
        self.n = mat.shape[0]
        lu, dvals = self._factor(mat)
        if dvals.min() <= 0.0:
            # near-singular blocks can appear for extreme hyperparameters; one
            # jitter retry, then hard failure
            jitter = _JITTER * float(mat.diagonal().mean())
            lu, dvals = self._factor(mat + sp.identity(self.n, format="csc") * jitter)
            if dvals.min() <= 0.0:
                raise NumericalError(
                    "matrix is not positive definite",
                    pivot=int(np.argmin(dvals)),
                )
        self._lu = lu
        self._dvals = dvals
        self._half = None

    @staticmethod
    def _factor(mat):
        try:
            lu = spla.splu(
                mat.tocsc(),
                diag_pivot_thresh=0.0,
                permc_spec="MMD_AT_PLUS_A",
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # structurally singular
            raise NumericalError(f"factorization failed: {exc}") from exc
        return lu, lu.U.diagonal()

    @property
    def logdet(self) -> float:
        return float(np.sum(np.log(self._dvals)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_half_t(self, z: np.ndarray) -> np.ndarray:
        """Solve M^T x = z where Q = M M^T; used for posterior sampling."""
        if self._half is None:
            W = (sp.diags(np.sqrt(self._dvals)) @ self._lu.L.T).tocsr()
            self._half = (W, self._lu.perm_r)
        W, perm = self._half
        y = spla.spsolve_triangular(W, np.asarray(z, dtype=float), lower=False)
        return y[perm]

    def reassembled(self) -> sp.csc_matrix:
        """Rebuild Q from the retained factor (diagnostic use)."""
        n = self.n
        P = sp.csc_matrix((np.ones(n), (self._lu.perm_r, np.arange(n))))
        M = P.T @ self._lu.L @ sp.diags(np.sqrt(self._dvals))
        return (M @ M.T).tocsc()


def ar1_precision(n: int, tau: float, phi: float) -> SparseSymmetric:
    """Tridiagonal precision of a stationary AR(1) with innovation precision tau."""
    if n < 1:
        raise DomainError("ar1_precision requires n >= 1")
    if tau <= 0:
        raise DomainError("ar1_precision requires tau > 0")
    if abs(phi) >= 1:
        raise DomainError(f"AR(1) is nonstationary for |phi| >= 1, got phi={phi}")
    if n == 1:
        return SparseSymmetric.diagonal([tau * (1.0 - phi * phi)])
    diag = np.full(n, tau * (1.0 + phi * phi))
    diag[0] = tau
    diag[-1] = tau
    off = np.full(n - 1, -tau * phi)
    return SparseSymmetric(sp.diags([off, diag, off], offsets=[-1, 0, 1]).tocsc())


def ar1_logdet(n: int, tau: float, phi: float) -> float:
    """Closed-form log determinant of the AR(1) precision."""
    return n * np.log(tau) + np.log1p(-phi * phi)


def hyper_transform_ar1(theta1: float, theta2: float) -> tuple[float, float]:
    """(tau, phi) = (exp(theta1), logistic(theta2)); phi clamps just below 1."""
    tau = float(np.exp(theta1))
    phi = float(1.0 / (1.0 + np.exp(-theta2)))
    return tau, min(phi, _PHI_CLAMP)


def inverse_hyper_transform_ar1(tau: float, phi: float) -> tuple[float, float]:
    if tau <= 0 or not (0.0 < phi < 1.0):
        raise DomainError("inverse transform needs tau > 0 and phi in (0, 1)")
    return float(np.log(tau)), float(np.log(phi) - np.log1p(-phi))


def _noise_logdet(Q_noise) -> float:
    mat = Q_noise.mat if isinstance(Q_noise, SparseSymmetric) else Q_noise
    if mat.nnz == mat.shape[0] and np.array_equal(mat.nonzero()[0], mat.nonzero()[1]):
        return float(np.sum(np.log(mat.diagonal())))
    return SparseFactor(mat).logdet


@dataclass
class GaussianPosterior:
    """Latent posterior N(mean, Q_post^{-1}) plus the model's log marginal likelihood."""

    mean: np.ndarray
    factor: SparseFactor
    log_marginal: float

    @property
    def n(self) -> int:
        return self.mean.size

    def marginal_variances(self, indices) -> np.ndarray:
        """Diagonal entries of Q_post^{-1} at the requested indices."""
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        rhs = np.zeros((self.n, indices.size))
        rhs[indices, np.arange(indices.size)] = 1.0
        sol = self.factor.solve(rhs)
        return sol[indices, np.arange(indices.size)]


def gaussian_posterior(
    Q_prior,
    A,
    Q_noise,
    y: np.ndarray,
    logdet_prior: float | None = None,
) -> GaussianPosterior:
    """Conjugate update for y = A x + e with x ~ N(0, Q_prior^{-1}), e ~ N(0, Q_noise^{-1})."""
    Qp = Q_prior.mat if isinstance(Q_prior, SparseSymmetric) else sp.csc_matrix(Q_prior)
    Qn = Q_noise.mat if isinstance(Q_noise, SparseSymmetric) else sp.csc_matrix(Q_noise)
    A = sp.csr_matrix(A)
    y = np.asarray(y, dtype=float)
    n_obs = y.size
    if A.shape != (n_obs, Qp.shape[0]) or Qn.shape[0] != n_obs:
        raise DomainError(
            f"dimension mismatch: A {A.shape}, prior {Qp.shape[0]}, noise {Qn.shape[0]}, y {n_obs}"
        )
    QnA = Qn @ A
    Q_post = (A.T @ QnA + Qp).tocsc()
    factor = SparseFactor(Q_post)
    mu = factor.solve(A.T @ (Qn @ y))

    if logdet_prior is None:
        logdet_prior = SparseFactor(Qp).logdet
    resid = y - A @ mu
    log_ml = (
        -0.5 * n_obs * np.log(2.0 * np.pi)
        + 0.5 * logdet_prior
        + 0.5 * _noise_logdet(Qn)
        - 0.5 * factor.logdet
        - 0.5 * float(mu @ (Qp @ mu))
        - 0.5 * float(resid @ (Qn @ resid))
    )
    return GaussianPosterior(mean=mu, factor=factor, log_marginal=float(log_ml))


def log_marginal_likelihood(Q_prior, A, Q_noise, y, logdet_prior=None) -> float:
    return gaussian_posterior(Q_prior, A, Q_noise, y, logdet_prior=logdet_prior).log_marginal


def sample_posterior(post: GaussianPosterior, count: int, seed) -> np.ndarray:
    """(count, n) posterior draws, x = mean + M^{-T} z with Q_post = M M^T."""
    if count < 1:
        raise DomainError("count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((post.n, count))
    return (post.mean[:, None] + post.factor.solve_half_t(z)).T
