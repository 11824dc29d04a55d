"""Best rational approximation of x^(-s) on a positive interval.

Implements barycentric rational interpolation plus the iterative
interval-rebalancing scheme of the BRASIL family: interpolation nodes are
moved until the local maxima of the (relative) error equalize, which
characterizes the best approximation. The result is returned in
partial-fraction form, offset + sum(residue_i / (x - pole_i)), which is what
the sparse field construction consumes. If the iteration stalls, rational
interpolation at Chebyshev nodes is used as a near-best fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ApproximationError


class BarycentricRational:
    """r(x) = sum_j w_j f_j / (x - x_j) / sum_j w_j / (x - x_j)."""

    def __init__(self, support, values, weights):
        self.support = np.asarray(support, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        diff = x[:, None] - self.support[None, :]
        exact = np.isclose(diff, 0.0, atol=0.0)
        diff_safe = np.where(exact, 1.0, diff)
        num = np.sum(self.weights * self.values / diff_safe, axis=1)
        den = np.sum(self.weights / diff_safe, axis=1)
        out = num / den
        hit_row, hit_col = np.nonzero(exact)
        out[hit_row] = self.values[hit_col]
        return out[0] if scalar else out

    def poles(self) -> np.ndarray:
        """Zeros of the barycentric denominator (finite generalized eigenvalues)."""
        m1 = self.support.size
        E = np.zeros((m1 + 1, m1 + 1))
        E[0, 1:] = self.weights
        E[1:, 0] = 1.0
        E[1:, 1:] = np.diag(self.support)
        B = np.eye(m1 + 1)
        B[0, 0] = 0.0
        from scipy.linalg import eig

        ev = eig(E, B, right=False)
        ev = ev[np.isfinite(ev)]
        return ev

    def partial_fractions(self):
        """Return (offset, poles, residues) with r(x) = offset + sum c/(x - p)."""
        wsum = self.weights.sum()
        if abs(wsum) < 1e-300:
            raise ApproximationError("degenerate barycentric weights")
        offset = float(np.dot(self.weights, self.values) / wsum)
        poles = self.poles()
        if poles.size and np.abs(poles.imag).max() > 1e-8 * (1.0 + np.abs(poles.real).max()):
            raise ApproximationError("complex poles in rational approximation")
        poles = np.sort(poles.real)
        num = lambda z: np.sum(self.weights * self.values / (z - self.support))
        dden = lambda z: -np.sum(self.weights / (z - self.support) ** 2)
        residues = np.array([num(p) / dden(p) for p in poles])
        return offset, poles, residues


def interpolate_rational(nodes, values) -> BarycentricRational:
    """Degree (m, m) rational interpolant through 2m+1 nodes via a Loewner nullspace."""
    nodes = np.asarray(nodes, dtype=float)
    values = np.asarray(values, dtype=float)
    if nodes.size % 2 != 1:
        raise ApproximationError("need an odd number of interpolation nodes")
    xs, fs = nodes[::2], values[::2]      # m + 1 support points
    xt, ft = nodes[1::2], values[1::2]    # m test points
    L = (ft[:, None] - fs[None, :]) / (xt[:, None] - xs[None, :])
    _, _, vh = np.linalg.svd(L)
    weights = vh[-1]
    return BarycentricRational(xs, fs, weights)


@dataclass(frozen=True)
class RationalExpansion:
    """Partial-fraction form of the approximation to x^(-exponent) on [lo, hi]."""

    exponent: float
    lo: float
    hi: float
    offset: float
    poles: np.ndarray
    residues: np.ndarray
    sup_rel_error: float
    converged: bool

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.offset + np.sum(
            self.residues[None, :] / (np.atleast_1d(x)[:, None] - self.poles[None, :]), axis=1
        ).reshape(x.shape)


def _local_max_errors(r, f, breakpoints, relative, n_probe=48):
    """Max |r - f| (relative if requested) inside each interval, probed log-uniformly."""
    errs = np.empty(breakpoints.size - 1)
    for i in range(breakpoints.size - 1):
        a, b = breakpoints[i], breakpoints[i + 1]
        x = np.exp(np.linspace(np.log(a), np.log(b), n_probe))
        fx = f(x)
        e = np.abs(r(x) - fx)
        if relative:
            e = e / np.abs(fx)
        errs[i] = e.max()
    return errs


def _validate(offset, poles, residues, lo):
    return (
        offset >= -1e-12
        and np.all(poles < lo)
        and np.all(residues > 0)
    )


def _chebyshev_nodes(lo, hi, count):
    k = np.arange(count)
    t = np.cos(np.pi * (2 * k + 1) / (2 * count))[::-1]
    llo, lhi = np.log(lo), np.log(hi)
    return np.exp(0.5 * (llo + lhi) + 0.5 * (lhi - llo) * t)


def best_rational_neg_power(
    exponent: float,
    lo: float,
    hi: float,
    degree: int = 2,
    tol_equi: float = 1e-3,
    stall_tol: float = 1e-8,
    max_iter: int = 200,
    relative: bool = True,
) -> RationalExpansion:
    """Near-best degree (m, m) rational approximation of f(x) = x^(-exponent) on [lo, hi]."""
    if not (0.0 < exponent < 1.0):
        raise ApproximationError(f"exponent must lie in (0, 1), got {exponent}")
    if not (0.0 < lo < hi):
        raise ApproximationError("interval must satisfy 0 < lo < hi")
    if degree < 1:
        raise ApproximationError("degree must be >= 1")

    f = lambda x: np.power(x, -exponent)
    n_nodes = 2 * degree + 1

    def solve_at(nodes):
        r = interpolate_rational(nodes, f(nodes))
        breaks = np.concatenate([[lo], nodes, [hi]])
        errs = _local_max_errors(r, f, breaks, relative)
        return r, errs

    nodes = _chebyshev_nodes(lo, hi, n_nodes)
    best = None
    gamma = 1.0
    prev_dev = np.inf
    converged = False
    for _ in range(max_iter):
        r, errs = solve_at(nodes)
        dev = (errs.max() - errs.min()) / errs.max()
        if best is None or dev < best[0]:
            best = (dev, r, errs.max())
        if dev < tol_equi:
            converged = True
            break
        if abs(prev_dev - dev) < stall_tol * max(1.0, dev):
            break
        if dev > prev_dev:
            gamma = max(gamma / 2.0, 0.0625)
        prev_dev = dev
        # shrink high-error intervals so nodes concentrate where the error peaks;
        # widths are rebalanced in log space to respect the interval's decades
        log_breaks = np.log(np.concatenate([[lo], nodes, [hi]]))
        widths = np.diff(log_breaks)
        gmean = np.exp(np.mean(np.log(errs)))
        widths = widths * (errs / gmean) ** (-gamma)
        widths *= (np.log(hi) - np.log(lo)) / widths.sum()
        nodes = np.exp(np.log(lo) + np.cumsum(widths)[:-1])

    _, r, sup_err = best
    try:
        offset, poles, residues = r.partial_fractions()
        ok = _validate(offset, poles, residues, lo)
    except ApproximationError:
        ok = False
    if not ok or not converged:
        # fallback: near-best rational interpolation at Chebyshev nodes
        r_fb, errs_fb = solve_at(_chebyshev_nodes(lo, hi, n_nodes))
        try:
            offset_fb, poles_fb, residues_fb = r_fb.partial_fractions()
            if _validate(offset_fb, poles_fb, residues_fb, lo) and (
                not ok or errs_fb.max() < sup_err
            ):
                offset, poles, residues = offset_fb, poles_fb, residues_fb
                sup_err = errs_fb.max()
                ok = True
        except ApproximationError:
            pass
    if not ok:
        raise ApproximationError(
            f"no admissible rational approximation for exponent {exponent} on [{lo:g}, {hi:g}]"
        )
    return RationalExpansion(
        exponent=exponent,
        lo=lo,
        hi=hi,
        offset=float(offset),
        poles=poles,
        residues=residues,
        sup_rel_error=float(sup_err),
        converged=converged,
    )
