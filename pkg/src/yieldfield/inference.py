"""MAP hyperparameter estimation for the latent Gaussian yield model.

The latent vector stacks the three mean-shifted AR(1) factor paths and the
residual-field representation; factor means are hyperparameters entering the
observation offset. The hyperparameter posterior log pi(theta) + log pi(y|theta)
is maximized by Nelder-Mead in an unconstrained parameterization, and the
decay rate can be estimated jointly through iterative linearization of the
nonlinear predictor A(lambda(lambda_tilde)) beta + u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaln

from .dataio import YieldPanel
from .errors import (
    ApproximationError,
    AssemblyError,
    ConvergenceError,
    DomainError,
    NumericalError,
    ValidationError,
)
from .fem import CoordMap, assemble, build_mesh_1d, build_mesh_2d, projection_matrix
from .gmrf import (
    GaussianPosterior,
    SparseFactor,
    SparseSymmetric,
    ar1_logdet,
    ar1_precision,
    block_diag,
    hyper_transform_ar1,
)
from .nsbasis import (
    LambdaPrior,
    gradient_matrix,
    lambda_from_latent,
    lambda_latent_gradient,
    observation_matrix,
)
from .spdefields import (
    FieldRepresentation,
    anisotropic_precision,
    kappa_from_range,
    nonstationary_precision,
    rational_precision,
    spatiotemporal_precision,
    stationary_precision,
    tau_from_sigma,
)
from .twostep import fit_ar1, ols_factors

FACTOR_NAMES = ("level", "slope", "curvature")
RESIDUAL_VARIANTS = ("none", "stationary", "nonstationary", "anisotropic", "spatiotemporal")
_SPATIAL = ("stationary", "nonstationary", "anisotropic")

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class PriorDescriptor:
    """Log prior density on the unconstrained scale, Jacobians included."""

    family: str
    params: tuple

    def log_density(self, theta: float) -> float:
        if self.family == "normal":
            mean, sd = self.params
            z = (theta - mean) / sd
            return -0.5 * z * z - math.log(sd) - 0.5 * math.log(2.0 * math.pi)
        if self.family == "gamma_precision":
            a, rate = self.params
            return a * math.log(rate) - gammaln(a) + a * theta - rate * math.exp(theta)
        if self.family == "pc_range":
            median, d = self.params
            lam = _LOG2 * median ** (d / 2.0)
            return (
                math.log(d / 2.0)
                + math.log(lam)
                - (d / 2.0) * theta
                - lam * math.exp(-(d / 2.0) * theta)
            )
        if self.family == "pc_sd":
            (median,) = self.params
            lam = _LOG2 / median
            return math.log(lam) - lam * math.exp(theta) + theta
        if self.family == "uniform_interval":
            s = 1.0 / (1.0 + math.exp(-theta))
            return math.log(s) + math.log1p(-s)
        raise ValidationError(f"unknown prior family {self.family!r}")


def _to_natural(transform: str, theta: float) -> float:
    if transform == "exp":
        return math.exp(theta)
    if transform == "logistic01":
        return 1.0 / (1.0 + math.exp(-theta))
    if transform == "interval13":
        return 1.0 + 2.0 / (1.0 + math.exp(-theta))
    return theta


@dataclass(frozen=True)
class HyperParam:
    name: str
    prior: PriorDescriptor
    transform: str
    init: float


@dataclass
class ModelSpec:
    """Configuration of one model variant."""

    trend: str = "bdns"
    residual: str = "none"
    lambda_mode: str = "fixed"
    lambda_value: float = 0.0609
    lambda_prior: LambdaPrior | None = None
    factor_set: tuple = FACTOR_NAMES
    alpha_spacetime: int = 1
    estimate_alpha: bool = True
    alpha_fixed: float = 2.0
    m_order: int = 2
    mesh_factor: float = 2.0
    mesh_extension: float = 0.2
    max_horizon: int = 12
    prior_overrides: dict = field(default_factory=dict)
    tag: str = ""

    def __post_init__(self):
        if not self.tag:
            self.tag = self.residual if self.trend == "bdns" else self.trend
        self.validate()

    def validate(self):
        if self.trend not in ("bdns", "two-step-baseline"):
            raise ValidationError(
                f"unknown trend {self.trend!r}; allowed: bdns, two-step-baseline"
            )
        if self.residual not in RESIDUAL_VARIANTS:
            raise ValidationError(
                f"unknown residual variant {self.residual!r}; allowed: "
                + ", ".join(RESIDUAL_VARIANTS)
            )
        if self.trend == "two-step-baseline" and self.residual != "none":
            raise ValidationError("the two-step baseline cannot carry a residual field")
        if self.lambda_mode not in ("fixed", "joint"):
            raise ValidationError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.lambda_mode == "joint":
            if self.trend != "bdns":
                raise ValidationError("joint lambda estimation requires the Bayesian trend")
            if self.lambda_prior is None:
                raise ValidationError("joint lambda estimation needs a LambdaPrior")
        if self.lambda_mode == "fixed" and self.lambda_value <= 0:
            raise ValidationError("fixed lambda must be positive")
        unknown = [f for f in self.factor_set if f not in FACTOR_NAMES]
        if unknown or not self.factor_set:
            raise ValidationError(f"bad factor set {self.factor_set!r}")
        if self.alpha_spacetime not in (1, 2):
            raise ValidationError("the dynamic variant supports alpha in {1, 2}")


def hyper_layout(spec: ModelSpec) -> list[HyperParam]:
    weak_gamma = PriorDescriptor("gamma_precision", (1.0, 5e-5))
    hp = [HyperParam("log_prec_noise", weak_gamma, "exp", 4.6)]
    for fname in spec.factor_set:
        hp.append(HyperParam(f"theta1_{fname}", weak_gamma, "exp", 2.0))
        hp.append(
            HyperParam(f"theta2_{fname}", PriorDescriptor("normal", (0.0, math.sqrt(10.0))), "logistic01", 2.0)
        )
    for fname in spec.factor_set:
        hp.append(HyperParam(f"mu_{fname}", PriorDescriptor("normal", (0.0, 100.0)), "identity", 0.0))

    std_norm = PriorDescriptor("normal", (0.0, 1.0))
    if spec.residual in ("stationary", "anisotropic"):
        diam = math.sqrt(2.0)
        hp.append(HyperParam("log_range", PriorDescriptor("pc_range", (diam / 3.0, 2)), "exp", math.log(diam / 3.0)))
        hp.append(HyperParam("log_sigma_field", PriorDescriptor("pc_sd", (0.3,)), "exp", math.log(0.3)))
        if spec.estimate_alpha:
            hp.append(HyperParam("alpha_logit", PriorDescriptor("uniform_interval", ()), "interval13", 0.0))
        if spec.residual == "anisotropic":
            hp.append(HyperParam("aniso_ratio", std_norm, "identity", 0.0))
            hp.append(HyperParam("aniso_angle", std_norm, "identity", 0.0))
    elif spec.residual == "nonstationary":
        diam = math.sqrt(2.0)
        hp.append(HyperParam("gamma0", PriorDescriptor("pc_range", (diam / 3.0, 2)), "exp", math.log(diam / 3.0)))
        hp.append(HyperParam("gamma1", PriorDescriptor("pc_sd", (0.3,)), "exp", math.log(0.3)))
        for k in (2, 3, 4, 5):
            hp.append(HyperParam(f"gamma{k}", std_norm, "identity", 0.0))
        if spec.estimate_alpha:
            hp.append(HyperParam("alpha_logit", PriorDescriptor("uniform_interval", ()), "interval13", 0.0))
    elif spec.residual == "spatiotemporal":
        hp.append(HyperParam("log_range_m", PriorDescriptor("pc_range", (1.0 / 3.0, 1)), "exp", math.log(1.0 / 3.0)))
        hp.append(HyperParam("log_sigma_st", PriorDescriptor("pc_sd", (0.3,)), "exp", math.log(0.3)))
        hp.append(HyperParam("log_gamma_t", PriorDescriptor("normal", (0.0, math.sqrt(10.0))), "exp", -1.4))

    out = []
    for h in hp:
        override = spec.prior_overrides.get(h.name)
        out.append(HyperParam(h.name, override, h.transform, h.init) if override else h)
    return out


@dataclass
class LatentGaussianModel:
    """One assembled linear-Gaussian model: y_eff = A x + e."""

    Q_prior: SparseSymmetric
    A: sp.csr_matrix
    Q_noise: sp.csc_matrix
    y: np.ndarray
    logdet_prior: float
    logdet_noise: float
    slices: dict
    offset: np.ndarray
    prec_noise: float
    blocks: list
    weights: np.ndarray

    @property
    def n_latent(self) -> int:
        return self.Q_prior.n


class _GramCache:
    """Cached cross-Gram matrices of observation blocks; the data part of
    Q_post is prec_e * sum_ij w_i w_j A_i^T A_j, so only scalars change per step."""

    def __init__(self, blocks):
        self.blocks = [sp.csr_matrix(b) for b in blocks]
        n = len(blocks)
        self.gram = [[None] * n for _ in range(n)]
        memo = {}
        for i in range(n):
            for j in range(i, n):
                key = (id(blocks[i]), id(blocks[j]))
                if key not in memo:
                    memo[key] = (self.blocks[i].T @ self.blocks[j]).tocsc()
                self.gram[i][j] = memo[key]

    def data_precision(self, weights, prec_noise) -> sp.csc_matrix:
        n = len(self.blocks)
        cells = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                cells[i][j] = (prec_noise * weights[i] * weights[j]) * self.gram[i][j]
                if j > i:
                    cells[j][i] = cells[i][j].T
        return sp.bmat(cells, format="csc")

    def rhs(self, weights, prec_noise, y) -> np.ndarray:
        return np.concatenate([prec_noise * w * (b.T @ y) for w, b in zip(weights, self.blocks)])


class WindowContext:
    """Per-window machinery reused across optimizer evaluations."""

    def __init__(self, spec: ModelSpec, panel: YieldPanel):
        spec.validate()
        self.spec = spec
        self.panel = panel
        self.T = panel.n_periods
        self.M = panel.n_maturities
        self.n_obs = self.T * self.M
        self.y = panel.yields.ravel()  # month-major
        self.layout = hyper_layout(spec)
        self.names = [h.name for h in self.layout]
        self.factor_cols = [FACTOR_NAMES.index(f) for f in spec.factor_set]
        self.n_factors = len(spec.factor_set)
        self.coord_map = CoordMap.for_window(self.T, panel.maturities)
        self._trend_cache = {}
        self._gram_cache = {}
        self.last_error = None
        self._init_field_machinery()

    # ------------------------------------------------------------------
    def _init_field_machinery(self):
        spec, panel = self.spec, self.panel
        self.mesh = None
        self.ops = None
        self.proj_field = None
        if spec.residual in _SPATIAL:
            t_span = self.coord_map.t_span
            horizon_pad = spec.max_horizon / t_span
            data_spacing_t = 1.0 / t_span
            log_m = np.log(panel.maturities.astype(float))
            spacing_m = np.median(np.diff(log_m)) / self.coord_map.log_m_span
            self.mesh = build_mesh_2d(
                (0.0, 1.0 + horizon_pad),
                (0.0, 1.0),
                resolution=(data_spacing_t / spec.mesh_factor, spacing_m / spec.mesh_factor),
                extension=spec.mesh_extension,
            )
            self.ops = assemble(self.mesh)
            t_idx = np.repeat(np.arange(1, self.T + 1), self.M)
            m_rep = np.tile(panel.maturities.astype(float), self.T)
            pts = self.coord_map.to_scaled(t_idx, m_rep)
            self.proj_field = projection_matrix(self.mesh, pts)
        elif spec.residual == "spatiotemporal":
            m_scaled = self.coord_map.scaled_maturity(panel.maturities.astype(float))
            spacing = np.median(np.diff(m_scaled))
            self.mesh = build_mesh_1d(
                (0.0, 1.0), resolution=spacing / spec.mesh_factor, extension=spec.mesh_extension
            )
            self.ops = assemble(self.mesh)
            proj1d = projection_matrix(self.mesh, m_scaled[:, None]).tocoo()
            n_m = self.mesh.n_vertices
            # one row per observation, embedded in its month block
            rows, cols, vals = [], [], []
            for t in range(self.T):
                rows.append(proj1d.row + t * self.M)
                cols.append(proj1d.col + t * n_m)
                vals.append(proj1d.data)
            self.proj_field = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n_obs, n_m * self.T),
            ).tocsr()

    # ------------------------------------------------------------------
    def loadings(self, lam: float) -> np.ndarray:
        """(M, n_factors) loading columns for the active factor set."""
        key = float(lam)
        if key not in self._trend_cache:
            L_full = observation_matrix(lam, self.panel.maturities).matrix
            L = L_full[:, self.factor_cols]
            rows = np.repeat(np.arange(self.n_obs), self.n_factors)
            t_of_obs = np.arange(self.n_obs) // self.M
            m_of_obs = np.arange(self.n_obs) % self.M
            cols = np.concatenate(
                [i * self.T + t_of_obs[:, None] for i in range(self.n_factors)], axis=1
            ).ravel()
            vals = L[m_of_obs][:, np.arange(self.n_factors)].ravel()
            A_trend = sp.coo_matrix(
                (vals, (rows, cols)), shape=(self.n_obs, self.n_factors * self.T)
            ).tocsr()
            self._trend_cache[key] = (L, A_trend)
        return self._trend_cache[key]

    def theta_dict(self, vec) -> dict:
        return dict(zip(self.names, np.asarray(vec, dtype=float)))

    def default_init(self) -> np.ndarray:
        """Data-driven starting point from the classical two-step estimates."""
        init = {h.name: h.init for h in self.layout}
        lam0 = (
            self.spec.lambda_value
            if self.spec.lambda_mode == "fixed"
            else self.spec.lambda_prior.median
        )
        try:
            ts = ols_factors(self.panel, lam0)
            paths = ts.factors[:, self.factor_cols]
            init["log_prec_noise"] = -math.log(max(ts.resid_var, 1e-8))
            for k, fname in enumerate(self.spec.factor_set):
                ar = fit_ar1(paths[:, k])
                phi = min(max(ar.slope, 0.05), 0.99)
                tau = 1.0 / max(ar.innov_var, 1e-8)
                init[f"theta1_{fname}"] = math.log(tau)
                init[f"theta2_{fname}"] = math.log(phi) - math.log1p(-phi)
                init[f"mu_{fname}"] = float(np.mean(paths[:, k]))
        except (DomainError, ValidationError):
            pass
        return np.array([init[n] for n in self.names])

    # ------------------------------------------------------------------
    def field_rep(self, th: dict) -> FieldRepresentation | None:
        spec = self.spec
        if spec.residual == "none":
            return None
        if spec.residual in ("stationary", "anisotropic"):
            alpha = (
                _to_natural("interval13", th["alpha_logit"])
                if spec.estimate_alpha
                else spec.alpha_fixed
            )
            nu = alpha - 1.0
            if nu <= 0:
                raise DomainError("alpha must exceed 1 on the plane")
            kappa = kappa_from_range(math.exp(th["log_range"]), nu)
            sigma = math.exp(th["log_sigma_field"])
            tau = tau_from_sigma(sigma, kappa, alpha, d=2)
            if spec.residual == "stationary":
                return (
                    stationary_precision(self.ops, kappa, tau, alpha, m_order=spec.m_order, mesh=self.mesh)
                    if abs(alpha - round(alpha)) < 1e-12
                    else rational_precision(self.ops, kappa, tau, alpha, m_order=spec.m_order, mesh=self.mesh)
                )
            return anisotropic_precision(
                self.mesh,
                kappa,
                tau,
                alpha,
                log_ratio=th["aniso_ratio"],
                angle=th["aniso_angle"],
                m_order=spec.m_order,
            )
        if spec.residual == "nonstationary":
            alpha = (
                _to_natural("interval13", th["alpha_logit"])
                if spec.estimate_alpha
                else spec.alpha_fixed
            )
            gam = np.array([th[f"gamma{k}"] for k in range(6)])
            return nonstationary_precision(self.mesh, gam, alpha, m_order=spec.m_order)
        # dynamic variant
        alpha = spec.alpha_spacetime
        nu_m = alpha - 0.5
        kappa = kappa_from_range(math.exp(th["log_range_m"]), nu_m)
        return spatiotemporal_precision(
            self.ops,
            self.T,
            kappa=kappa,
            gamma_t=math.exp(th["log_gamma_t"]),
            sigma_noise=math.exp(th["log_sigma_st"]),
            alpha=alpha,
            mesh=self.mesh,
        )

    # ------------------------------------------------------------------
    def build(
        self,
        theta: dict,
        lam: float,
        extra_col: sp.csr_matrix | None = None,
        y_shift: np.ndarray | None = None,
    ) -> LatentGaussianModel:
        spec = self.spec
        T = self.T
        L, A_trend = self.loadings(lam)
        prec_noise = math.exp(theta["log_prec_noise"])

        prior_blocks = []
        logdet = 0.0
        slices = {}
        pos = 0
        ar_blocks = []
        for fname in spec.factor_set:
            tau, phi = hyper_transform_ar1(theta[f"theta1_{fname}"], theta[f"theta2_{fname}"])
            ar_blocks.append(ar1_precision(T, tau, phi))
            logdet += ar1_logdet(T, tau, phi)
            slices[f"factor_{fname}"] = slice(pos, pos + T)
            pos += T
        Q_trend = block_diag(ar_blocks)
        prior_blocks.append(Q_trend)
        slices["trend"] = slice(0, pos)

        rep = self.field_rep(theta)
        blocks = [A_trend]
        weights = [1.0]
        if rep is not None:
            prior_blocks.append(rep.precision)
            logdet += SparseFactor(rep.precision).logdet
            slices["field"] = slice(pos, pos + rep.n_latent)
            pos += rep.n_latent
            if rep.temporal is not None:
                blocks.append(self.proj_field)
                weights.append(1.0)
            else:
                for w in rep.term_weights:
                    blocks.append(self.proj_field)
                    weights.append(float(w))
        if extra_col is not None:
            prior_blocks.append(SparseSymmetric.identity(1))
            slices["lambda_tilde"] = slice(pos, pos + 1)
            pos += 1
            blocks.append(extra_col)
            weights.append(1.0)

        Q_prior = block_diag(prior_blocks)
        mu_vec = np.array([theta[f"mu_{f}"] for f in spec.factor_set])
        offset = np.tile(L @ mu_vec, T)
        y_use = self.y - offset
        if y_shift is not None:
            y_use = y_use + y_shift

        A = sp.hstack([w * b for w, b in zip(weights, blocks)], format="csr")
        if A.shape != (self.n_obs, pos):
            raise AssemblyError(f"observation matrix {A.shape} != ({self.n_obs}, {pos})")
        Q_noise = sp.diags(np.full(self.n_obs, prec_noise)).tocsc()
        return LatentGaussianModel(
            Q_prior=Q_prior,
            A=A,
            Q_noise=Q_noise,
            y=y_use,
            logdet_prior=logdet,
            logdet_noise=self.n_obs * theta["log_prec_noise"],
            slices=slices,
            offset=offset,
            prec_noise=prec_noise,
            blocks=blocks,
            weights=np.asarray(weights),
        )

    def solve(self, lgm: LatentGaussianModel) -> GaussianPosterior:
        """Posterior and log marginal likelihood using cached Gram blocks."""
        key = tuple(id(b) for b in lgm.blocks)
        cache = self._gram_cache.get(key)
        if cache is None:
            cache = _GramCache(lgm.blocks)
            self._gram_cache = {key: cache}
        Q_post = (cache.data_precision(lgm.weights, lgm.prec_noise) + lgm.Q_prior.mat).tocsc()
        factor = SparseFactor(Q_post)
        mu = factor.solve(cache.rhs(lgm.weights, lgm.prec_noise, lgm.y))
        resid = lgm.y - lgm.A @ mu
        log_ml = (
            -0.5 * self.n_obs * math.log(2.0 * math.pi)
            + 0.5 * lgm.logdet_prior
            + 0.5 * lgm.logdet_noise
            - 0.5 * factor.logdet
            - 0.5 * float(mu @ (lgm.Q_prior.mat @ mu))
            - 0.5 * lgm.prec_noise * float(resid @ resid)
        )
        return GaussianPosterior(mean=mu, factor=factor, log_marginal=log_ml)

    # ------------------------------------------------------------------
    def log_prior(self, vec) -> float:
        return float(sum(h.prior.log_density(v) for h, v in zip(self.layout, vec)))

    def neg_log_posterior(self, vec, lam=None, extra_col=None, y_shift=None) -> float:
        lam = self.spec.lambda_value if lam is None else lam
        try:
            lgm = self.build(self.theta_dict(vec), lam, extra_col=extra_col, y_shift=y_shift)
            post = self.solve(lgm)
        except (NumericalError, ApproximationError, DomainError, OverflowError) as exc:
            self.last_error = exc
            return np.inf
        return -(self.log_prior(vec) + post.log_marginal)


def assemble_lgm(spec: ModelSpec, panel: YieldPanel, lambda_value: float, theta: dict | None = None) -> LatentGaussianModel:
    """Assemble the linear-Gaussian model at fixed hyperparameters."""
    ctx = WindowContext(spec, panel)
    vec = ctx.default_init()
    th = ctx.theta_dict(vec)
    if theta:
        th.update(theta)
    return ctx.build(th, lambda_value)


def marginal_log_likelihood(spec: ModelSpec, panel: YieldPanel, theta: dict, lambda_value: float | None = None) -> float:
    ctx = WindowContext(spec, panel)
    lam = spec.lambda_value if lambda_value is None else lambda_value
    vec = np.array([theta[n] for n in ctx.names])
    lgm = ctx.build(ctx.theta_dict(vec), lam)
    return ctx.solve(lgm).log_marginal


def neg_log_posterior(theta_vec, spec: ModelSpec, panel: YieldPanel) -> float:
    """Spec-level convenience wrapper; heavy callers reuse a WindowContext."""
    return WindowContext(spec, panel).neg_log_posterior(np.asarray(theta_vec, dtype=float))


@dataclass
class FitResult:
    """MAP fit: hyperparameters, latent posterior, and forecasting hooks."""

    spec: ModelSpec
    theta: dict
    natural: dict
    posterior: GaussianPosterior
    slices: dict
    log_posterior: float
    lambda_hat: float
    lambda_sd: float | None
    trace: dict
    ctx: WindowContext
    field_rep: FieldRepresentation | None
    lgm: LatentGaussianModel

    @property
    def factor_means(self) -> np.ndarray:
        """(T, n_factors) posterior factor paths, means added back."""
        T = self.ctx.T
        out = np.empty((T, self.ctx.n_factors))
        for k, fname in enumerate(self.spec.factor_set):
            sl = self.slices[f"factor_{fname}"]
            out[:, k] = self.posterior.mean[sl] + self.theta[f"mu_{fname}"]
        return out

    def factor_params(self) -> list[dict]:
        out = []
        for fname in self.spec.factor_set:
            tau, phi = hyper_transform_ar1(
                self.theta[f"theta1_{fname}"], self.theta[f"theta2_{fname}"]
            )
            out.append(
                {"name": fname, "tau": tau, "phi": phi, "sigma2": 1.0 / tau,
                 "mu": self.theta[f"mu_{fname}"]}
            )
        return out

    @property
    def sigma_e2(self) -> float:
        return math.exp(-self.theta["log_prec_noise"])

    def gradient_norm(self, eps: float = 1e-4) -> float:
        """Finite-difference norm of the log-posterior gradient at theta_hat."""
        vec = np.array([self.theta[n] for n in self.ctx.names])
        grad = np.empty(vec.size)
        for k in range(vec.size):
            hi, lo = vec.copy(), vec.copy()
            hi[k] += eps
            lo[k] -= eps
            grad[k] = (self.ctx.neg_log_posterior(hi) - self.ctx.neg_log_posterior(lo)) / (2 * eps)
        return float(np.linalg.norm(grad))

    def to_json_dict(self) -> dict:
        return {
            "model": self.spec.tag,
            "theta": {k: float(v) for k, v in self.theta.items()},
            "natural": {k: float(v) for k, v in self.natural.items()},
            "lambda": {"estimate": self.lambda_hat, "sd": self.lambda_sd,
                       "mode": self.spec.lambda_mode},
            "log_posterior": self.log_posterior,
            "latent_dimension": int(self.posterior.n),
            "convergence": self.trace,
        }

    def save_sidecar(self, path):
        """Binary posterior sidecar: dimension, mean, and the sparse factor triplets."""
        M = self.posterior.factor.reassembled().tocoo()
        np.savez_compressed(
            path,
            dimension=np.array([self.posterior.n]),
            mean=self.posterior.mean,
            factor_row=M.row,
            factor_col=M.col,
            factor_val=M.data,
        )


def _natural_params(ctx: WindowContext, vec) -> dict:
    out = {}
    for h, v in zip(ctx.layout, vec):
        out[h.name] = _to_natural(h.transform, float(v))
    # derived quantities in reporting units
    for fname in ctx.spec.factor_set:
        t1 = float(vec[ctx.names.index(f"theta1_{fname}")])
        t2 = float(vec[ctx.names.index(f"theta2_{fname}")])
        tau, phi = hyper_transform_ar1(t1, t2)
        out[f"tau_{fname}"] = tau
        out[f"phi_{fname}"] = phi
    out["sigma_e"] = math.exp(-0.5 * float(vec[ctx.names.index("log_prec_noise")]))
    if ctx.spec.residual == "spatiotemporal":
        out["kappa"] = kappa_from_range(out["log_range_m"], ctx.spec.alpha_spacetime - 0.5)
    elif ctx.spec.residual in ("stationary", "anisotropic"):
        alpha = out["alpha_logit"] if ctx.spec.estimate_alpha else ctx.spec.alpha_fixed
        out["kappa"] = kappa_from_range(out["log_range"], alpha - 1.0)
    return out


def _run_simplex(ctx, objective, x0, maxfev, restarts=1):
    best = None
    trace = {"evaluations": 0, "iterations": 0, "restarts": 0}
    x_start = np.asarray(x0, dtype=float)
    for attempt in range(restarts + 1):
        res = minimize(
            objective,
            x_start,
            method="Nelder-Mead",
            options=dict(maxfev=maxfev, xatol=1e-5, fatol=1e-8, adaptive=True),
        )
        trace["evaluations"] += int(res.nfev)
        trace["iterations"] += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
        x_start = np.asarray(best.x, dtype=float)
        if attempt < restarts:
            trace["restarts"] += 1
    if not np.isfinite(best.fun):
        raise ConvergenceError(
            "optimizer never found a finite objective value", trajectory=trace
        )
    simplex = best.final_simplex[0]
    trace["final_simplex_diameter"] = float(
        np.max(np.linalg.norm(simplex - simplex[0], axis=1))
    )
    trace["objective"] = float(best.fun)
    return best, trace


def fit_map(
    spec: ModelSpec,
    panel: YieldPanel,
    init: np.ndarray | dict | None = None,
    maxfev: int = 2000,
    restarts: int = 1,
) -> FitResult:
    """MAP estimation by Nelder-Mead with one restart from the incumbent."""
    ctx = WindowContext(spec, panel)
    if isinstance(init, dict):
        base = ctx.default_init()
        x0 = np.array([init.get(n, b) for n, b in zip(ctx.names, base)])
    else:
        x0 = ctx.default_init() if init is None else np.asarray(init, dtype=float)
    res, trace = _run_simplex(ctx, ctx.neg_log_posterior, x0, maxfev, restarts)
    vec = res.x
    th = ctx.theta_dict(vec)
    lgm = ctx.build(th, spec.lambda_value)
    post = ctx.solve(lgm)
    return FitResult(
        spec=spec,
        theta=th,
        natural=_natural_params(ctx, vec),
        posterior=post,
        slices=lgm.slices,
        log_posterior=-float(res.fun),
        lambda_hat=spec.lambda_value,
        lambda_sd=None,
        trace=trace,
        ctx=ctx,
        field_rep=ctx.field_rep(th),
        lgm=lgm,
    )


def _eta_nonlinear(ctx: WindowContext, th: dict, lam: float, x_trend, x_field):
    L, A_trend = ctx.loadings(lam)
    mu_vec = np.array([th[f"mu_{f}"] for f in ctx.spec.factor_set])
    eta = np.tile(L @ mu_vec, ctx.T) + A_trend @ x_trend
    if x_field is not None and ctx.proj_field is not None:
        eta = eta + ctx.proj_field @ x_field
    return eta


MAX_OUTER_ITER = 50
_STEP_HALVINGS = 10


def fit_joint_lambda(
    spec: ModelSpec,
    panel: YieldPanel,
    init: np.ndarray | None = None,
    maxfev_first: int = 600,
    maxfev_inner: int = 60,
) -> FitResult:
    """Iterative-linearization joint estimation of the decay rate.

    The latent vector gains lambda_tilde ~ N(0, 1); each outer iteration
    linearizes eta = A(lambda(lambda_tilde)) beta + u at the current latent
    mean, refits theta on the linearized model (warm started), and
    step-halves if the joint latent log density would decrease.
    """
    if spec.lambda_mode != "joint":
        raise ValidationError("fit_joint_lambda requires lambda_mode='joint'")
    prior = spec.lambda_prior
    ctx = WindowContext(spec, panel)
    n_trend = ctx.n_factors * ctx.T

    vec = ctx.default_init() if init is None else np.asarray(init, dtype=float)
    lam_tilde = 0.0
    x_trend = np.zeros(n_trend)
    x_field = None
    field_dim = 0

    eta_old = None
    trajectory = []
    trace_all = {"outer_iterations": 0, "theta_evaluations": 0}
    post = None
    lgm = None
    converged = False

    for outer in range(MAX_OUTER_ITER):
        lam0 = lambda_from_latent(lam_tilde, prior)
        dlam = lambda_latent_gradient(lam_tilde, prior)
        th = ctx.theta_dict(vec)

        L, A_trend = ctx.loadings(lam0)
        dL = gradient_matrix(lam0, panel.maturities)[:, ctx.factor_cols]
        mu_vec = np.array([th[f"mu_{f}"] for f in spec.factor_set])
        beta_mat = x_trend.reshape(ctx.n_factors, ctx.T).T  # (T, n_factors)
        # d(eta)/d(lambda_tilde) at the expansion point, one value per observation
        sens = ((beta_mat + mu_vec[None, :]) @ dL.T).ravel() * dlam
        col = sp.csr_matrix(sens[:, None])

        # exactness at the expansion point: the lambda part of the linearization
        # contributes sens * (lt - lt0), so +sens*lt0 moves to the data side
        y_shift = sens * lam_tilde

        def objective(v):
            return ctx.neg_log_posterior(v, lam=lam0, extra_col=col, y_shift=y_shift)

        fev = maxfev_first if outer == 0 else maxfev_inner
        res, tr = _run_simplex(ctx, objective, vec, fev, restarts=0)
        vec = res.x
        th = ctx.theta_dict(vec)
        trace_all["theta_evaluations"] += tr["evaluations"]

        lgm = ctx.build(th, lam0, extra_col=col, y_shift=y_shift)
        post = ctx.solve(lgm)
        if field_dim == 0 and "field" in lgm.slices:
            field_dim = lgm.slices["field"].stop - lgm.slices["field"].start
        if field_dim and x_field is None:
            x_field = np.zeros(field_dim)

        new_trend = post.mean[lgm.slices["trend"]]
        new_field = post.mean[lgm.slices["field"]] if "field" in lgm.slices else None
        new_lt = float(post.mean[lgm.slices["lambda_tilde"]][0])

        # step-halving on the exact (nonlinear) joint latent density
        def joint_score(bt, fl, lt):
            lam_x = lambda_from_latent(lt, prior)
            eta = _eta_nonlinear(ctx, th, lam_x, bt, fl)
            r = ctx.y - eta
            x_all = [bt] if fl is None else [bt, fl]
            x_all = np.concatenate(x_all + [[lt]])
            quad = float(x_all @ (lgm.Q_prior.mat @ x_all))
            return -0.5 * quad - 0.5 * lgm.prec_noise * float(r @ r)

        score_old = joint_score(x_trend, x_field, lam_tilde)
        step = 1.0
        for _ in range(_STEP_HALVINGS):
            cand_t = x_trend + step * (new_trend - x_trend)
            cand_f = None if not field_dim else x_field + step * (new_field - x_field)
            cand_l = lam_tilde + step * (new_lt - lam_tilde)
            if joint_score(cand_t, cand_f, cand_l) >= score_old:
                break
            step *= 0.5
        x_trend = x_trend + step * (new_trend - x_trend)
        if field_dim:
            x_field = x_field + step * (new_field - x_field)
        lam_tilde = lam_tilde + step * (new_lt - lam_tilde)

        eta_new = _eta_nonlinear(
            ctx, th, lambda_from_latent(lam_tilde, prior), x_trend, x_field
        )
        trajectory.append(
            {"iteration": outer, "lambda": lambda_from_latent(lam_tilde, prior), "step": step}
        )
        if eta_old is not None:
            change = float(np.max(np.abs(eta_new - eta_old)))
            trajectory[-1]["eta_change"] = change
            if change < 1e-6 * (1.0 + float(np.max(np.abs(eta_old)))):
                converged = True
        eta_old = eta_new
        trace_all["outer_iterations"] = outer + 1
        if converged:
            break

    if not converged:
        raise ConvergenceError(
            f"joint lambda estimation did not converge in {MAX_OUTER_ITER} iterations",
            trajectory=trajectory,
        )

    lam_hat = lambda_from_latent(lam_tilde, prior)
    lt_sl = lgm.slices["lambda_tilde"]
    lt_var = float(post.marginal_variances([lt_sl.start])[0])
    lam_sd = math.sqrt(max(lt_var, 0.0)) * lambda_latent_gradient(lam_tilde, prior)
    trace_all["trajectory"] = trajectory
    return FitResult(
        spec=spec,
        theta=ctx.theta_dict(vec),
        natural=_natural_params(ctx, vec),
        posterior=post,
        slices=lgm.slices,
        log_posterior=-float(
            ctx.neg_log_posterior(vec, lam=lam_hat)
        ),
        lambda_hat=lam_hat,
        lambda_sd=lam_sd,
        trace=trace_all,
        ctx=ctx,
        field_rep=ctx.field_rep(ctx.theta_dict(vec)),
        lgm=lgm,
    )
