from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln, log_ndtr

from app.config import ModelConfig
from app.errors import DimensionError, DomainError, IndefiniteCovarianceError
from app.kernel import CovMatrix, Hyperparams, lengthscale_distances, se_ard_cov
from app.spline_basis import SplineBasis

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))
N_RHO = 4


@dataclass(frozen=True)
class ConstraintConfig:
    """Which virtual observations are imposed.

    The zero anchor at the first time point is always present; ``saturation``
    adds f′ = 0 at the last time point and ``monotone`` marks the (t, i)
    grid points that carry a probit sign observation.
    """

    saturation: bool = True
    monotone: Optional[np.ndarray] = None
    v: float = 1e-4
    soft: bool = False
    sigma_eps: float = 1e-3

    @classmethod
    def from_model_config(cls, config: ModelConfig, n_times: int, n_locations: int) -> "ConstraintConfig":
        monotone = np.ones((n_times, n_locations), dtype=bool) if config.monotonicity else None
        return cls(
            saturation=config.saturation,
            monotone=monotone,
            v=config.v,
            soft=config.soft_constraints,
            sigma_eps=config.sigma_eps,
        )

    @property
    def monotonicity(self) -> bool:
        return self.monotone is not None and bool(np.any(self.monotone))


@dataclass(frozen=True)
class LatentState:
    """Spline coefficients ``b`` (K×N), free linear coefficients if any, and hyperparameters."""

    b: np.ndarray
    hyper: Hyperparams
    beta_free: Optional[np.ndarray] = None


def eliminate_constraints(
    b: np.ndarray,
    basis: SplineBasis,
    *,
    saturation: bool = True,
    slope: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Linear coefficients β (2×N) that make f(t_first) = 0 and, with saturation, f′(t_last) = 0."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] != basis.n_knots:
        raise DimensionError(f"b must have K={basis.n_knots} rows.")
    if saturation:
        beta2 = -basis.dW[-1] @ b
    else:
        if slope is None:
            raise DimensionError("A free slope is required when the saturation constraint is off.")
        beta2 = np.broadcast_to(np.asarray(slope, dtype=float), (b.shape[1],)).copy()
    beta1 = -beta2 * basis.times[0] - basis.W[0] @ b
    return np.vstack([beta1, beta2])


def curves(beta: np.ndarray, b: np.ndarray, basis: SplineBasis) -> Tuple[np.ndarray, np.ndarray]:
    """Latent values f and slopes f′, both T×N."""
    return basis.H @ beta + basis.W @ b, beta[1] + basis.dW @ b


def log_phi_ratio(z: np.ndarray) -> np.ndarray:
    """φ(z)/Φ(z), the derivative of log Φ(z), stable in the far left tail."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    tail = z < -20.0
    body = ~tail
    out[body] = np.exp(-0.5 * z[body] ** 2 - 0.5 * LOG_2PI - log_ndtr(z[body]))
    zt = z[tail]
    inv2 = 1.0 / zt**2
    out[tail] = -zt / (1.0 - inv2 + 3.0 * inv2**2 - 15.0 * inv2**3)
    return out


def _likelihood_terms(
    Y: np.ndarray,
    f: np.ndarray,
    fp: np.ndarray,
    sigma: float,
    mask: np.ndarray,
    constraints: ConstraintConfig,
) -> Tuple[float, np.ndarray, np.ndarray, float]:
    """Log-likelihood and its gradients with respect to f, f′ and log σ."""
    if not sigma > 0:
        raise DomainError("Observation noise sigma must be positive.")
    resid = np.where(mask, Y - f, 0.0)
    n_obs = float(mask.sum())
    sq = float(np.sum(resid**2))
    value = -0.5 * n_obs * LOG_2PI - n_obs * np.log(sigma) - 0.5 * sq / sigma**2
    g_f = resid / sigma**2
    g_fp = np.zeros_like(fp)
    g_logsigma = -n_obs + sq / sigma**2

    if constraints.monotonicity:
        z = fp / constraints.v
        value += float(np.sum(log_ndtr(z[constraints.monotone])))
        g_fp += np.where(constraints.monotone, log_phi_ratio(z) / constraints.v, 0.0)

    if constraints.soft:
        eps2 = constraints.sigma_eps**2
        n_series = f.shape[1]
        value += -0.5 * n_series * (LOG_2PI + np.log(eps2)) - 0.5 * float(np.sum(f[0] ** 2)) / eps2
        g_f[0] -= f[0] / eps2
        if constraints.saturation:
            value += -0.5 * n_series * (LOG_2PI + np.log(eps2)) - 0.5 * float(np.sum(fp[-1] ** 2)) / eps2
            g_fp[-1] -= fp[-1] / eps2
    return value, g_f, g_fp, g_logsigma


def default_mask(n_times: int, n_locations: int) -> np.ndarray:
    mask = np.ones((n_times, n_locations), dtype=bool)
    mask[0] = False
    return mask


def implied_beta(
    b: np.ndarray,
    basis: SplineBasis,
    constraints: ConstraintConfig,
    beta_free: Optional[np.ndarray] = None,
) -> np.ndarray:
    if constraints.soft:
        if beta_free is None or beta_free.shape[0] != 2:
            raise DimensionError("Soft constraints need both linear coefficients as free parameters.")
        return beta_free
    slope = None if constraints.saturation else (None if beta_free is None else beta_free[-1])
    return eliminate_constraints(b, basis, saturation=constraints.saturation, slope=slope)


def log_likelihood(
    Y: np.ndarray,
    b: np.ndarray,
    hyper: Hyperparams,
    basis: SplineBasis,
    constraints: ConstraintConfig,
    *,
    beta_free: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Gaussian terms off the anchor plus probit sign terms on the monotonicity set."""
    Y = np.asarray(Y, dtype=float)
    mask = default_mask(*Y.shape) if mask is None else mask & default_mask(*Y.shape)
    beta = implied_beta(b, basis, constraints, beta_free)
    f, fp = curves(beta, b, basis)
    value, _, _, _ = _likelihood_terms(Y, f, fp, hyper.sigma, mask, constraints)
    return value


def _half_normal(x: np.ndarray, scale: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(LOG_2 - 0.5 * LOG_2PI - np.log(scale) - 0.5 * (x / scale) ** 2))


def _gamma(x: np.ndarray, shape: float, rate: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x))


def gp_log_prior(b: np.ndarray, alpha_rows: np.ndarray, C: CovMatrix) -> float:
    """Σ_k log N(b_k | 0, α_k·C)."""
    n = C.size
    quad = np.sum(b.T * C.solve(b.T), axis=0)
    return float(np.sum(-0.5 * n * LOG_2PI - 0.5 * n * np.log(alpha_rows) - 0.5 * C.logdet() - 0.5 * quad / alpha_rows))


def log_prior(
    b: np.ndarray,
    hyper: Hyperparams,
    C: CovMatrix,
    priors: Optional[ModelConfig] = None,
    *,
    beta_free: Optional[np.ndarray] = None,
) -> float:
    """GP prior on coefficient rows plus half-normal, gamma and (free) β priors."""
    priors = priors or ModelConfig()
    b = np.asarray(b, dtype=float)
    if C.size != b.shape[1]:
        raise DimensionError("Covariance size must equal the number of series.")
    value = gp_log_prior(b, hyper.alpha_rows(b.shape[0]), C)
    value += _half_normal(hyper.alpha, priors.alpha_prior_scale)
    value += _half_normal(hyper.sigma, priors.sigma_prior_scale)
    value += _gamma(hyper.rho, priors.rho_prior_shape, priors.rho_prior_rate)
    if beta_free is not None:
        scale = priors.beta_prior_scale
        value += float(np.sum(-0.5 * LOG_2PI - np.log(scale) - 0.5 * (beta_free / scale) ** 2))
    return value


@dataclass(frozen=True)
class ParameterLayout:
    """Packing of the unconstrained vector: b, free β rows, log α, log ρ, log σ."""

    n_knots: int
    n_locations: int
    beta_rows: int = 0
    n_alpha: int = 1
    fixed_hyper: Optional[Hyperparams] = None

    @property
    def n_b(self) -> int:
        return self.n_knots * self.n_locations

    @property
    def n_beta(self) -> int:
        return self.beta_rows * self.n_locations

    @property
    def n_hyper(self) -> int:
        return 0 if self.fixed_hyper is not None else self.n_alpha + N_RHO + 1

    @property
    def size(self) -> int:
        return self.n_b + self.n_beta + self.n_hyper

    @property
    def names(self) -> List[str]:
        names = [f"b[{k + 1},{i + 1}]" for k in range(self.n_knots) for i in range(self.n_locations)]
        beta_labels = ["beta1", "beta2"][2 - self.beta_rows :]
        names += [f"{label}[{i + 1}]" for label in beta_labels for i in range(self.n_locations)]
        if self.fixed_hyper is None:
            names += ["alpha"] if self.n_alpha == 1 else [f"alpha[{k + 1}]" for k in range(self.n_alpha)]
            names += [f"rho[{d + 1}]" for d in range(N_RHO)] + ["sigma"]
        return names

    @property
    def log_slice(self) -> slice:
        return slice(self.n_b + self.n_beta, self.size)

    def unpack(self, theta: np.ndarray) -> LatentState:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DimensionError(f"Expected a parameter vector of length {self.size}, got {theta.shape}.")
        b = theta[: self.n_b].reshape(self.n_knots, self.n_locations)
        beta = theta[self.n_b : self.n_b + self.n_beta].reshape(self.beta_rows, self.n_locations) if self.beta_rows else None
        if self.fixed_hyper is not None:
            return LatentState(b=b, hyper=self.fixed_hyper, beta_free=beta)
        logs = theta[self.log_slice]
        hyper = Hyperparams(
            alpha=np.exp(logs[: self.n_alpha]),
            rho=np.exp(logs[self.n_alpha : self.n_alpha + N_RHO]),
            sigma=np.exp(logs[-1]),
        )
        return LatentState(b=b, hyper=hyper, beta_free=beta)

    def pack(self, state: LatentState) -> np.ndarray:
        parts = [np.asarray(state.b, dtype=float).ravel()]
        if self.beta_rows:
            parts.append(np.asarray(state.beta_free, dtype=float).ravel())
        if self.fixed_hyper is None:
            hyper = state.hyper
            alpha = hyper.alpha_rows(self.n_knots) if self.n_alpha > 1 else hyper.alpha[:1]
            parts.append(np.log(alpha))
            parts.append(np.log(hyper.rho))
            parts.append([np.log(hyper.sigma)])
        return np.concatenate(parts)

    def constrain(self, theta: np.ndarray) -> np.ndarray:
        """Natural-scale values in ``names`` order."""
        out = np.array(theta, dtype=float, copy=True)
        out[..., self.log_slice] = np.exp(out[..., self.log_slice])
        return out

    def unconstrain(self, natural: np.ndarray) -> np.ndarray:
        out = np.array(natural, dtype=float, copy=True)
        out[..., self.log_slice] = np.log(out[..., self.log_slice])
        return out


class FadingModel:
    """Constrained log-posterior over a dataset, with analytic gradient.

    ``X`` are standardized inputs and ``mask`` marks which noisy observations
    enter the likelihood (the anchor row never does). With ``fixed_hyper``
    only ``b`` (and free β) are sampled.
    """

    def __init__(
        self,
        Y: np.ndarray,
        X: np.ndarray,
        basis: SplineBasis,
        config: Optional[ModelConfig] = None,
        *,
        constraints: Optional[ConstraintConfig] = None,
        mask: Optional[np.ndarray] = None,
        fixed_hyper: Optional[Hyperparams] = None,
    ) -> None:
        self.Y = np.asarray(Y, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.basis = basis
        self.config = config or ModelConfig()
        n_times, n_locations = self.Y.shape
        if n_times != basis.n_times:
            raise DimensionError(f"Y has {n_times} time points but the basis has {basis.n_times}.")
        if self.X.shape[0] != n_locations:
            raise DimensionError("X must have one row per series.")
        self.constraints = constraints or ConstraintConfig.from_model_config(self.config, n_times, n_locations)
        base = default_mask(n_times, n_locations)
        self.mask = base if mask is None else (np.asarray(mask, dtype=bool) & base)
        if self.constraints.soft:
            beta_rows = 2
        else:
            beta_rows = 0 if self.constraints.saturation else 1
        self.layout = ParameterLayout(
            n_knots=basis.n_knots,
            n_locations=n_locations,
            beta_rows=beta_rows,
            n_alpha=basis.n_knots if self.config.per_knot_alpha else 1,
            fixed_hyper=fixed_hyper,
        )
        self._distances = lengthscale_distances(self.X, N_RHO)
        self._fixed_cov = se_ard_cov(self.X, fixed_hyper.rho) if fixed_hyper is not None else None

    @property
    def dim(self) -> int:
        return self.layout.size

    @property
    def param_names(self) -> List[str]:
        return self.layout.names

    def covariance(self, hyper: Hyperparams) -> CovMatrix:
        return self._fixed_cov if self._fixed_cov is not None else se_ard_cov(self.X, hyper.rho)

    def beta(self, state: LatentState) -> np.ndarray:
        return implied_beta(state.b, self.basis, self.constraints, state.beta_free)

    def latent(self, state: LatentState) -> Tuple[np.ndarray, np.ndarray]:
        return curves(self.beta(state), state.b, self.basis)

    def log_density(self, theta: np.ndarray) -> float:
        return self.log_posterior_grad(theta)[0]

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.log_posterior_grad(theta)

    def log_posterior_grad(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Log-posterior (with log-transform Jacobians) and its gradient in unconstrained space.

        Returns ``(-inf, 0)`` where the density cannot be evaluated; the
        sampler treats that as a divergence.
        """
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                value, grad = self._evaluate(np.asarray(theta, dtype=float))
        except (DomainError, IndefiniteCovarianceError, FloatingPointError, OverflowError):
            return -np.inf, np.zeros(self.dim)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return value, grad

    def _evaluate(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        layout, basis, cfg = self.layout, self.basis, self.config
        state = layout.unpack(theta)
        b, hyper = state.b, state.hyper
        beta = self.beta(state)
        f, fp = curves(beta, b, basis)

        value, g_f, g_fp, g_logsigma = _likelihood_terms(self.Y, f, fp, hyper.sigma, self.mask, self.constraints)

        g_b = basis.W.T @ g_f + basis.dW.T @ g_fp
        g_beta1 = g_f.sum(axis=0)
        g_beta2 = basis.times @ g_f + g_fp.sum(axis=0)
        g_beta_free = None
        if self.constraints.soft:
            g_beta_free = np.vstack([g_beta1, g_beta2])
        else:
            g_b -= np.outer(basis.W[0], g_beta1)
            g_beta2 = g_beta2 - basis.times[0] * g_beta1
            if self.constraints.saturation:
                g_b -= np.outer(basis.dW[-1], g_beta2)
            else:
                g_beta_free = g_beta2[None, :]

        if state.beta_free is not None:
            scale = cfg.beta_prior_scale
            value += float(np.sum(-0.5 * LOG_2PI - np.log(scale) - 0.5 * (state.beta_free / scale) ** 2))
            g_beta_free = g_beta_free - state.beta_free / scale**2

        cov = self.covariance(hyper)
        alpha_rows = hyper.alpha_rows(basis.n_knots)
        solved = cov.solve(b.T)
        quad = np.sum(b.T * solved, axis=0)
        n = cov.size
        value += float(np.sum(-0.5 * n * LOG_2PI - 0.5 * n * np.log(alpha_rows) - 0.5 * cov.logdet() - 0.5 * quad / alpha_rows))
        g_b -= solved.T / alpha_rows[:, None]

        grad = np.empty(self.dim)
        grad[: layout.n_b] = g_b.ravel()
        if layout.n_beta:
            grad[layout.n_b : layout.n_b + layout.n_beta] = g_beta_free.ravel()
        if layout.fixed_hyper is not None:
            return value, grad

        g_logalpha_rows = -0.5 * n + 0.5 * quad / alpha_rows
        g_logalpha = g_logalpha_rows if layout.n_alpha > 1 else np.array([g_logalpha_rows.sum()])

        weighted = (solved / alpha_rows) @ solved.T - basis.n_knots * cov.inverse()
        g_logrho = np.array(
            [0.5 * np.sum(weighted * cov.C * dist) / rho**2 for dist, rho in zip(self._distances, hyper.rho)]
        )

        # hyperpriors with log-transform Jacobians
        alpha = hyper.alpha
        value += _half_normal(alpha, cfg.alpha_prior_scale) + float(np.sum(np.log(alpha)))
        g_logalpha = g_logalpha - (alpha / cfg.alpha_prior_scale) ** 2 + 1.0
        value += _half_normal(hyper.sigma, cfg.sigma_prior_scale) + np.log(hyper.sigma)
        g_logsigma += -((hyper.sigma / cfg.sigma_prior_scale) ** 2) + 1.0
        value += _gamma(hyper.rho, cfg.rho_prior_shape, cfg.rho_prior_rate) + float(np.sum(np.log(hyper.rho)))
        g_logrho = g_logrho + cfg.rho_prior_shape - cfg.rho_prior_rate * hyper.rho

        grad[layout.log_slice] = np.concatenate([g_logalpha, g_logrho, [g_logsigma]])
        return value, grad

    def initial_point(self, rng: np.random.Generator, init_scale: float = 0.1) -> np.ndarray:
        """Hyperparameters drawn from their priors, coefficients from N(0, init_scale²)."""
        cfg = self.config
        b = rng.normal(0.0, init_scale, size=(self.basis.n_knots, self.Y.shape[1]))
        beta_free = rng.normal(0.0, init_scale, size=(self.layout.beta_rows, self.Y.shape[1])) if self.layout.beta_rows else None
        if self.layout.fixed_hyper is not None:
            hyper = self.layout.fixed_hyper
        else:
            hyper = Hyperparams(
                alpha=np.abs(rng.normal(0.0, cfg.alpha_prior_scale, size=self.layout.n_alpha)) + 1e-3,
                rho=rng.gamma(cfg.rho_prior_shape, 1.0 / cfg.rho_prior_rate, size=N_RHO) + 1e-3,
                sigma=float(np.abs(rng.normal(0.0, cfg.sigma_prior_scale))) + 1e-3,
            )
        return self.layout.pack(LatentState(b=b, hyper=hyper, beta_free=beta_free))
