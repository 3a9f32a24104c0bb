from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.config import PredictConfig
from app.data_model import PixelGrid
from app.errors import DimensionError, EmptyPredictiveError
from app.fitting import FitResult
from app.kernel import cross_cov, gp_marginal
from app.logger import TraceLogger
from app.model import LatentState, curves, eliminate_constraints


@dataclass
class PredictiveSeries:
    """Posterior predictive fading curve at one new location.

    ``draws`` are noisy y* curves, ``latent`` the matching f* curves; both
    hold only the draws kept after monotonicity screening.
    """

    xstar: np.ndarray
    times: np.ndarray
    draws: np.ndarray
    latent: np.ndarray
    sigma: np.ndarray
    rejection_rate: float
    n_resampled: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def lower95(self) -> np.ndarray:
        return np.quantile(self.draws, 0.025, axis=0)

    @property
    def upper95(self) -> np.ndarray:
        return np.quantile(self.draws, 0.975, axis=0)

    @property
    def latent_mean(self) -> np.ndarray:
        return self.latent.mean(axis=0)


@dataclass
class FadingMap:
    """Posterior mean of f* per pixel and time point, M×T."""

    grid: PixelGrid
    times: np.ndarray
    mean: np.ndarray
    mask: np.ndarray
    variance: Optional[np.ndarray] = None
    n_draws: int = 0


def _conditional_coefficients(
    fit: FitResult, state: LatentState, xstar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and marginal variance of b* (each K×M) given one posterior draw."""
    hyper = state.hyper
    cov = fit.model.covariance(hyper)
    cstar = cross_cov(fit.model.X, xstar, hyper.rho)
    alpha_rows = hyper.alpha_rows(fit.basis.n_knots)
    means, variances = [], []
    for k in range(fit.basis.n_knots):
        mean_k, var_k = gp_marginal(cov, cstar, state.b[k], alpha_rows[k])
        means.append(mean_k)
        variances.append(var_k)
    return np.vstack(means), np.vstack(variances)


def _is_monotone(fp: np.ndarray, tolerance: float) -> bool:
    return bool(np.min(fp) >= -tolerance)


def predict_location(
    xstar: np.ndarray,
    fit: FitResult,
    *,
    rng: Optional[np.random.Generator] = None,
    config: Optional[PredictConfig] = None,
    max_draws: Optional[int] = None,
) -> PredictiveSeries:
    """Predictive draws of the fading curve at standardized inputs ``xstar``.

    Each posterior draw gives a conditional b*, from which the linear part
    follows by exact constraint elimination. Draws whose curve decreases are
    redrawn up to ``max_resample`` times and dropped if still decreasing.
    """
    config = config or PredictConfig()
    rng = rng or np.random.default_rng(fit.sampler_config.seed)
    xstar = np.asarray(xstar, dtype=float).reshape(1, -1)
    if xstar.shape[1] != fit.model.X.shape[1]:
        raise DimensionError(f"xstar must have {fit.model.X.shape[1]} standardized inputs.")
    basis, constraints = fit.basis, fit.model.constraints
    n_total = fit.n_draws
    indices = np.arange(n_total)
    if max_draws is not None and max_draws < n_total:
        indices = np.unique(np.linspace(0, n_total - 1, max_draws).round().astype(int))

    kept_y, kept_f, kept_sigma = [], [], []
    rejected = resampled = 0
    for state in fit.states(indices):
        mean, var = _conditional_coefficients(fit, state, xstar)
        sd = np.sqrt(var[:, 0])
        for attempt in range(config.max_resample + 1):
            bstar = mean[:, 0] + sd * rng.standard_normal(basis.n_knots)
            slope = None
            if not constraints.saturation:
                slope = rng.normal(0.0, fit.model_config.beta_prior_scale, size=1)
            beta = eliminate_constraints(bstar, basis, saturation=constraints.saturation, slope=slope)
            f, fp = curves(beta, bstar[:, None], basis)
            if not constraints.monotonicity or _is_monotone(fp, config.monotone_tolerance):
                break
        else:
            rejected += 1
            continue
        resampled += attempt
        f = f[:, 0]
        y = f + state.hyper.sigma * rng.standard_normal(basis.n_times)
        y[0] = 0.0
        kept_f.append(f)
        kept_y.append(y)
        kept_sigma.append(state.hyper.sigma)

    if not kept_y:
        raise EmptyPredictiveError(
            f"All {len(indices)} predictive draws violated monotonicity after {config.max_resample} redraws each."
        )
    return PredictiveSeries(
        xstar=xstar[0],
        times=basis.times,
        draws=np.vstack(kept_y),
        latent=np.vstack(kept_f),
        sigma=np.asarray(kept_sigma),
        rejection_rate=rejected / len(indices),
        n_resampled=resampled,
    )


def _thinned_indices(n_total: int, max_draws: int) -> np.ndarray:
    if n_total <= max_draws:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, max_draws).round().astype(int))


def fading_map(
    grid: PixelGrid,
    fit: FitResult,
    *,
    config: Optional[PredictConfig] = None,
    logger: Optional[TraceLogger] = None,
) -> FadingMap:
    """Posterior mean fading f* for every pixel and time point.

    Per draw the conditional mean b* is pushed through the constrained
    spline; the map averages those curves over (thinned) draws. With
    ``variance_map`` the total predictive variance of f* is accumulated too.
    """
    config = config or PredictConfig()
    basis, constraints = fit.basis, fit.model.constraints
    X_grid = fit.standardized.apply(grid.inputs)
    indices = _thinned_indices(fit.n_draws, config.map_max_draws)
    states = list(fit.states(indices))

    n_pixels, n_times = grid.n_pixels, basis.n_times
    total = np.zeros((n_pixels, n_times))
    total_sq = np.zeros((n_pixels, n_times)) if config.variance_map else None
    conditional = np.zeros((n_pixels, n_times)) if config.variance_map else None
    # f = A_f · b* once β is eliminated with zero free slope
    design = basis.W - np.outer(np.ones(n_times), basis.W[0])
    if constraints.saturation:
        design = design - np.outer(basis.times - basis.times[0], basis.dW[-1])
    slope_var = 0.0 if constraints.saturation else fit.model_config.beta_prior_scale**2

    for start in range(0, n_pixels, config.map_block_size):
        block = slice(start, min(start + config.map_block_size, n_pixels))
        for state in states:
            mean, var = _conditional_coefficients(fit, state, X_grid[block])
            f_block = (design @ mean).T
            total[block] += f_block
            if config.variance_map:
                total_sq[block] += f_block**2
                conditional[block] += (design**2 @ var).T + slope_var * (basis.times - basis.times[0]) ** 2
        if logger:
            logger.log("map_block_done", first_pixel=start, pixels=block.stop - start, draws=len(states))

    n = len(states)
    mean = total / n
    variance = None
    if config.variance_map:
        variance = conditional / n + np.maximum(total_sq / n - mean**2, 0.0)
    return FadingMap(
        grid=grid,
        times=basis.times,
        mean=mean,
        mask=mean > config.perceptible_threshold,
        variance=variance,
        n_draws=n,
    )
