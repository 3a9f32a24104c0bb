from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, logsumexp

from app.errors import DimensionError
from app.kernel import Hyperparams, se_ard_cov
from app.model import ConstraintConfig, default_mask
from app.spline_basis import SplineBasis

MAX_ORACLE_DIM = 2


@dataclass(frozen=True)
class QuadratureMoments:
    mean: np.ndarray
    cov: np.ndarray
    axes: list[np.ndarray]

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov)


def _series_log_likelihood(
    y: np.ndarray,
    values: np.ndarray,
    f_design: np.ndarray,
    fp_design: np.ndarray,
    sigma: float,
    mask: np.ndarray,
    monotone: Optional[np.ndarray],
    v: float,
) -> np.ndarray:
    """Log-likelihood of one series for each candidate coefficient in ``values``."""
    f = np.outer(f_design, values)
    fp = np.outer(fp_design, values)
    resid = (y[:, None] - f)[mask]
    out = -0.5 * np.sum(resid**2, axis=0) / sigma**2 - mask.sum() * (np.log(sigma) + 0.5 * np.log(2 * np.pi))
    if monotone is not None and monotone.any():
        out = out + np.sum(log_ndtr(fp[monotone] / v), axis=0)
    return out


def grid_posterior_oracle(
    Y: np.ndarray,
    X: np.ndarray,
    basis: SplineBasis,
    hyper: Hyperparams,
    constraints: Optional[ConstraintConfig] = None,
    *,
    mask: Optional[np.ndarray] = None,
    points: int = 400,
    width: float = 8.0,
) -> QuadratureMoments:
    """Posterior mean and covariance of ``b`` by brute-force grid quadrature.

    Only for one knot and at most two series with saturation on, so that
    ``b`` is the whole latent vector. The grid spans ``±width`` prior
    standard deviations with ``points`` nodes per axis.
    """
    Y = np.asarray(Y, dtype=float)
    n_times, n_locations = Y.shape
    constraints = constraints or ConstraintConfig()
    dim = basis.n_knots * n_locations
    if basis.n_knots != 1 or dim > MAX_ORACLE_DIM:
        raise DimensionError(f"Quadrature oracle handles at most {MAX_ORACLE_DIM} latent dimensions, got {dim}.")
    if constraints.soft or not constraints.saturation:
        raise DimensionError("Quadrature oracle needs exact elimination with saturation.")
    mask = default_mask(n_times, n_locations) if mask is None else np.asarray(mask, dtype=bool) & default_mask(n_times, n_locations)

    # with one knot, f and f′ are linear in b once β is eliminated
    W, dW, t = basis.W[:, 0], basis.dW[:, 0], basis.times
    f_design = W - W[0] - (t - t[0]) * dW[-1]
    fp_design = dW - dW[-1]

    cov = se_ard_cov(X, hyper.rho)
    prior_cov = hyper.alpha_rows(1)[0] * (cov.C + cov.jitter * np.eye(n_locations))
    prior_sd = np.sqrt(np.diag(prior_cov))
    axes = [np.linspace(-width * s, width * s, points) for s in prior_sd]

    loglik = [
        _series_log_likelihood(
            Y[:, i],
            axes[i],
            f_design,
            fp_design,
            hyper.sigma,
            mask[:, i],
            None if constraints.monotone is None else constraints.monotone[:, i],
            constraints.v,
        )
        for i in range(n_locations)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    precision = np.linalg.inv(prior_cov)
    log_weight = -0.5 * np.einsum("gi,ij,gj->g", nodes, precision, nodes)
    for i in range(n_locations):
        log_weight = log_weight + np.broadcast_to(
            loglik[i].reshape([-1 if d == i else 1 for d in range(n_locations)]), mesh[0].shape
        ).ravel()

    weights = np.exp(log_weight - logsumexp(log_weight))
    mean = weights @ nodes
    centered = nodes - mean
    return QuadratureMoments(mean=mean, cov=(centered * weights[:, None]).T @ centered, axes=axes)
