from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from app.errors import DimensionError, DomainError, IndefiniteCovarianceError, ValidationError

JITTER_LADDER: Tuple[float, ...] = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class Hyperparams:
    """GP scale ``alpha`` (one entry, or one per knot row), lengthscales ``rho``, noise ``sigma``.

    ``rho`` has one entry per input column except that the two spatial
    columns share the last one: (H, S, I, spatial).
    """

    alpha: np.ndarray
    rho: np.ndarray
    sigma: float

    def __post_init__(self) -> None:
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "sigma", np.float64(self.sigma))
        if not (np.all(alpha > 0) and np.all(rho > 0) and self.sigma > 0):
            raise DomainError("Hyperparameters alpha, rho and sigma must be strictly positive.")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(rho)) and np.isfinite(self.sigma)):
            raise DomainError("Hyperparameters must be finite.")

    def alpha_rows(self, n_knots: int) -> np.ndarray:
        """One GP scale per knot row."""
        if self.alpha.shape[0] == 1:
            return np.full(n_knots, self.alpha[0])
        if self.alpha.shape[0] != n_knots:
            raise DimensionError(f"alpha has {self.alpha.shape[0]} entries for K={n_knots} knot rows.")
        return self.alpha


@dataclass(frozen=True)
class CovMatrix:
    """Correlation matrix ``C`` with the jitter that made ``C + jitter·I`` factorizable."""

    C: np.ndarray
    jitter: float
    chol: np.ndarray

    @property
    def size(self) -> int:
        return self.C.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), rhs)

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.size))


def lengthscale_columns(n_inputs: int, n_rho: int) -> List[List[int]]:
    """Input columns governed by each lengthscale; the last two inputs share when ``n_inputs = n_rho + 1``."""
    if n_inputs == n_rho:
        return [[d] for d in range(n_rho)]
    if n_inputs == n_rho + 1:
        return [[d] for d in range(n_rho - 1)] + [[n_rho - 1, n_rho]]
    raise DimensionError(f"{n_rho} lengthscales cannot cover {n_inputs} input columns.")


def expand_lengthscales(rho: Sequence[float], n_inputs: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise DomainError("Lengthscales must be strictly positive.")
    expanded = np.empty(n_inputs)
    for d, columns in enumerate(lengthscale_columns(n_inputs, rho.shape[0])):
        expanded[columns] = rho[d]
    return expanded


def correlation(X: np.ndarray, Xstar: np.ndarray, rho: Sequence[float]) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if X.shape[1] != Xstar.shape[1]:
        raise DimensionError("Both input sets must have the same number of columns.")
    ell = expand_lengthscales(rho, X.shape[1])
    return np.exp(-0.5 * cdist(Xstar / ell, X / ell, "sqeuclidean"))


def factorize(C: np.ndarray) -> CovMatrix:
    """Cholesky of ``C + jitter·I`` with jitter escalating ×10 from 1e-8 to 1e-4."""
    if not np.all(np.isfinite(C)):
        raise IndefiniteCovarianceError("Covariance matrix contains non-finite entries.")
    eye = np.eye(C.shape[0])
    for jitter in JITTER_LADDER:
        try:
            chol = linalg.cholesky(C + jitter * eye, lower=True)
        except linalg.LinAlgError:
            continue
        return CovMatrix(C=C, jitter=jitter, chol=chol)
    raise IndefiniteCovarianceError(
        f"Cholesky factorization failed with jitter up to {JITTER_LADDER[-1]:g}; "
        "check for duplicated inputs or extreme lengthscales."
    )


def se_ard_cov(X: np.ndarray, rho: Sequence[float]) -> CovMatrix:
    """Squared-exponential ARD correlation over standardized inputs, factorized."""
    C = correlation(X, X, rho)
    np.fill_diagonal(C, 1.0)
    return factorize(C)


def cross_cov(
    X: np.ndarray,
    Xstar: np.ndarray,
    rho: Sequence[float],
    *,
    scales: Optional[np.ndarray] = None,
    star_scales: Optional[np.ndarray] = None,
) -> np.ndarray:
    """M×N correlations between new inputs ``Xstar`` and training inputs ``X`` (no jitter)."""
    if scales is not None and star_scales is not None and not np.allclose(scales, star_scales, rtol=1e-12, atol=0):
        raise ValidationError("New inputs were standardized with different scales than the training inputs.")
    return correlation(X, Xstar, rho)


def lengthscale_distances(X: np.ndarray, n_rho: int) -> List[np.ndarray]:
    """Unscaled squared-difference matrices summed over the columns of each lengthscale."""
    X = np.asarray(X, dtype=float)
    out = []
    for columns in lengthscale_columns(X.shape[1], n_rho):
        sub = X[:, columns]
        out.append(cdist(sub, sub, "sqeuclidean"))
    return out


def _psd_clip(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if cov.shape[0] == 1:
        return np.maximum(cov, 0.0)
    values, vectors = linalg.eigh(cov)
    return (vectors * np.maximum(values, 0.0)) @ vectors.T


def gp_marginal(
    C: CovMatrix,
    cstar: np.ndarray,
    b_k: np.ndarray,
    alpha: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Conditional mean and marginal variance (both M-vectors) of one coefficient row at new inputs."""
    cstar = np.atleast_2d(np.asarray(cstar, dtype=float))
    b_k = np.asarray(b_k, dtype=float)
    if cstar.shape[1] != C.size or b_k.shape != (C.size,):
        raise DimensionError("cstar must be M×N and b_k an N-vector for an N×N covariance.")
    reduction = np.einsum("mn,nm->m", cstar, C.solve(cstar.T))
    return cstar @ C.solve(b_k), np.maximum(alpha * (1.0 - reduction), 0.0)


def gp_conditional(
    C: CovMatrix,
    cstar: np.ndarray,
    b_k: np.ndarray,
    alpha: float,
    cstarstar: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Conditional of one coefficient row at new inputs under the prior ``N(0, alpha·C)``.

    Without ``cstarstar`` the new inputs are predicted marginally (unit prior
    correlation on the diagonal, zero off it).
    """
    cstar = np.atleast_2d(np.asarray(cstar, dtype=float))
    b_k = np.asarray(b_k, dtype=float)
    if cstar.shape[1] != C.size or b_k.shape != (C.size,):
        raise DimensionError("cstar must be M×N and b_k an N-vector for an N×N covariance.")
    if cstarstar is None:
        mean, variance = gp_marginal(C, cstar, b_k, alpha)
        return mean, np.diag(variance)
    mean = cstar @ C.solve(b_k)
    return mean, _psd_clip(alpha * (np.asarray(cstarstar, dtype=float) - cstar @ C.solve(cstar.T)))
