from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from app.errors import DegeneratePenaltyError, DimensionError, NumericalWarning

SVD_RTOL = 1e-10


@dataclass(frozen=True)
class SplineBasis:
    """Quadratic radial penalized-spline design over a fixed time grid.

    ``W = Z · Omega_inv_sqrt`` and ``dW`` is its time derivative; ``H`` holds
    the linear part with rows ``(1, t)``.
    """

    times: np.ndarray
    knots: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    Omega: np.ndarray
    Omega_inv_sqrt: np.ndarray
    W: np.ndarray
    dW: np.ndarray
    penalty_power: float = 2.0

    @property
    def n_times(self) -> int:
        return self.times.shape[0]

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]

    def at(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(H, W, dW)`` evaluated at arbitrary times with this basis's knots and penalty."""
        times = np.asarray(times, dtype=float)
        Z, dZ = radial_design(times, self.knots, self.penalty_power)
        H = np.column_stack([np.ones_like(times), times])
        return H, Z @ self.Omega_inv_sqrt, dZ @ self.Omega_inv_sqrt


def make_knots(times: np.ndarray, K: int) -> np.ndarray:
    """Equally spaced interior knots: t_min + k·(t_max − t_min)/(K+1), k = 1..K."""
    times = np.asarray(times, dtype=float)
    if times.shape[0] < 3:
        raise DimensionError(f"At least 3 time points are required, got {times.shape[0]}.")
    if K < 1:
        raise DimensionError(f"Knot count must be at least 1, got K={K}.")
    if K >= times.shape[0]:
        warnings.warn(
            f"K={K} knots for T={times.shape[0]} time points over-parameterises each series.",
            NumericalWarning,
            stacklevel=2,
        )
    t_min, t_max = float(times.min()), float(times.max())
    return t_min + np.arange(1, K + 1) * (t_max - t_min) / (K + 1)


def radial_design(times: np.ndarray, knots: np.ndarray, power: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
    """``Z[t,k] = |t − κ_k|^p`` and its derivative in t."""
    diff = np.subtract.outer(np.asarray(times, dtype=float), np.asarray(knots, dtype=float))
    if power == 2.0:
        return diff**2, 2.0 * diff
    return np.abs(diff) ** power, power * np.abs(diff) ** (power - 1.0) * np.sign(diff)


def penalty_matrix(knots: np.ndarray, power: float = 2.0) -> np.ndarray:
    diff = np.subtract.outer(knots, knots)
    return diff**2 if power == 2.0 else np.abs(diff) ** power


def penalty_inverse_sqrt(Omega: np.ndarray, rtol: float = SVD_RTOL) -> np.ndarray:
    """Pseudo-inverse square root ``U·diag(s^-1/2)·Vᵀ`` from the SVD of ``Omega``.

    Singular values below ``rtol·max(s)`` are truncated. Only magnitudes are
    used, so even for an indefinite ``Omega`` the product ``M·|Omega|·Mᵀ``
    is the projector on its non-singular subspace.
    """
    Omega = np.asarray(Omega, dtype=float)
    if Omega.ndim != 2 or Omega.shape[0] != Omega.shape[1]:
        raise DimensionError("Penalty matrix must be square.")
    if not np.allclose(Omega, Omega.T, rtol=1e-12, atol=1e-12):
        raise DimensionError("Penalty matrix must be symmetric.")
    U, s, Vt = linalg.svd(Omega)
    if s.size == 0 or not s[0] > 0:
        raise DegeneratePenaltyError("Penalty matrix has no singular value above the truncation threshold.")
    keep = s > rtol * s[0]
    return (U[:, keep] * s[keep] ** -0.5) @ Vt[keep]


def build_basis(times: np.ndarray, knots: np.ndarray, penalty_power: float = 2.0) -> SplineBasis:
    times = np.asarray(times, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.shape[0] < 1:
        raise DimensionError("At least one knot is required.")
    Z, dZ = radial_design(times, knots, penalty_power)
    Omega = penalty_matrix(knots, penalty_power)
    if knots.shape[0] == 1:
        # a single knot has no pairwise distance to penalise
        Omega_inv_sqrt = np.ones((1, 1))
    else:
        Omega_inv_sqrt = penalty_inverse_sqrt(Omega)
    return SplineBasis(
        times=times,
        knots=knots,
        H=np.column_stack([np.ones_like(times), times]),
        Z=Z,
        Omega=Omega,
        Omega_inv_sqrt=Omega_inv_sqrt,
        W=Z @ Omega_inv_sqrt,
        dW=dZ @ Omega_inv_sqrt,
        penalty_power=penalty_power,
    )


def _check_coefficients(beta_i: np.ndarray, b_i: np.ndarray, basis: SplineBasis) -> Tuple[np.ndarray, np.ndarray]:
    beta_i = np.asarray(beta_i, dtype=float)
    b_i = np.asarray(b_i, dtype=float)
    if beta_i.shape[0] != 2:
        raise DimensionError(f"beta must have 2 rows, got {beta_i.shape[0]}.")
    if b_i.shape[0] != basis.n_knots:
        raise DimensionError(f"b must have K={basis.n_knots} rows, got {b_i.shape[0]}.")
    if beta_i.shape[1:] != b_i.shape[1:]:
        raise DimensionError("beta and b must describe the same number of series.")
    return beta_i, b_i


def eval_function(beta_i: np.ndarray, b_i: np.ndarray, basis: SplineBasis) -> np.ndarray:
    """f = H·β + W·b; accepts a single series or 2×N / K×N matrices."""
    beta_i, b_i = _check_coefficients(beta_i, b_i, basis)
    return basis.H @ beta_i + basis.W @ b_i


def eval_derivative(beta_i: np.ndarray, b_i: np.ndarray, basis: SplineBasis) -> np.ndarray:
    """f′ = β₂ + dW·b."""
    beta_i, b_i = _check_coefficients(beta_i, b_i, basis)
    return beta_i[1] + basis.dW @ b_i
