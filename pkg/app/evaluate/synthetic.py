from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np

from app.data_model import Dataset, PixelGrid, standardize_inputs
from app.errors import DimensionError, PriorRejectionError
from app.kernel import Hyperparams, se_ard_cov
from app.model import curves, eliminate_constraints
from app.spline_basis import build_basis, make_knots

MAX_PRIOR_ATTEMPTS = 100_000

# Column means and standard deviations of the standardized (H, S, I, Sx, Sy)
# inputs of the reference microfading survey.
STANDARDIZED_MEANS = np.array([5.255, 9.704, 5.155, 3.549, 4.969])
STANDARDIZED_SDS = np.array([1.0, 1.0, 1.0, 0.732, 0.674])
# Raw units: hue in degrees, saturation and intensity in percent, positions in mm.
RAW_SCALES = np.array([24.0, 3.5, 11.0, 2.0, 2.0])

DEFAULT_TRUTH = Hyperparams(alpha=np.array([0.1]), rho=np.array([1.1, 3.0, 0.8, 2.0]), sigma=0.3)


@dataclass(frozen=True)
class SyntheticTruth:
    """Parameters and noise-free curves a synthetic dataset was generated from."""

    hyper: Hyperparams
    knots: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    f: np.ndarray
    seed: int
    attempts: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.hyper.alpha.tolist(),
            "rho": self.hyper.rho.tolist(),
            "sigma": self.hyper.sigma,
            "knots": self.knots.tolist(),
            "b": self.b.tolist(),
            "beta": self.beta.tolist(),
            "f": self.f.tolist(),
            "seed": self.seed,
            "prior_attempts": self.attempts,
        }


def _draw_inputs(rng: np.random.Generator, n_locations: int) -> np.ndarray:
    standardized = STANDARDIZED_MEANS + STANDARDIZED_SDS * rng.standard_normal((n_locations, 5))
    return standardized * RAW_SCALES


def generate_synthetic(
    truth: Hyperparams = DEFAULT_TRUTH,
    n_locations: int = 13,
    n_times: int = 11,
    seed: int = 0,
    *,
    knots: int = 3,
    times: Optional[Sequence[float]] = None,
    penalty_power: float = 2.0,
    max_attempts: int = MAX_PRIOR_ATTEMPTS,
) -> tuple[Dataset, SyntheticTruth]:
    """Draw a monotone, saturating dataset from the model's own prior.

    Coefficients are redrawn jointly until every latent series is
    non-decreasing. The first observation of each series is exactly 0.
    """
    if n_locations < 2 or n_times < 3:
        raise DimensionError("Synthetic data needs at least 2 locations and 3 time points.")
    rng = np.random.default_rng(seed)
    times = np.arange(1.0, n_times + 1.0) if times is None else np.asarray(times, dtype=float)
    if times.shape != (n_times,):
        raise DimensionError(f"Expected {n_times} time points, got {times.shape[0]}.")
    basis = build_basis(times, make_knots(times, knots), penalty_power)

    X_raw = _draw_inputs(rng, n_locations)
    cov = se_ard_cov(standardize_inputs(X_raw).X, truth.rho)
    alpha_rows = truth.alpha_rows(basis.n_knots)

    for attempt in range(1, max_attempts + 1):
        z = rng.standard_normal((n_locations, basis.n_knots))
        b = (cov.chol @ z * np.sqrt(alpha_rows)).T
        beta = eliminate_constraints(b, basis, saturation=True)
        f, fp = curves(beta, b, basis)
        if np.min(fp) >= 0.0:
            break
    else:
        raise PriorRejectionError(
            f"No monotone draw from the prior in {max_attempts} attempts; try a smaller alpha."
        )

    Y = f + truth.sigma * rng.standard_normal(f.shape)
    Y[0] = 0.0
    dataset = Dataset(
        Y=Y,
        X_raw=X_raw,
        times=times,
        location_ids=[f"L{i + 1:02d}" for i in range(n_locations)],
    )
    return dataset, SyntheticTruth(truth, basis.knots, b, beta, f, seed, attempt)


def synthetic_grid(
    dataset: Dataset,
    shape: tuple[int, int] = (100, 100),
    *,
    include_locations: bool = True,
    power: float = 2.0,
) -> PixelGrid:
    """Regular pixel grid over the dataset's footprint.

    Colour inputs are inverse-distance interpolated from the measured
    locations; with ``include_locations`` the observed inputs are appended
    as extra pixels.
    """
    nx, ny = shape
    sx, sy = dataset.X_raw[:, 3], dataset.X_raw[:, 4]
    gx, gy = np.meshgrid(np.linspace(sx.min(), sx.max(), nx), np.linspace(sy.min(), sy.max(), ny))
    px, py = gx.ravel(), gy.ravel()
    dist = np.hypot(px[:, None] - sx[None, :], py[:, None] - sy[None, :])
    weights = 1.0 / np.maximum(dist, 1e-9) ** power
    weights /= weights.sum(axis=1, keepdims=True)
    colours = weights @ dataset.X_raw[:, :3]
    if include_locations:
        px = np.concatenate([px, sx])
        py = np.concatenate([py, sy])
        colours = np.vstack([colours, dataset.X_raw[:, :3]])
    return PixelGrid(px=px, py=py, inputs=np.column_stack([colours, px, py]))
