"""Cross-validation, synthetic data and brute-force verification oracles."""

from app.evaluate.cross_validation import CVReport, FoldRecord, compare_models, cv1, cv2
from app.evaluate.quadrature import QuadratureMoments, grid_posterior_oracle
from app.evaluate.synthetic import DEFAULT_TRUTH, SyntheticTruth, generate_synthetic, synthetic_grid

# Published comparison values for the microfading survey. Its measurements are
# not distributed here, so these only annotate reports.
REFERENCE_TABLE = {
    "cv1": {
        "with_derivatives": {"elpd": -0.61, "mse": 0.13},
        "without_derivatives": {"elpd": -0.78, "mse": 0.14},
    },
    "cv2": {
        "with_derivatives": {"elpd": -11.70, "mse": 3.09},
        "without_derivatives": {"elpd": -33.39, "mse": 4.42},
    },
}

__all__ = [
    "CVReport",
    "DEFAULT_TRUTH",
    "FoldRecord",
    "QuadratureMoments",
    "REFERENCE_TABLE",
    "SyntheticTruth",
    "compare_models",
    "cv1",
    "cv2",
    "generate_synthetic",
    "grid_posterior_oracle",
    "synthetic_grid",
]
