from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import DegenerateInputError, DimensionError, ParseError, SchemaError
from app.utils import FLOAT_FORMAT

INPUT_COLUMNS: Tuple[str, ...] = ("H", "S", "I", "Sx", "Sy")
GRID_COLUMNS: Tuple[str, ...] = ("px", "py", "H", "S", "I")
_OBSERVATION_COLUMN = re.compile(r"^y(\d+)$")


@dataclass(frozen=True)
class Dataset:
    """Observed fading series (columns of ``Y``) and the inputs of their locations.

    ``Y`` is T×N in ΔE* units with the first row identically zero; ``X_raw``
    is N×5 with columns H, S, I, Sx, Sy.
    """

    Y: np.ndarray
    X_raw: np.ndarray
    times: np.ndarray
    location_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X_raw, dtype=float)
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X_raw", X)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "location_ids", tuple(str(i) for i in self.location_ids))
        if Y.ndim != 2 or X.ndim != 2:
            raise DimensionError("Y must be T×N and X_raw N×D matrices.")
        n_times, n_locations = Y.shape
        if n_times < 3:
            raise DimensionError(f"At least 3 time points are required, got T={n_times}.")
        if n_locations < 2:
            raise DimensionError(f"At least 2 locations are required, got N={n_locations}.")
        if X.shape[0] != n_locations:
            raise DimensionError(f"X_raw has {X.shape[0]} rows but Y has {n_locations} series.")
        if times.shape != (n_times,):
            raise DimensionError(f"times must have length T={n_times}.")
        if np.any(np.diff(times) <= 0):
            raise DimensionError("times must be strictly increasing.")
        if len(self.location_ids) != n_locations:
            raise DimensionError("location_ids must have one label per series.")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
            raise ParseError("Y and X_raw must not contain NaN or infinite values.")

    @property
    def n_times(self) -> int:
        return self.Y.shape[0]

    @property
    def n_locations(self) -> int:
        return self.Y.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.X_raw.shape[1]

    def index_of(self, location_id: str) -> int:
        try:
            return self.location_ids.index(str(location_id))
        except ValueError as exc:
            raise SchemaError(f"Unknown location id {location_id!r}.") from exc

    def without_location(self, index: int) -> "Dataset":
        keep = [i for i in range(self.n_locations) if i != index]
        return Dataset(
            Y=self.Y[:, keep],
            X_raw=self.X_raw[keep],
            times=self.times,
            location_ids=tuple(self.location_ids[i] for i in keep),
        )


@dataclass(frozen=True)
class StandardizedInputs:
    """Inputs divided per column by ``scales`` (after subtracting ``centers``)."""

    X: np.ndarray
    scales: np.ndarray
    spatial_common_scale: float
    centers: np.ndarray = field(default_factory=lambda: np.zeros(len(INPUT_COLUMNS)))

    def apply(self, X_raw: np.ndarray) -> np.ndarray:
        return apply_scales(X_raw, self)


@dataclass(frozen=True)
class PixelGrid:
    """Pixel records for map prediction; ``inputs`` is laid out like ``Dataset.X_raw``."""

    px: np.ndarray
    py: np.ndarray
    inputs: np.ndarray

    @property
    def n_pixels(self) -> int:
        return self.inputs.shape[0]


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"Non-numeric value {raw!r} at row {row}, column {column!r}.", row, column) from exc
    if not np.isfinite(value):
        raise ParseError(f"Non-finite value {raw!r} at row {row}, column {column!r}.", row, column)
    return value


def _read_numeric(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    out = np.empty((len(frame), len(columns)))
    for j, column in enumerate(columns):
        for i, raw in enumerate(frame[column].tolist()):
            # row numbers are 1-based data rows (header excluded)
            out[i, j] = _parse_cell(raw, i + 1, column)
    return out


def _read_table(path: str | Path, delimiter: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"File {path} not found.")
    frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def load_dataset(
    path: str | Path,
    *,
    delimiter: str = ",",
    times: Optional[Sequence[float]] = None,
) -> Dataset:
    """Read ``id,Sx,Sy,H,S,I,y1,...,yT`` rows, one per location."""
    frame = _read_table(path, delimiter)
    missing = [c for c in ("id",) + INPUT_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"Missing column(s) {', '.join(missing)} in {path}.")
    observed = sorted(
        (int(m.group(1)), c) for c in frame.columns if (m := _OBSERVATION_COLUMN.match(c))
    )
    if len(observed) < 3:
        raise DimensionError(f"At least 3 observation columns y1..yT are required, found {len(observed)}.")
    obs_columns = [c for _, c in observed]
    if len(frame) < 2:
        raise DimensionError(f"At least 2 locations are required, found {len(frame)}.")
    Y = _read_numeric(frame, obs_columns).T
    nonzero = np.flatnonzero(Y[0] != 0.0)
    if nonzero.size:
        row, column = int(nonzero[0]) + 1, obs_columns[0]
        raise ParseError(
            f"First observation must be 0 (colour difference from the unexposed state), "
            f"got {Y[0, nonzero[0]]:g} at row {row}, column {column!r}.",
            row,
            column,
        )
    X_raw = _read_numeric(frame, INPUT_COLUMNS)
    grid = np.arange(1, len(obs_columns) + 1, dtype=float) if times is None else np.asarray(times, dtype=float)
    return Dataset(Y=Y, X_raw=X_raw, times=grid, location_ids=tuple(frame["id"].tolist()))


def dataset_frame(dataset: Dataset, X: Optional[np.ndarray] = None) -> pd.DataFrame:
    inputs = dataset.X_raw if X is None else X
    columns: Dict[str, object] = {"id": list(dataset.location_ids)}
    for name in ("Sx", "Sy", "H", "S", "I"):
        columns[name] = inputs[:, INPUT_COLUMNS.index(name)]
    for t in range(dataset.n_times):
        columns[f"y{t + 1}"] = dataset.Y[t]
    return pd.DataFrame(columns)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    dataset_frame(dataset).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def standardize_inputs(X_raw: np.ndarray, *, center: bool = False) -> StandardizedInputs:
    """Divide H, S, I by their own standard deviations and Sx, Sy by their pooled one."""
    X_raw = np.asarray(X_raw, dtype=float)
    if X_raw.ndim != 2 or X_raw.shape[1] != len(INPUT_COLUMNS):
        raise DimensionError(f"Inputs must be an N×{len(INPUT_COLUMNS)} matrix.")
    n = X_raw.shape[0]
    if n < 2:
        raise DimensionError("Standardization needs at least 2 rows.")
    means = X_raw.mean(axis=0)
    column_sd = X_raw.std(axis=0, ddof=1)
    color_sd = column_sd[:3]
    spatial = X_raw[:, 3:] - means[3:]
    common = float(np.sqrt(np.sum(spatial**2) / (2 * n - 2)))
    # Sx and Sy are checked one by one, not through the pooled scale
    degenerate = [name for name, sd in zip(INPUT_COLUMNS, column_sd) if not sd > 0]
    if degenerate:
        raise DegenerateInputError(f"Zero-variance input column(s): {', '.join(degenerate)}.")
    scales = np.concatenate([color_sd, [common, common]])
    centers = means if center else np.zeros_like(means)
    return StandardizedInputs(
        X=(X_raw - centers) / scales,
        scales=scales,
        spatial_common_scale=common,
        centers=centers,
    )


def apply_scales(X_raw: np.ndarray, standardized: StandardizedInputs) -> np.ndarray:
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    if X_raw.shape[1] != standardized.scales.shape[0]:
        raise DimensionError(f"Expected {standardized.scales.shape[0]} input columns, got {X_raw.shape[1]}.")
    return (X_raw - standardized.centers) / standardized.scales


def save_scales(standardized: StandardizedInputs, path: str | Path) -> None:
    pd.DataFrame(
        {"column": list(INPUT_COLUMNS), "scale": standardized.scales, "center": standardized.centers}
    ).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def load_scales(path: str | Path, X_raw: np.ndarray) -> StandardizedInputs:
    """Rebuild training standardization from ``scales.csv`` and the training inputs."""
    frame = _read_table(path, ",")
    if list(frame["column"]) != list(INPUT_COLUMNS):
        raise SchemaError(f"{path} must list scales for {', '.join(INPUT_COLUMNS)} in order.")
    scales = _read_numeric(frame, ["scale"])[:, 0]
    centers = _read_numeric(frame, ["center"])[:, 0]
    return StandardizedInputs(
        X=(np.asarray(X_raw, dtype=float) - centers) / scales,
        scales=scales,
        spatial_common_scale=float(scales[3]),
        centers=centers,
    )


def save_standardized(dataset: Dataset, standardized: StandardizedInputs, out_dir: str | Path) -> List[Path]:
    """Standardization echo: the dataset schema with scaled inputs plus ``scales.csv``."""
    out_dir = Path(out_dir)
    data_path = out_dir / "standardized.csv"
    scales_path = out_dir / "scales.csv"
    dataset_frame(dataset, standardized.X).to_csv(data_path, index=False, float_format=FLOAT_FORMAT)
    save_scales(standardized, scales_path)
    return [data_path, scales_path]


def load_grid(path: str | Path, *, delimiter: str = ",") -> PixelGrid:
    """Read ``px,py,H,S,I`` pixel rows; pixel coordinates play the role of Sx, Sy."""
    frame = _read_table(path, delimiter)
    missing = [c for c in GRID_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"Grid file {path} is missing column(s) {', '.join(missing)}.")
    if len(frame) == 0:
        raise DimensionError(f"Grid file {path} has no pixel rows.")
    values = _read_numeric(frame, GRID_COLUMNS)
    px, py = values[:, 0], values[:, 1]
    inputs = np.column_stack([values[:, 2], values[:, 3], values[:, 4], px, py])
    return PixelGrid(px=px, py=py, inputs=inputs)


def save_grid(grid: PixelGrid, path: str | Path) -> None:
    pd.DataFrame(
        {"px": grid.px, "py": grid.py, "H": grid.inputs[:, 0], "S": grid.inputs[:, 1], "I": grid.inputs[:, 2]}
    ).to_csv(path, index=False, float_format=FLOAT_FORMAT)
