from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.config import ModelConfig, SamplerConfig
from app.data_model import load_dataset, save_dataset, save_standardized
from app.errors import DimensionError, ValidationError
from app.fitting import FitResult, build_model, hyperparameter_names, latent_summary, posterior_summary
from app.predict import FadingMap, PredictiveSeries
from app.sampler import PosteriorDraws
from app.spline_basis import SplineBasis
from app.utils import FLOAT_FORMAT

DATA_FILE = "data.csv"
DIAGNOSTICS_FILE = "diagnostics.json"
RUN_FILE = "run.json"
GRAY_LEVELS = 255


def _require(path: Path) -> Path:
    if not path.exists():
        raise ValidationError(f"Required file {path} not found; run `fit` first or check --run.")
    return path


def _write_json(payload: Dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_draws(draws: PosteriorDraws, out_dir: Path) -> List[Path]:
    """One CSV per chain, natural-scale values with parameter names as header."""
    paths = []
    for c in range(draws.n_chains):
        path = out_dir / f"chain_{c + 1}.csv"
        pd.DataFrame(draws.draws[c], columns=draws.param_names).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        paths.append(path)
    return paths


def diagnostics_payload(draws: PosteriorDraws) -> Dict[str, Any]:
    return {
        "chains": draws.n_chains,
        "samples": draws.n_samples,
        "rhat": dict(zip(draws.param_names, draws.rhat.tolist())),
        "ess_bulk": dict(zip(draws.param_names, draws.ess_bulk.tolist())),
        "max_rhat": float(np.max(draws.rhat)),
        "min_ess_bulk": float(np.min(draws.ess_bulk)),
        "failing": draws.failing_parameters(),
        "divergences": draws.divergence_count,
        "mean_accept": draws.accept_stats.mean(axis=1).tolist(),
        "step_sizes": draws.step_sizes.tolist(),
        "max_tree_depth": draws.tree_depths.max(axis=1).tolist() if draws.tree_depths.size else [],
        "warnings": draws.warnings,
    }


def write_fit(fit: FitResult, out_dir: Path, run_payload: Dict[str, Any]) -> None:
    """Everything ``load_fit`` needs, plus human-readable summaries."""
    write_draws(fit.draws, out_dir)
    _write_json(diagnostics_payload(fit.draws), out_dir / DIAGNOSTICS_FILE)
    _write_json({**run_payload, "times": fit.dataset.times.tolist()}, out_dir / RUN_FILE)
    save_dataset(fit.dataset, out_dir / DATA_FILE)
    save_standardized(fit.dataset, fit.standardized, out_dir)

    summary = posterior_summary(fit.draws, hyperparameter_names(fit.draws))
    summary.to_csv(out_dir / "summary.csv", index=False, float_format=FLOAT_FORMAT)
    (out_dir / "summary.txt").write_text(
        summary.to_string(index=False, float_format=lambda v: f"{v:.4g}") + "\n", encoding="utf-8"
    )
    latent_summary(fit).to_csv(out_dir / "latent_summary.csv", index=False, float_format=FLOAT_FORMAT)


def read_diagnostics(run_dir: str | Path) -> Dict[str, Any]:
    path = _require(Path(run_dir) / DIAGNOSTICS_FILE)
    return json.loads(path.read_text(encoding="utf-8"))


def read_draws(run_dir: str | Path, chains: int) -> PosteriorDraws:
    run_dir = Path(run_dir)
    frames = [pd.read_csv(_require(run_dir / f"chain_{c + 1}.csv"), dtype=float) for c in range(chains)]
    names = list(frames[0].columns)
    if any(list(frame.columns) != names or len(frame) != len(frames[0]) for frame in frames):
        raise ValidationError(f"Chain files in {run_dir} disagree on parameters or length.")
    diagnostics = read_diagnostics(run_dir)
    return PosteriorDraws(
        draws=np.stack([frame.to_numpy() for frame in frames]),
        param_names=names,
        accept_stats=np.asarray(diagnostics["mean_accept"])[:, None],
        divergence_count=int(diagnostics["divergences"]),
        rhat=np.array([diagnostics["rhat"][n] for n in names]),
        ess_bulk=np.array([diagnostics["ess_bulk"][n] for n in names]),
        step_sizes=np.asarray(diagnostics["step_sizes"]),
        warnings=list(diagnostics.get("warnings", [])),
    )


def read_run(run_dir: str | Path) -> Dict[str, Any]:
    return json.loads(_require(Path(run_dir) / RUN_FILE).read_text(encoding="utf-8"))


def load_fit(run_dir: str | Path) -> FitResult:
    """Rebuild a fitted posterior from a ``fit`` output directory."""
    run_dir = Path(run_dir)
    run = read_run(run_dir)
    model_config = ModelConfig.model_validate(run["model"])
    sampler_config = SamplerConfig.model_validate(run["sampler"])
    draws = read_draws(run_dir, sampler_config.chains)
    dataset = load_dataset(_require(run_dir / DATA_FILE), times=run.get("times"))
    standardized, basis, model = build_model(dataset, model_config)
    if draws.param_names != model.param_names:
        raise ValidationError(f"Draws in {run_dir} do not match the configured model's parameters.")
    return FitResult(dataset, standardized, basis, model, draws, model_config, sampler_config)


def prediction_frame(series: PredictiveSeries) -> pd.DataFrame:
    mean = series.mean
    return pd.DataFrame(
        {
            "t": series.times,
            "mean": mean,
            "lower95": series.lower95,
            "upper95": series.upper95,
            "rejection_rate": np.full(mean.shape, series.rejection_rate),
        }
    )


def write_prediction(series: PredictiveSeries, path: Path) -> None:
    prediction_frame(series).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _time_indices(fmap: FadingMap, times: Optional[Sequence[float]]) -> List[int]:
    if times is None:
        return list(range(fmap.times.shape[0]))
    indices = []
    for t in times:
        hits = np.flatnonzero(np.isclose(fmap.times, t))
        if not hits.size:
            raise DimensionError(f"Time {t:g} is not one of the fitted time points.")
        indices.append(int(hits[0]))
    return indices


def write_map(
    fmap: FadingMap,
    out_dir: Path,
    *,
    times: Optional[Sequence[float]] = None,
    gray_max: Optional[float] = None,
) -> List[Path]:
    """Long-format CSV (px, py, t, mean, perceptible) and one graymap per time point."""
    indices = _time_indices(fmap, times)
    grid = fmap.grid
    blocks = []
    for j in indices:
        block = {
            "px": grid.px,
            "py": grid.py,
            "t": np.full(grid.n_pixels, fmap.times[j]),
            "mean": fmap.mean[:, j],
            "perceptible": fmap.mask[:, j].astype(int),
        }
        if fmap.variance is not None:
            block["variance"] = fmap.variance[:, j]
        blocks.append(pd.DataFrame(block))
    paths = [out_dir / "map.csv"]
    pd.concat(blocks, ignore_index=True).to_csv(paths[0], index=False, float_format=FLOAT_FORMAT)

    top = gray_max or float(np.max(fmap.mean[:, indices]))
    for j in indices:
        path = out_dir / f"map_t{j + 1:03d}.pgm"
        write_graymap(grid.px, grid.py, fmap.mean[:, j], path, top=top, time=float(fmap.times[j]))
        paths.append(path)
    return paths


def write_graymap(px: np.ndarray, py: np.ndarray, values: np.ndarray, path: Path, *, top: float, time: float) -> None:
    """Plain PGM (P2) of pixel values on the lattice of distinct px, py coordinates."""
    xs, ys = np.unique(px), np.unique(py)
    image = np.zeros((ys.size, xs.size), dtype=int)
    scale = GRAY_LEVELS / top if top > 0 else 0.0
    # row 0 is the largest py so the image is not upside down
    rows = ys.size - 1 - np.searchsorted(ys, py)
    image[rows, np.searchsorted(xs, px)] = np.rint(np.clip(values * scale, 0, GRAY_LEVELS)).astype(int)
    with path.open("w", encoding="ascii") as handle:
        handle.write("P2\n")
        handle.write(f"# fading map at t={time:g}\n")
        handle.write(f"# gray = round({GRAY_LEVELS} * clip(dE / {top:.6g}, 0, 1)); 0 = no change\n")
        handle.write(f"{xs.size} {ys.size}\n{GRAY_LEVELS}\n")
        np.savetxt(handle, image, fmt="%d")


def write_basis(basis: SplineBasis, out_dir: Path) -> List[Path]:
    """Design and penalty matrices of a basis as CSV files."""
    knot_cols = [f"k{k + 1}" for k in range(basis.n_knots)]
    tables = {
        "knots.csv": pd.DataFrame({"knot": basis.knots}),
        "H.csv": pd.DataFrame(basis.H, columns=["one", "t"]).assign(time=basis.times),
        "Z.csv": pd.DataFrame(basis.Z, columns=knot_cols).assign(time=basis.times),
        "W.csv": pd.DataFrame(basis.W, columns=knot_cols).assign(time=basis.times),
        "dW.csv": pd.DataFrame(basis.dW, columns=knot_cols).assign(time=basis.times),
        "Omega.csv": pd.DataFrame(basis.Omega, columns=knot_cols),
        "Omega_inv_sqrt.csv": pd.DataFrame(basis.Omega_inv_sqrt, columns=knot_cols),
    }
    paths = []
    for name, frame in tables.items():
        path = out_dir / name
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        paths.append(path)
    return paths
