from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from app.artifacts import load_fit, write_basis, write_fit, write_map, write_prediction
from app.config import RunConfig
from app.data_model import Dataset, load_dataset, load_grid, save_dataset, save_grid
from app.errors import ValidationError
from app.evaluate import REFERENCE_TABLE, compare_models, cv1, cv2, generate_synthetic, synthetic_grid
from app.evaluate.cross_validation import require_converged
from app.fitting import FitResult, convergence_gate, fit_model
from app.logger import TraceLogger
from app.predict import fading_map, predict_location
from app.spline_basis import build_basis, make_knots
from app.utils import atomic_output_dir, atomic_write_text


class FadingPipeline:
    """Runs one subcommand end to end: load, compute, persist, trace."""

    def __init__(
        self,
        config: Optional[RunConfig] = None,
        log_path: str = "logs/trace.jsonl",
        logger: TraceLogger | None = None,
        record_events: bool = False,
    ) -> None:
        self.config = config or RunConfig()
        self.logger = logger or TraceLogger(log_path=log_path, record_events=record_events)

    def _path(self, name: str, flag: str) -> Path:
        value = getattr(self.config.paths, name)
        if value is None:
            raise ValidationError(f"{flag} is required for this command.")
        return Path(value)

    def _dataset(self) -> Dataset:
        path = self._path("data", "--data")
        dataset = load_dataset(path)
        self.logger.log("data_loaded", path=path, locations=dataset.n_locations, times=dataset.n_times)
        return dataset

    def _fitted_run(self) -> FitResult:
        fit = load_fit(self._path("run", "--run"))
        convergence_gate(fit.draws, self.config.force, self.logger, hint="refit with more warmup/samples")
        return fit

    def fit(self) -> Dict[str, Any]:
        cfg = self.config
        dataset = self._dataset()
        out = self._path("out", "--out")
        fit = fit_model(dataset, cfg.model, cfg.sampler, logger=self.logger)
        with atomic_output_dir(out, cfg.force) as staging:
            write_fit(fit, staging, cfg.model_dump(mode="json"))
        # draws are written first so a failed run can still be inspected
        convergence_gate(fit.draws, cfg.force, self.logger)
        return {
            "out": str(out),
            "max_rhat": float(np.max(fit.draws.rhat)),
            "min_ess_bulk": float(np.min(fit.draws.ess_bulk)),
            "divergences": fit.draws.divergence_count,
            "warnings": fit.draws.warnings,
        }

    def predict(self, location: Optional[str] = None, inputs: Optional[Sequence[float]] = None) -> Dict[str, Any]:
        cfg = self.config
        if (location is None) == (inputs is None):
            raise ValidationError("Pass exactly one of --location or --inputs.")
        fit = self._fitted_run()
        if location is not None:
            xstar = fit.standardized.X[fit.dataset.index_of(location)]
            label = location
        else:
            xstar = fit.standardized.apply(np.asarray(inputs, dtype=float))[0]
            label = "new"
        rng = np.random.default_rng(cfg.sampler.seed)
        series = predict_location(xstar, fit, rng=rng, config=cfg.predict)
        self.logger.log(
            "predict_location_result",
            location=label,
            retained=series.draws.shape[0],
            rejection_rate=series.rejection_rate,
            final_mean=float(series.mean[-1]),
        )
        out = self._path("out", "--out")
        with atomic_output_dir(out, cfg.force) as staging:
            write_prediction(series, staging / f"prediction_{label}.csv")
        return {"out": str(out), "location": label, "rejection_rate": series.rejection_rate, "mean": series.mean.tolist()}

    def map(self, times: Optional[Sequence[float]] = None) -> Dict[str, Any]:
        cfg = self.config
        fit = self._fitted_run()
        grid = load_grid(self._path("grid", "--grid"))
        self.logger.log("map_start", pixels=grid.n_pixels, draws=min(fit.n_draws, cfg.predict.map_max_draws))
        fmap = fading_map(grid, fit, config=cfg.predict, logger=self.logger)
        out = self._path("out", "--out")
        with atomic_output_dir(out, cfg.force) as staging:
            paths = write_map(fmap, staging, times=times, gray_max=cfg.predict.gray_max)
        perceptible = fmap.mask.mean(axis=0)
        self.logger.log("map_done", pixels=grid.n_pixels, perceptible_fraction_last=float(perceptible[-1]))
        return {"out": str(out), "files": [p.name for p in paths], "perceptible_fraction": perceptible.tolist()}

    def cv(self, scheme: str = "cv1", compare: bool = False, max_folds: Optional[int] = None) -> Dict[str, Any]:
        cfg = self.config
        dataset = self._dataset()
        out = self._path("out", "--out")
        threads = cfg.sampler.threads
        kwargs: Dict[str, Any] = {"threads": threads, "logger": self.logger}
        if scheme == "cv1":
            if max_folds is not None:
                candidates = [(t, i) for i in range(dataset.n_locations) for t in range(1, dataset.n_times)]
                kwargs["folds"] = candidates[:max_folds]
        elif scheme == "cv2":
            kwargs["predict_config"] = cfg.predict
            if max_folds is not None:
                kwargs["locations"] = list(range(min(max_folds, dataset.n_locations)))
        else:
            raise ValidationError(f"Unknown CV scheme {scheme!r}; use cv1 or cv2.")
        # inner fits stay sequential; parallelism goes to folds
        sampler = cfg.sampler.model_copy(update={"threads": 1})

        if compare:
            reports = compare_models(dataset, cfg.model, sampler, scheme, **kwargs)
        else:
            run = cv1 if scheme == "cv1" else cv2
            reports = {cfg.model.tag: run(dataset, cfg.model, sampler, **kwargs)}
        for report in reports.values():
            require_converged(report)

        payload = {
            "scheme": scheme,
            "reports": {tag: report.to_dict() for tag, report in reports.items()},
            "reference": REFERENCE_TABLE[scheme],
        }
        atomic_write_text(out, json.dumps(payload, indent=2, sort_keys=True) + "\n", cfg.force)
        summary = {tag: {"elpd": r.elpd, "mse": r.mse, "excluded": r.excluded_count} for tag, r in reports.items()}
        self.logger.log("cv_done", scheme=scheme, summary=summary)
        return {"out": str(out), "scheme": scheme, "summary": summary}

    def simulate(self, seed: int = 0, n_locations: int = 13, n_times: int = 11, grid_size: int = 50) -> Dict[str, Any]:
        cfg = self.config
        dataset, truth = generate_synthetic(
            n_locations=n_locations,
            n_times=n_times,
            seed=seed,
            knots=cfg.model.knots,
            penalty_power=cfg.model.penalty_power,
        )
        out = self._path("out", "--out")
        with atomic_output_dir(out, cfg.force) as staging:
            save_dataset(dataset, staging / "data.csv")
            save_grid(synthetic_grid(dataset, (grid_size, grid_size)), staging / "grid.csv")
            (staging / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n", encoding="utf-8")
        self.logger.log("simulate_done", seed=seed, locations=n_locations, times=n_times, prior_attempts=truth.attempts)
        return {"out": str(out), "locations": n_locations, "times": n_times, "prior_attempts": truth.attempts}

    def basis(self, n_times: Optional[int] = None) -> Dict[str, Any]:
        cfg = self.config
        if cfg.paths.data is not None:
            times = self._dataset().times
        else:
            times = np.arange(1.0, (n_times or 11) + 1.0)
        basis = build_basis(times, make_knots(times, cfg.model.knots), cfg.model.penalty_power)
        out = self._path("out", "--out")
        with atomic_output_dir(out, cfg.force) as staging:
            paths = write_basis(basis, staging)
        self.logger.log("basis_dump_done", knots=basis.knots, times=basis.n_times)
        return {"out": str(out), "files": [p.name for p in paths], "knots": basis.knots.tolist()}
