from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from app.config import ModelConfig, PredictConfig, SamplerConfig
from app.data_model import Dataset
from app.errors import ConvergenceError, DimensionError, EmptyPredictiveError
from app.fitting import FitResult, fit_model
from app.logger import TraceLogger
from app.predict import predict_location

Scheme = Literal["cv1", "cv2"]
RHAT_THRESHOLD = 1.05


@dataclass
class FoldRecord:
    fold: int
    location: str
    held_out: List[List[int]]
    elpd: float = float("nan")
    squared_error: float = float("nan")
    pit: Optional[float] = None
    interval_width: float = float("nan")
    coverage: float = float("nan")
    max_rhat: float = float("nan")
    converged: bool = True
    rejection_rate: Optional[float] = None
    empty_predictive: bool = False


@dataclass
class CVReport:
    scheme: Scheme
    model: str
    folds: List[FoldRecord] = field(default_factory=list)

    @property
    def included(self) -> List[FoldRecord]:
        return [fold for fold in self.folds if fold.converged and not fold.empty_predictive]

    @property
    def excluded_count(self) -> int:
        return len(self.folds) - len(self.included)

    def _values(self, name: str) -> np.ndarray:
        return np.array([getattr(fold, name) for fold in self.included], dtype=float)

    @property
    def elpd(self) -> float:
        """Mean per-fold log predictive density."""
        return float(np.mean(self._values("elpd"))) if self.included else float("nan")

    @property
    def elpd_sum(self) -> float:
        return float(np.sum(self._values("elpd")))

    @property
    def mse(self) -> float:
        return float(np.mean(self._values("squared_error"))) if self.included else float("nan")

    @property
    def mean_interval_width(self) -> float:
        return float(np.mean(self._values("interval_width"))) if self.included else float("nan")

    @property
    def coverage(self) -> float:
        return float(np.mean(self._values("coverage"))) if self.included else float("nan")

    @property
    def pit_values(self) -> np.ndarray:
        return np.array([fold.pit for fold in self.included if fold.pit is not None], dtype=float)

    def pit_ks_pvalue(self) -> Optional[float]:
        """p-value of a Kolmogorov-Smirnov test of the LOO-PIT values against U(0, 1)."""
        pit = self.pit_values
        if pit.size < 2:
            return None
        return float(stats.kstest(pit, "uniform").pvalue)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "model": self.model,
            "elpd": self.elpd,
            "elpd_sum": self.elpd_sum,
            "mse": self.mse,
            "mean_interval_width": self.mean_interval_width,
            "coverage": self.coverage,
            "pit_ks_pvalue": self.pit_ks_pvalue(),
            "folds_total": len(self.folds),
            "folds_excluded": self.excluded_count,
            "folds_empty_predictive": sum(fold.empty_predictive for fold in self.folds),
            "folds": [asdict(fold) for fold in self.folds],
        }


def mixture_log_density(y: np.ndarray, means: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """log of the draw-averaged Normal density at ``y``; draws run along axis 0."""
    log_density = stats.norm.logpdf(y, means, sigmas)
    return logsumexp(log_density, axis=0) - np.log(log_density.shape[0])


def _fold_sampler(sampler_config: SamplerConfig, fold: int) -> SamplerConfig:
    seed = int(np.random.SeedSequence([sampler_config.seed, fold]).generate_state(1)[0])
    return sampler_config.model_copy(update={"seed": seed})


def _run_folds(
    count: int,
    run_fold: Callable[[int], FoldRecord],
    threads: int,
    logger: Optional[TraceLogger],
) -> List[FoldRecord]:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(run_fold, range(count)))
    if logger:
        for record in records:
            logger.log("cv_fold_result", **asdict(record))
    return records


def _max_rhat(fit: FitResult) -> float:
    return float(np.max(fit.draws.rhat))


def _interval(draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.quantile(draws, 0.025, axis=0), np.quantile(draws, 0.975, axis=0)


def cv1(
    dataset: Dataset,
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    *,
    folds: Optional[List[tuple[int, int]]] = None,
    threads: int = 1,
    logger: Optional[TraceLogger] = None,
) -> CVReport:
    """Leave one observation out, refitting for every held-out (t, i).

    The anchor observations at the first time point are never held out.
    ``folds`` restricts the run to selected (time index, location index)
    pairs.
    """
    candidates = folds or [(t, i) for i in range(dataset.n_locations) for t in range(1, dataset.n_times)]
    if any(t == 0 for t, _ in candidates):
        raise DimensionError("Observations at the first time point are exact constraints and cannot be held out.")
    noise_rng_seed = sampler_config.seed

    def run_fold(index: int) -> FoldRecord:
        t, i = candidates[index]
        mask = np.ones((dataset.n_times, dataset.n_locations), dtype=bool)
        mask[t, i] = False
        fit = fit_model(dataset, model_config, _fold_sampler(sampler_config, index), mask=mask)
        record = FoldRecord(fold=index, location=dataset.location_ids[i], held_out=[[t, i]], max_rhat=_max_rhat(fit))
        record.converged = record.max_rhat < RHAT_THRESHOLD

        f, _ = fit.latent_draws()
        f_ti = f[:, t, i]
        sigma = fit.draws.column("sigma").ravel()
        y = dataset.Y[t, i]
        record.elpd = float(mixture_log_density(y, f_ti, sigma))
        rng = np.random.default_rng([noise_rng_seed, index])
        replicated = f_ti + sigma * rng.standard_normal(f_ti.size)
        record.pit = float(np.mean(replicated <= y))
        record.squared_error = float((y - f_ti.mean()) ** 2)
        lower, upper = _interval(replicated)
        record.interval_width = float(upper - lower)
        record.coverage = float(lower <= y <= upper)
        return record

    records = _run_folds(len(candidates), run_fold, threads, logger)
    return CVReport(scheme="cv1", model=model_config.tag, folds=records)


def cv2(
    dataset: Dataset,
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    *,
    predict_config: Optional[PredictConfig] = None,
    locations: Optional[List[int]] = None,
    threads: int = 1,
    logger: Optional[TraceLogger] = None,
) -> CVReport:
    """Leave one location out: refit without a series and predict it from its inputs."""
    if dataset.n_locations < 3:
        raise DimensionError("Leave-one-location-out needs at least 3 locations.")
    candidates = locations if locations is not None else list(range(dataset.n_locations))
    predict_config = predict_config or PredictConfig()

    def run_fold(index: int) -> FoldRecord:
        i = candidates[index]
        train = dataset.without_location(i)
        fit = fit_model(train, model_config, _fold_sampler(sampler_config, index))
        record = FoldRecord(
            fold=index,
            location=dataset.location_ids[i],
            held_out=[[t, i] for t in range(1, dataset.n_times)],
            max_rhat=_max_rhat(fit),
        )
        record.converged = record.max_rhat < RHAT_THRESHOLD
        xstar = fit.standardized.apply(dataset.X_raw[i])
        try:
            series = predict_location(
                xstar,
                fit,
                rng=np.random.default_rng([sampler_config.seed, index]),
                config=predict_config,
            )
        except EmptyPredictiveError:
            # excluded from the aggregates like an unconverged fold
            record.empty_predictive = True
            record.rejection_rate = 1.0
            return record
        y = dataset.Y[1:, i]
        latent = series.latent[:, 1:]
        record.elpd = float(np.sum(mixture_log_density(y[None, :], latent, series.sigma[:, None])))
        record.squared_error = float(np.mean((y - series.mean[1:]) ** 2))
        lower, upper = series.lower95[1:], series.upper95[1:]
        record.interval_width = float(np.mean(upper - lower))
        record.coverage = float(np.mean((lower <= y) & (y <= upper)))
        record.rejection_rate = series.rejection_rate
        return record

    records = _run_folds(len(candidates), run_fold, threads, logger)
    return CVReport(scheme="cv2", model=model_config.tag, folds=records)


def compare_models(
    dataset: Dataset,
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    scheme: Scheme = "cv2",
    **kwargs: Any,
) -> Dict[str, CVReport]:
    """Run one scheme with and without the derivative constraints."""
    run = cv1 if scheme == "cv1" else cv2
    with_derivatives = model_config if model_config.uses_derivatives else model_config.model_copy(
        update={"monotonicity": True, "saturation": True}
    )
    return {
        "with_derivatives": run(dataset, with_derivatives, sampler_config, **kwargs),
        "without_derivatives": run(dataset, with_derivatives.without_derivatives(), sampler_config, **kwargs),
    }


def require_converged(report: CVReport) -> None:
    """Raise when no fold is left to aggregate."""
    if not report.folds or report.included:
        return
    if all(fold.converged for fold in report.folds):
        raise EmptyPredictiveError(
            f"Every {report.scheme} fold lost all predictive draws to monotone screening; raise predict.max_resample in the config file."
        )
    unconverged = [fold for fold in report.folds if not fold.converged]
    raise ConvergenceError(
        f"{len(unconverged)} of {len(report.folds)} {report.scheme} folds failed the Rhat < {RHAT_THRESHOLD} gate "
        "and none of the rest produced predictive draws.",
        failing=[fold.location for fold in unconverged],
    )
