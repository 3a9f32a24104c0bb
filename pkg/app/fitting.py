from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

import numpy as np
import pandas as pd

from app.config import ModelConfig, SamplerConfig
from app.data_model import Dataset, StandardizedInputs, standardize_inputs
from app.errors import ConvergenceError
from app.kernel import Hyperparams
from app.logger import TraceLogger
from app.model import FadingModel, LatentState
from app.sampler import PosteriorDraws, mcse_mean, run_hmc
from app.spline_basis import SplineBasis, build_basis, make_knots

SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass
class FitResult:
    """A fitted posterior together with everything needed to reuse it."""

    dataset: Dataset
    standardized: StandardizedInputs
    basis: SplineBasis
    model: FadingModel
    draws: PosteriorDraws
    model_config: ModelConfig
    sampler_config: SamplerConfig

    @property
    def n_draws(self) -> int:
        return self.draws.n_chains * self.draws.n_samples

    def state(self, index: int) -> LatentState:
        """Latent state of flat draw ``index`` (chains stacked in order)."""
        layout = self.model.layout
        return layout.unpack(layout.unconstrain(self.draws.flat()[index]))

    def states(self, indices: Optional[np.ndarray] = None) -> Iterator[LatentState]:
        rows = range(self.n_draws) if indices is None else indices
        for index in rows:
            yield self.state(int(index))

    def latent_draws(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior draws of f and f′ at the observed series, each S×T×N."""
        f_all, fp_all = [], []
        for state in self.states():
            f, fp = self.model.latent(state)
            f_all.append(f)
            fp_all.append(fp)
        return np.stack(f_all), np.stack(fp_all)


def build_model(
    dataset: Dataset,
    config: ModelConfig,
    *,
    mask: Optional[np.ndarray] = None,
    fixed_hyper: Optional[Hyperparams] = None,
) -> tuple[StandardizedInputs, SplineBasis, FadingModel]:
    standardized = standardize_inputs(dataset.X_raw, center=config.center_inputs)
    basis = build_basis(dataset.times, make_knots(dataset.times, config.knots), config.penalty_power)
    model = FadingModel(dataset.Y, standardized.X, basis, config, mask=mask, fixed_hyper=fixed_hyper)
    return standardized, basis, model


def fit_model(
    dataset: Dataset,
    model_config: ModelConfig,
    sampler_config: SamplerConfig,
    *,
    mask: Optional[np.ndarray] = None,
    logger: Optional[TraceLogger] = None,
) -> FitResult:
    standardized, basis, model = build_model(dataset, model_config, mask=mask)
    if logger:
        logger.log(
            "fit_start",
            locations=dataset.n_locations,
            times=dataset.n_times,
            knots=basis.n_knots,
            dim=model.dim,
            model=model_config.tag,
            chains=sampler_config.chains,
            seed=sampler_config.seed,
        )
    draws = run_hmc(
        model,
        sampler_config,
        init=lambda rng: model.initial_point(rng, sampler_config.init_scale),
        param_names=model.param_names,
        transform=model.layout.constrain,
        logger=logger,
    )
    if logger:
        logger.log(
            "fit_done",
            max_rhat=float(np.max(draws.rhat)),
            min_ess_bulk=float(np.min(draws.ess_bulk)),
            divergences=draws.divergence_count,
        )
    return FitResult(dataset, standardized, basis, model, draws, model_config, sampler_config)


def convergence_gate(
    draws: PosteriorDraws,
    force: bool = False,
    logger: Optional[TraceLogger] = None,
    hint: str = "increase --warmup/--samples",
) -> List[str]:
    """Parameters with split-Rhat >= 1.05; raises unless ``force`` accepts them."""
    failing = draws.failing_parameters()
    if logger is not None:
        logger.log(
            "convergence_gate_result",
            passed=not failing,
            failing=failing,
            max_rhat=float(np.max(draws.rhat)),
            forced=force,
        )
    if failing and not force:
        raise ConvergenceError(
            f"{len(failing)} parameter(s) have split-Rhat >= 1.05 (e.g. {failing[0]}); "
            f"{hint} or rerun with --force to accept.",
            failing=failing,
        )
    return failing


def hyperparameter_names(draws: PosteriorDraws) -> list[str]:
    return [n for n in draws.param_names if n.startswith(("alpha", "rho", "sigma"))]


def posterior_summary(draws: PosteriorDraws, names: Optional[list[str]] = None) -> pd.DataFrame:
    """Mean, sd, quantiles, Rhat, bulk ESS and MCSE per parameter."""
    names = names or list(draws.param_names)
    index = [draws.param_names.index(n) for n in names]
    flat = draws.flat()[:, index]
    frame = pd.DataFrame({"parameter": names, "mean": flat.mean(axis=0), "sd": flat.std(axis=0, ddof=1)})
    for q in SUMMARY_QUANTILES:
        frame[f"q{q * 100:g}"] = np.quantile(flat, q, axis=0)
    frame["rhat"] = draws.rhat[index]
    frame["ess_bulk"] = draws.ess_bulk[index]
    frame["mcse_mean"] = np.atleast_1d(mcse_mean(draws.draws[:, :, index]))
    return frame


def latent_summary(fit: FitResult) -> pd.DataFrame:
    """Posterior mean and 95% pointwise intervals of f and f′ at every observed series."""
    f, fp = fit.latent_draws()
    rows: Dict[str, list] = {k: [] for k in ("id", "t", "f_mean", "f_lower95", "f_upper95", "df_mean", "df_lower95", "df_upper95")}
    for i, location in enumerate(fit.dataset.location_ids):
        for t, time in enumerate(fit.dataset.times):
            rows["id"].append(location)
            rows["t"].append(time)
            for prefix, values in (("f", f[:, t, i]), ("df", fp[:, t, i])):
                rows[f"{prefix}_mean"].append(float(values.mean()))
                rows[f"{prefix}_lower95"].append(float(np.quantile(values, 0.025)))
                rows[f"{prefix}_upper95"].append(float(np.quantile(values, 0.975)))
    return pd.DataFrame(rows)


__all__ = ["FitResult", "build_model", "convergence_gate", "fit_model", "hyperparameter_names", "latent_summary", "posterior_summary"]
