import json
import shutil

import numpy as np
import pytest

from app.artifacts import write_fit
from app.config import ModelConfig, RunConfig, SamplerConfig
from app.evaluate import generate_synthetic
from app.fitting import fit_model
from app.spline_basis import build_basis, make_knots


@pytest.fixture(scope="session")
def times11() -> np.ndarray:
    return np.arange(1.0, 12.0)


@pytest.fixture(scope="session")
def basis11(times11):
    return build_basis(times11, make_knots(times11, 3))


@pytest.fixture(scope="session")
def synthetic5():
    """N=5, T=11 synthetic dataset and its truth record."""
    return generate_synthetic(n_locations=5, n_times=11, seed=3)


@pytest.fixture(scope="session")
def fast_sampler() -> SamplerConfig:
    return SamplerConfig(chains=2, warmup=300, samples=300, seed=11)


@pytest.fixture(scope="session")
def small_dataset():
    dataset, _ = generate_synthetic(n_locations=4, n_times=8, seed=5)
    return dataset


@pytest.fixture(scope="session")
def small_fit(small_dataset, fast_sampler):
    """Default constrained model fitted to a 4-location dataset."""
    return fit_model(small_dataset, ModelConfig(), fast_sampler)


@pytest.fixture(scope="session")
def run_dir(small_fit, tmp_path_factory):
    """``small_fit`` persisted the way the fit command writes it."""
    path = tmp_path_factory.mktemp("run")
    payload = RunConfig(model=small_fit.model_config, sampler=small_fit.sampler_config).model_dump(mode="json")
    write_fit(small_fit, path, payload)
    return path


def _with_rhat(source, target, value):
    shutil.copytree(source, target)
    path = target / "diagnostics.json"
    diagnostics = json.loads(path.read_text())
    diagnostics["rhat"] = {name: value for name in diagnostics["rhat"]}
    diagnostics["max_rhat"] = value
    path.write_text(json.dumps(diagnostics))
    return target


@pytest.fixture(scope="session")
def gated_runs(run_dir, tmp_path_factory):
    """Copies of ``run_dir`` whose diagnostics pass and fail the Rhat gate."""
    root = tmp_path_factory.mktemp("gated")
    return _with_rhat(run_dir, root / "passing", 1.01), _with_rhat(run_dir, root / "failing", 1.2)


@pytest.fixture(scope="session")
def with_rhat():
    """Copy a run directory, rewriting every split-Rhat in its diagnostics."""
    return _with_rhat
