import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from app.config import ModelConfig, PredictConfig, SamplerConfig
from app.data_model import standardize_inputs
from app.errors import ConvergenceError, DimensionError, EmptyPredictiveError, PriorRejectionError
from app.evaluate import (
    REFERENCE_TABLE,
    CVReport,
    FoldRecord,
    compare_models,
    cv1,
    cv2,
    generate_synthetic,
    grid_posterior_oracle,
    synthetic_grid,
)
from app.evaluate import cross_validation
from app.evaluate.cross_validation import mixture_log_density, require_converged
from app.fitting import fit_model
from app.kernel import Hyperparams, se_ard_cov
from app.model import FadingModel, curves
from app.predict import predict_location
from app.sampler import mcse_mean, run_hmc
from app.spline_basis import build_basis, make_knots

TINY_HYPER = Hyperparams(alpha=[0.01], rho=[1.0, 1.0, 1.0, 1.0], sigma=0.3)


@pytest.fixture(scope="module")
def tiny():
    """Two series, five time points, one knot: small enough for grid quadrature."""
    times = np.arange(1.0, 6.0)
    basis = build_basis(times, make_knots(times, 1))
    X = np.random.default_rng(12).normal(size=(2, 5)) * 0.5
    return basis, X


def _rising(times, slope, n=2):
    Y = np.repeat((slope * (times - times[0]))[:, None], n, axis=1)
    Y[0] = 0.0
    return Y


class TestSynthetic:
    def test_series_are_anchored_and_monotone(self, synthetic5):
        dataset, truth = synthetic5
        assert_allclose(dataset.Y[0], 0.0)
        assert np.min(np.diff(truth.f, axis=0)) >= -1e-12
        _, fp = curves(truth.beta, truth.b, build_basis(dataset.times, truth.knots))
        assert np.min(fp) >= 0.0
        assert dataset.location_ids[0] == "L01"

    def test_same_seed_same_data(self):
        first, _ = generate_synthetic(n_locations=4, n_times=6, seed=21)
        second, _ = generate_synthetic(n_locations=4, n_times=6, seed=21)
        other, _ = generate_synthetic(n_locations=4, n_times=6, seed=22)
        np.testing.assert_array_equal(first.Y, second.Y)
        np.testing.assert_array_equal(first.X_raw, second.X_raw)
        assert not np.array_equal(first.Y, other.Y)

    def test_standardized_statistics(self):
        dataset, _ = generate_synthetic(n_locations=300, n_times=4, seed=2, truth=Hyperparams([1e-4], [1e3] * 4, 0.3))
        X = standardize_inputs(dataset.X_raw).X
        assert_allclose(X[:, :3].std(axis=0, ddof=1), 1.0, atol=1e-12)
        assert_allclose(X[:, :3].mean(axis=0), [5.255, 9.704, 5.155], rtol=0.05)

    def test_unreachable_prior_raises(self):
        # independent series: every one of 40 must be monotone by chance
        truth = Hyperparams(alpha=[1.0], rho=[1e-3] * 4, sigma=0.3)
        with pytest.raises(PriorRejectionError):
            generate_synthetic(truth, n_locations=40, n_times=6, seed=0, max_attempts=5)

    def test_truth_record_is_serializable(self, synthetic5):
        _, truth = synthetic5
        payload = truth.to_dict()
        assert payload["seed"] == 3
        assert len(payload["rho"]) == 4
        assert payload["prior_attempts"] >= 1

    def test_grid_covers_footprint(self, synthetic5):
        dataset, _ = synthetic5
        grid = synthetic_grid(dataset, (4, 3))
        assert grid.n_pixels == 12 + dataset.n_locations
        np.testing.assert_array_equal(grid.inputs[-dataset.n_locations :], dataset.X_raw)
        assert grid.px.min() == pytest.approx(dataset.X_raw[:, 3].min())
        assert grid.inputs.shape[1] == 5


class TestQuadratureOracle:
    def test_prior_only_recovers_prior_moments(self, tiny):
        basis, X = tiny
        Y = _rising(basis.times, 0.0)
        mask = np.zeros_like(Y, dtype=bool)
        moments = grid_posterior_oracle(Y, X, basis, TINY_HYPER, mask=mask)
        cov = se_ard_cov(X, TINY_HYPER.rho)
        prior = 0.01 * (cov.C + cov.jitter * np.eye(2))
        assert_allclose(moments.mean, 0.0, atol=1e-4)
        assert_allclose(moments.cov, prior, atol=1e-4)

    def test_refuses_larger_problems(self, tiny, basis11):
        basis, X = tiny
        with pytest.raises(DimensionError):
            grid_posterior_oracle(np.zeros((11, 2)), X, basis11, TINY_HYPER)
        with pytest.raises(DimensionError):
            grid_posterior_oracle(np.zeros((5, 3)), np.zeros((3, 5)), basis, TINY_HYPER)

    def test_monotonicity_flips_sign_of_posterior(self, tiny):
        basis, X = tiny
        Y = _rising(basis.times, -0.05)
        model = FadingModel(Y, X, basis, ModelConfig(), fixed_hyper=TINY_HYPER)
        free = FadingModel(Y, X, basis, ModelConfig(monotonicity=False), fixed_hyper=TINY_HYPER)
        constrained = grid_posterior_oracle(Y, X, basis, TINY_HYPER, model.constraints, points=801, width=2.0)
        unconstrained = grid_posterior_oracle(Y, X, basis, TINY_HYPER, free.constraints, points=801, width=2.0)
        # with one knot f′(t1) = -8·b, so a rising curve needs b ≤ 0
        assert np.all(unconstrained.mean > 0)
        assert np.all(constrained.mean < 0)

    @pytest.mark.parametrize("monotonicity", [True, False], ids=["probit", "gaussian"])
    def test_hmc_agrees_with_quadrature(self, tiny, monotonicity):
        basis, X = tiny
        Y = _rising(basis.times, 0.05)
        Y[1:, 1] += np.array([0.1, -0.2, 0.05, 0.1])
        model = FadingModel(Y, X, basis, ModelConfig(monotonicity=monotonicity), fixed_hyper=TINY_HYPER)
        oracle = grid_posterior_oracle(Y, X, basis, TINY_HYPER, model.constraints, points=801, width=2.0)

        config = SamplerConfig(chains=4, warmup=500, samples=1500, seed=17)
        result = run_hmc(model, config, init=lambda rng: -0.01 + 0.002 * rng.standard_normal(2))
        flat = result.flat()
        mcse = mcse_mean(result.draws)
        assert np.all(np.abs(flat.mean(axis=0) - oracle.mean) < 3 * mcse + 1e-4)
        assert_allclose(flat.var(axis=0, ddof=1), oracle.variance, rtol=0.2)
        if monotonicity:
            assert flat.max() < 1e-3


class TestMixtureDensity:
    def test_identical_draws_reduce_to_normal_density(self):
        s = 0.4
        value = mixture_log_density(np.array(1.5), np.full(50, 1.5), np.full(50, s))
        assert value == pytest.approx(-0.5 * np.log(2 * np.pi * s**2))

    def test_averages_densities_not_logs(self):
        means, sigmas = np.array([0.0, 2.0]), np.array([1.0, 1.0])
        expected = np.log(0.5 * (stats.norm.pdf(1.0, 0, 1) + stats.norm.pdf(1.0, 2, 1)))
        assert mixture_log_density(np.array(1.0), means, sigmas) == pytest.approx(expected)


class TestReport:
    def _report(self):
        folds = [
            FoldRecord(fold=0, location="A", held_out=[[1, 0]], elpd=-1.0, squared_error=0.5, pit=0.2, interval_width=1.0, coverage=1.0, max_rhat=1.01),
            FoldRecord(fold=1, location="B", held_out=[[2, 1]], elpd=-3.0, squared_error=1.5, pit=0.7, interval_width=2.0, coverage=0.0, max_rhat=1.02),
            FoldRecord(fold=2, location="C", held_out=[[3, 2]], elpd=-50.0, squared_error=9.0, pit=0.99, max_rhat=1.2, converged=False),
        ]
        return CVReport(scheme="cv1", model="with_derivatives", folds=folds)

    def test_excludes_unconverged_folds(self):
        report = self._report()
        assert report.excluded_count == 1
        assert report.elpd == pytest.approx(-2.0)
        assert report.elpd_sum == pytest.approx(-4.0)
        assert report.mse == pytest.approx(1.0)
        assert report.coverage == pytest.approx(0.5)
        assert report.mean_interval_width == pytest.approx(1.5)
        assert_allclose(report.pit_values, [0.2, 0.7])

    def test_fold_order_does_not_matter(self):
        report = self._report()
        reversed_report = CVReport(report.scheme, report.model, list(reversed(report.folds)))
        assert reversed_report.elpd == pytest.approx(report.elpd)
        assert reversed_report.mse == pytest.approx(report.mse)

    def test_to_dict(self):
        payload = self._report().to_dict()
        assert payload["folds_total"] == 3
        assert payload["folds_excluded"] == 1
        assert 0.0 <= payload["pit_ks_pvalue"] <= 1.0

    def test_all_folds_failing(self):
        report = self._report()
        for fold in report.folds:
            fold.converged = False
        with pytest.raises(ConvergenceError):
            require_converged(report)

    def test_empty_predictive_fold_is_excluded(self):
        report = self._report()
        report.folds.append(FoldRecord(fold=3, location="D", held_out=[[1, 3]], max_rhat=1.0, empty_predictive=True))
        assert report.excluded_count == 2
        assert report.elpd == pytest.approx(-2.0)
        assert report.to_dict()["folds_empty_predictive"] == 1

    def test_all_folds_empty(self):
        folds = [FoldRecord(fold=k, location=str(k), held_out=[[1, k]], max_rhat=1.0, empty_predictive=True) for k in range(2)]
        with pytest.raises(EmptyPredictiveError):
            require_converged(CVReport(scheme="cv2", model="with_derivatives", folds=folds))

    def test_reference_table_present(self):
        assert REFERENCE_TABLE["cv2"]["with_derivatives"]["elpd"] > REFERENCE_TABLE["cv2"]["without_derivatives"]["elpd"]


class TestCrossValidation:
    def test_cv1_selected_folds(self, small_dataset, fast_sampler):
        report = cv1(small_dataset, ModelConfig(), fast_sampler, folds=[(3, 0), (6, 2)], threads=2)
        assert report.scheme == "cv1"
        assert [fold.held_out for fold in report.folds] == [[[3, 0]], [[6, 2]]]
        for fold in report.folds:
            assert np.isfinite(fold.elpd)
            assert 0.0 <= fold.pit <= 1.0
            assert fold.interval_width > 0
            assert fold.coverage in (0.0, 1.0)

    def test_cv1_refuses_anchor_fold(self, small_dataset, fast_sampler):
        with pytest.raises(DimensionError):
            cv1(small_dataset, ModelConfig(), fast_sampler, folds=[(0, 1)])

    def test_cv2_single_location(self, small_dataset, fast_sampler):
        report = cv2(small_dataset, ModelConfig(), fast_sampler, locations=[1], predict_config=PredictConfig(max_resample=20))
        (fold,) = report.folds
        assert fold.location == small_dataset.location_ids[1]
        assert len(fold.held_out) == small_dataset.n_times - 1
        assert np.isfinite(fold.elpd) and np.isfinite(fold.squared_error)
        assert 0.0 <= fold.coverage <= 1.0
        assert 0.0 <= fold.rejection_rate <= 1.0

    def test_cv1_squared_error_uses_posterior_mean(self, small_dataset, fast_sampler, monkeypatch):
        fits = []

        def recording_fit(*args, **kwargs):
            fits.append(fit_model(*args, **kwargs))
            return fits[-1]

        monkeypatch.setattr(cross_validation, "fit_model", recording_fit)
        (fold,) = cv1(small_dataset, ModelConfig(), fast_sampler, folds=[(4, 1)]).folds
        f, _ = fits[0].latent_draws()
        assert fold.squared_error == pytest.approx((small_dataset.Y[4, 1] - f[:, 4, 1].mean()) ** 2)

    def test_cv2_empty_fold_is_recorded(self, small_dataset, fast_sampler, monkeypatch):
        empty_location = small_dataset.location_ids[2]

        def screening(xstar, fit, **kwargs):
            if empty_location not in fit.dataset.location_ids:
                raise EmptyPredictiveError("all predictive draws rejected")
            return predict_location(xstar, fit, **kwargs)

        monkeypatch.setattr(cross_validation, "predict_location", screening)
        report = cv2(small_dataset, ModelConfig(), fast_sampler, locations=[0, 2], threads=2)
        kept, empty = report.folds
        assert not kept.empty_predictive and np.isfinite(kept.elpd)
        assert empty.empty_predictive and empty.rejection_rate == 1.0
        assert report.to_dict()["folds_empty_predictive"] == 1
        assert report.excluded_count == (0 if kept.converged else 1) + 1

    def test_cv2_needs_three_locations(self, fast_sampler):
        dataset, _ = generate_synthetic(n_locations=2, n_times=5, seed=1)
        with pytest.raises(DimensionError):
            cv2(dataset, ModelConfig(), fast_sampler)

    def test_fold_seeds_do_not_depend_on_threads(self, small_dataset, fast_sampler):
        serial = cv1(small_dataset, ModelConfig(), fast_sampler, folds=[(2, 1), (4, 3)], threads=1)
        parallel = cv1(small_dataset, ModelConfig(), fast_sampler, folds=[(2, 1), (4, 3)], threads=2)
        assert [f.elpd for f in serial.folds] == [f.elpd for f in parallel.folds]

    def test_compare_models_tags(self, small_dataset, fast_sampler):
        reports = compare_models(small_dataset, ModelConfig(), fast_sampler, scheme="cv2", locations=[0])
        assert set(reports) == {"with_derivatives", "without_derivatives"}
        assert reports["without_derivatives"].model == "without_derivatives"


@pytest.mark.slow
class TestReplications:
    def test_cv1_calibration(self):
        sampler = SamplerConfig(chains=2, warmup=500, samples=500)
        pit, covered = [], []
        for rep in range(20):
            dataset, _ = generate_synthetic(seed=100 + rep)
            rng = np.random.default_rng(rep)
            folds = [(int(rng.integers(1, dataset.n_times)), int(rng.integers(dataset.n_locations))) for _ in range(5)]
            report = cv1(dataset, ModelConfig(), sampler.model_copy(update={"seed": rep}), folds=folds, threads=4)
            pit.extend(report.pit_values)
            covered.extend(fold.coverage for fold in report.included)
        assert stats.kstest(pit, "uniform").pvalue > 0.01
        assert abs(np.mean(covered) - 0.95) <= 0.07

    def test_derivatives_improve_cv2(self):
        sampler = SamplerConfig(chains=2, warmup=500, samples=500)
        wins = narrower = 0
        for rep in range(10):
            dataset, _ = generate_synthetic(seed=200 + rep)
            reports = compare_models(dataset, ModelConfig(), sampler.model_copy(update={"seed": rep}), threads=4)
            with_d, without_d = reports["with_derivatives"], reports["without_derivatives"]
            wins += with_d.elpd >= without_d.elpd and with_d.mse <= without_d.mse
            narrower += with_d.mean_interval_width < without_d.mean_interval_width
        assert wins >= 8
        assert narrower >= 8
