import numpy as np
import pytest

from wcie.data import LongitudinalDataset
from wcie.exposure import (
    ExposureStage,
    MissingExposureError,
    compute_history_covariates,
    exposure_spec,
    make_grid,
    predict_exposure_grid,
    sample_stage1_params,
)
from wcie.mixed import Design, MixedModelFit, MixedModelSpec, fit_lmm
from wcie.simulator import SimulationConfig, generate_cohort, scenario
from wcie.splines import build_natural_cubic_basis, weight_basis

GRID = make_grid(24)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(SimulationConfig(n_subjects=150), scenario("A"), 3)


@pytest.fixture(scope="module")
def stage(cohort):
    st = ExposureStage(cohort[0], ("age", "educ"))
    st.run()
    return st


def test_grid_has_s_plus_one_points():
    assert GRID.size == 25 and GRID[0] == -24 and GRID[-1] == 0
    np.testing.assert_array_equal(make_grid(24, 0.5)[:3], [-24, -23.5, -23])
    with pytest.raises(ValueError):
        make_grid(24, 5)


class TestHistoryCovariates:
    def test_sum_of_ones(self):
        H = compute_history_covariates(np.ones(25), weight_basis(24, 2))
        assert H[0] == 25.0

    def test_constant_exposure(self):
        b = weight_basis(24, 3)
        H = compute_history_covariates(np.full(25, 3.7), b)
        np.testing.assert_allclose(H, 3.7 * b(GRID).sum(axis=0), rtol=0, atol=1e-12)

    def test_double_loop_oracle(self):
        b = build_natural_cubic_basis([-16, -8], (-24, 0))
        u = np.random.default_rng(0).normal(25, 3, 25)
        ref = np.zeros(b.dimension)
        for k in range(b.dimension):
            for j, t in enumerate(GRID):
                ref[k] += b(t)[k] * u[j]
        np.testing.assert_allclose(compute_history_covariates(u, b), ref, rtol=0, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        b = weight_basis(24, 2)
        u, v = rng.normal(size=25), rng.normal(size=25)
        lhs = compute_history_covariates(2.5 * u - 1.5 * v, b)
        rhs = 2.5 * compute_history_covariates(u, b) - 1.5 * compute_history_covariates(v, b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_intercept_only_basis_gives_cie(self):
        u = np.random.default_rng(2).normal(size=25)
        one = build_natural_cubic_basis([-12], (-24, 0))
        assert compute_history_covariates(u, one)[0] == pytest.approx(u.sum(), abs=1e-12)

    def test_matrix_input(self):
        u = np.random.default_rng(3).normal(size=(4, 25))
        b = weight_basis(24, 2)
        H = compute_history_covariates(u, b)
        np.testing.assert_allclose(H[2], compute_history_covariates(u[2], b), atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_history_covariates(np.ones(24), weight_basis(24, 2))

    def test_finer_grid_keeps_per_year_scale(self):
        b = weight_basis(24, 2)
        fine = make_grid(24, 0.25)
        H = compute_history_covariates(np.ones(fine.size), b, fine)
        assert H[0] == pytest.approx(24.25)


class TestPrediction:
    spec = MixedModelSpec(Design(["1", "time"]), Design(["1"]))

    def fit(self, blups=None):
        return MixedModelFit(
            beta=np.array([20.0, 0.1]), B=np.array([[4.0]]), sigma=1.0, loglik=0.0,
            param_cov=np.zeros((4, 4)), blups=blups or {}, fixed_names=["1", "time"],
            random_names=["1"], n_obs=0, n_subjects=0,
        )

    def subject(self, y):
        return LongitudinalDataset(["a"] * len(y), [-20, -10, 0][: len(y)], y, {}, "exposure")

    def test_zero_blup_gives_population_curve(self):
        pred = predict_exposure_grid(self.fit({"a": np.zeros(1)}), self.spec, self.subject([1.0]), GRID)
        np.testing.assert_allclose(pred, 20 + 0.1 * GRID, atol=1e-12)

    def test_random_intercept_is_constant_shift(self):
        d = self.subject([19.0, 21.5, 23.0])
        pred = predict_exposure_grid(self.fit(), self.spec, d, GRID)
        shift = pred - (20 + 0.1 * GRID)
        assert np.max(np.abs(shift - shift[0])) < 1e-12
        assert shift[0] != 0

    def test_no_records(self):
        with pytest.raises(MissingExposureError):
            predict_exposure_grid(self.fit(), self.spec, LongitudinalDataset([], [], [], {}, "exposure"), GRID)

    @pytest.mark.filterwarnings("ignore:observed information")
    def test_noise_free_linear_exposure(self):
        rng = np.random.default_rng(4)
        sid, tt, yy = [], [], []
        for i in range(40):
            t = np.arange(-24, 1, 2.0)
            a, s = rng.normal(0, 1), rng.normal(0, 0.05)
            y = 20 + a + (0.1 + s) * (t + 24) + rng.normal(0, 1e-6, t.size)
            sid += [f"s{i:02d}"] * t.size
            tt += t.tolist()
            yy += y.tolist()
        # subject of interest follows the population line exactly
        t = np.arange(-24, 1, 2.0)
        sid += ["target"] * 13
        tt += t.tolist()
        yy += (20 + 0.1 * (t + 24)).tolist()
        d = LongitudinalDataset(sid, tt, yy, {}, "exposure")
        spec = MixedModelSpec(Design(["1", "time"]), Design(["1", "time"]))
        fit = fit_lmm(spec, d)
        pred = predict_exposure_grid(fit, spec, d.select(["target"]), GRID)
        assert np.max(np.abs(pred - (20 + 0.1 * (GRID + 24)))) < 1e-3

    def test_stage_matches_per_subject_prediction(self, stage, cohort):
        exp = cohort[0]
        U = stage.predicted()
        for i in (0, 7, 42):
            sid = stage.ids[i]
            single = predict_exposure_grid(stage.fit, stage.spec, exp.select([sid]), stage.grid)
            np.testing.assert_allclose(U[i], single, atol=1e-8)

    def test_grid_completeness(self, stage, cohort):
        # identical parameters and BLUP give the same history whatever the visits
        exp = cohort[0]
        sid = stage.ids[5]
        sub = exp.select([sid])
        blup = stage.fit.blups[sid]
        full = predict_exposure_grid(stage.fit, stage.spec, sub, stage.grid, blup=blup)
        fewer = predict_exposure_grid(stage.fit, stage.spec, sub.take(np.arange(2)), stage.grid, blup=blup)
        np.testing.assert_array_equal(full, fewer)


class TestStage1Draws:
    def test_zero_covariance_returns_estimate(self, stage):
        fit = stage.fit
        saved = fit.param_cov
        try:
            fit.param_cov = np.zeros_like(saved)
            beta, sigma, B = sample_stage1_params(fit, np.random.default_rng(0))
        finally:
            fit.param_cov = saved
        np.testing.assert_allclose(beta, fit.beta, rtol=1e-12)
        assert sigma == pytest.approx(fit.sigma, rel=1e-12)
        np.testing.assert_allclose(B, fit.B, atol=1e-10 * np.abs(fit.B).max())

    def test_draw_moments(self, stage):
        fit = stage.fit
        rng = np.random.default_rng(5)
        n = 10_000
        phi = fit.phi
        cov = fit.param_cov
        w, V = np.linalg.eigh((cov + cov.T) / 2)
        root = V * np.sqrt(np.clip(w, 0, None))
        draws = phi + rng.standard_normal((n, phi.size)) @ root.T
        p = fit.beta.size
        se = np.sqrt(np.diag(cov))[:p]
        assert np.all(np.abs(draws[:, :p].mean(axis=0) - fit.beta) <= 4 * se / np.sqrt(n))
        emp = np.cov(draws.T)
        assert np.linalg.norm(emp - cov) <= 0.1 * np.linalg.norm(cov)

    def test_sampler_mean_matches_estimate(self, stage):
        fit = stage.fit
        rng = np.random.default_rng(6)
        n = 10_000
        p = fit.beta.size
        betas = np.array([sample_stage1_params(fit, rng)[0] for _ in range(n)])
        se = np.sqrt(np.diag(fit.param_cov))[:p]
        assert np.all(np.abs(betas.mean(axis=0) - fit.beta) <= 4 * se / np.sqrt(n))
        emp = np.cov(betas.T)
        assert np.linalg.norm(emp - fit.beta_cov) <= 0.1 * np.linalg.norm(fit.beta_cov)

    def test_draws_decode_validly(self, stage):
        rng = np.random.default_rng(7)
        for _ in range(50):
            beta, sigma, B = sample_stage1_params(stage.fit, rng)
            assert sigma > 0
            assert np.linalg.eigvalsh(B).min() >= -1e-9 * np.abs(B).max()

    def test_draw_recomputes_blups(self, stage):
        u = stage.draw(np.random.default_rng(8))
        assert u.shape == (len(stage.ids), 25)
        assert not np.allclose(u, stage.predicted())


def test_exposure_spec_columns():
    b = build_natural_cubic_basis([-16, -8], (-24, 0))
    spec = exposure_spec(b, ("age",))
    frame = {"time": np.array([-24.0, 0.0]), "age": np.array([50.0, 50.0])}
    assert spec.fixed(frame).shape == (2, 1 + 1 + 3)
    assert spec.random(frame).shape == (2, 4)


def test_stage_rejects_empty_data():
    with pytest.raises(MissingExposureError):
        ExposureStage(LongitudinalDataset([], [], [], {}, "exposure"))
