"""Acceptance criteria 1-9 plus the structural Scenario C check.

Each test records a one-line verdict that the terminal summary prints.
The replication studies (criteria 1-3, Scenario C) run 200 cohorts of 500
subjects with 100 bootstrap draws each and take most of the suite's time.
"""
import functools
import filecmp
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import nelder_mead_fit, random_slope_data, shrinkage_blup
from wcie.cli import main as cli_main
from wcie.data import LongitudinalDataset
from wcie.exposure import ExposureStage
from wcie.inference import BootstrapResult, parametric_bootstrap, total_variance
from wcie.mixed import Design, MixedModelFit, MixedModelSpec, build_model, fit_lmm, predict_blup
from wcie.outputs import fit_summary, write_json, write_trajectory_csv
from wcie.parallel import default_workers
from wcie.pipeline import oracle_one_stage, run_two_stage
from wcie.simulator import SimulationConfig, generate_cohort, nhs_settings, preset, run_replication_study, scenario
from wcie.splines import build_natural_cubic_basis, build_piecewise_constant_basis, weight_basis
from wcie.trajectory import OutcomeModelSpec, fit_outcome_model, trajectory_from_fit

SEED = 20240607
R, N, M = 200, 500, 100
# two interior weight knots for the flat Scenario A curve; three for the
# curved Scenario B and C curves, whose 2-knot approximation error is of the
# order of the Monte-Carlo standard error at N = 500
KNOTS = {"A": 2, "B": 3, "C": 3}


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


@functools.lru_cache(maxsize=None)
def study(scen, design="main"):
    config = preset(design, n_subjects=N)
    settings = nhs_settings(bootstrap=M, weight_knots=KNOTS[scen], seed=SEED)
    return run_replication_study(config, scenario(scen), R, settings, SEED, default_workers())


def recovery_verdict(s):
    """Mean within 2 MC SE of the truth and coverage in [0.91, 0.98] at every grid point."""
    parts, ok = [], s.n_failed == 0
    for w in ("I", "S"):
        z = np.abs(s.bias(w)) / s.mcse(w)
        cov = s.coverage(w)
        ok &= bool(np.all(z <= 2) and np.all((cov >= 0.91) & (cov <= 0.98)))
        parts.append(
            f"{w}: max|bias|/MCSE {z.max():.2f} at t={s.grid[z.argmax()]:g}, "
            f"coverage {cov.min():.3f}..{cov.max():.3f} (mean {cov.mean():.3f})"
        )
    parts.append(f"{s.n_ok} ok, {s.n_failed} failed")
    return ok, "; ".join(parts)


@pytest.mark.slow
def test_criterion_1_scenario_a_recovery():
    s = study("A")
    bI, bS = np.abs(s.bias("I")), np.abs(s.bias("S"))
    ok = bI.max() <= 0.005 and bS.max() <= 0.002 and s.n_failed == 0
    record(
        "1 Scenario A recovery",
        ok,
        f"max|bias| I {bI.max():.2e} (tol 5e-3), S {bS.max():.2e} (tol 2e-3); "
        f"coverage I {s.coverage('I').mean():.3f}, S {s.coverage('S').mean():.3f}; {s.n_failed} failed",
    )


@pytest.mark.slow
def test_criterion_2_scenario_b_recovery_and_coverage():
    record("2 Scenario B recovery/coverage", *recovery_verdict(study("B")))


@pytest.mark.slow
@pytest.mark.parametrize("design", ["spacing4", "missing20", "error18"])
def test_criterion_3_robustness(design):
    record(f"3 robustness {design}", *recovery_verdict(study("B", design)))


def test_criterion_4_lmm_matches_derivative_free_oracle():
    spec = MixedModelSpec(Design(["1", "time"]), Design(["1", "time"]))
    worst_ll, worst_rel = -np.inf, 0.0
    for k in range(10):
        d = random_slope_data(np.random.default_rng(SEED + k), 50)
        fit = fit_lmm(spec, d)
        X = np.column_stack([np.ones(len(d)), d.time])
        ref = nelder_mead_fit(d.value, X, X, d.subject, fit.phi + 0.05)
        worst_ll = max(worst_ll, -ref.fun - fit.loglik)
        worst_rel = max(worst_rel, np.max(np.abs(fit.phi - ref.x) / np.maximum(np.abs(ref.x), 1.0)))
    record(
        "4 LMM oracle equivalence",
        worst_ll <= 1e-6 and worst_rel <= 1e-4,
        f"oracle loglik excess {worst_ll:.2e} (tol 1e-6), parameter difference {worst_rel:.2e} (tol 1e-4)",
    )


def test_criterion_5_blup_closed_form():
    rng = np.random.default_rng(SEED)
    spec = MixedModelSpec(Design(["1"]), Design(["1"]))
    worst = 0.0
    for _ in range(100):
        n_i = int(rng.integers(1, 15))
        sb, se, mu = rng.uniform(0.05, 4), rng.uniform(0.05, 4), rng.normal(0, 5)
        y = mu + rng.normal(0, 3, n_i)
        fit = MixedModelFit(
            beta=np.array([mu]), B=np.array([[sb**2]]), sigma=se, loglik=0.0, param_cov=np.zeros((3, 3)),
            blups={}, fixed_names=["1"], random_names=["1"], n_obs=n_i, n_subjects=1,
        )
        d = LongitudinalDataset(["s"] * n_i, np.arange(n_i, dtype=float), y, {}, "outcome")
        b = predict_blup(fit, spec, d)[0]
        worst = max(worst, abs(b - shrinkage_blup(n_i, sb, se, (y - mu).mean())))
    record("5 BLUP closed form", worst <= 1e-10, f"max abs difference {worst:.2e} over 100 configurations (tol 1e-10)")


def test_criterion_6_total_variance_exactness():
    worked = total_variance([0.0, 2.0], [1.0, 1.0])[0, 0]
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for M_ in (2, 3, 7, 50):
        k = 4
        theta = rng.normal(size=(M_, k))
        A = rng.normal(size=(M_, k, k))
        V = A @ np.swapaxes(A, 1, 2)
        ref = sum(V) / M_ + sum(np.outer(t - theta.mean(0), t - theta.mean(0)) for t in theta) / M_
        worst = max(worst, np.max(np.abs(total_variance(theta, V) - ref)) / np.max(np.abs(ref)))

    # zero stage-1 variance: every replicate reproduces the point fit
    cfg = SimulationConfig(n_subjects=150)
    exp, out, _ = generate_cohort(cfg, scenario("A"), SEED)
    stage1 = ExposureStage(exp, ("age", "educ"))
    stage1.run()
    stage1.fit.param_cov = np.zeros_like(stage1.fit.param_cov)
    spec = OutcomeModelSpec(weight_basis(24, 2), ("age", "educ"), True)
    point = fit_outcome_model(spec, out, stage1.histories(spec.weight_basis))
    boot = parametric_bootstrap(stage1, spec, out, 4, SEED, point)
    between = np.max(np.abs(boot.between))
    rel = np.max(np.abs(boot.V_tot - point.param_cov)) / np.max(np.abs(point.param_cov))
    ok = worked == 2.0 and worst <= 1e-14 and between <= 1e-12 * np.max(np.abs(point.param_cov)) and rel <= 1e-6
    record(
        "6 total-variance exactness",
        ok,
        f"M=2 example {float(worked)!r}; hand-built sets rel. error {worst:.1e}; "
        f"zero stage-1 variance: between-term {between:.1e}, V_tot vs point covariance rel. {rel:.1e}",
    )


def test_criterion_7_spline_properties():
    checks = {}
    h = 1e-3
    nat = build_natural_cubic_basis([-18, -12, -6], (-24, 0))
    outside = np.r_[np.linspace(-60, -24 - 2 * h, 40), np.linspace(2 * h, 36, 40)]
    d2 = (nat(outside + h) - 2 * nat(outside) + nat(outside - h)) / h**2
    checks["boundary linearity"] = np.abs(d2).max() < 1e-6
    t = np.linspace(-30, 6, 301)
    checks["intercept constancy"] = np.all(nat(t)[:, 0] == 1.0)
    pw = build_piecewise_constant_basis([-24, -19, -14, -9, -4, 0])
    ind = pw.interval_indicators(np.linspace(-24, 0, 2401))
    checks["partition"] = np.all(ind.sum(axis=1) == 1.0)
    # span invariance: two bases of the same space give the same fitted values
    rng = np.random.default_rng(SEED)
    y = np.cos(t / 5) + rng.normal(0, 0.1, t.size)
    A = nat(t)
    T = rng.normal(size=(A.shape[1], A.shape[1])) + 3 * np.eye(A.shape[1])
    fa = A @ np.linalg.lstsq(A, y, rcond=None)[0]
    fb = (A @ T) @ np.linalg.lstsq(A @ T, y, rcond=None)[0]
    checks["span invariance"] = np.max(np.abs(fa - fb)) < 1e-10
    failed = [k for k, v in checks.items() if not v]
    record("7 spline properties", not failed, "all pass" if not failed else "failed: " + ", ".join(failed))


def test_criterion_8_two_stage_matches_oracle_on_dense_noise_free_exposure():
    # sigma_eps = 0 makes the exposure likelihood unbounded; 0.01 against
    # random-effect SDs of 1.2-3.6 is effectively noise-free
    cfg = SimulationConfig(
        n_subjects=500, exposure_visit_spacing=1.0, visit_jitter=0.0,
        exposure_missing_rate=0.0, sigma_eps_exposure=0.01,
    )
    exp, out, truth = generate_cohort(cfg, scenario("B"), SEED)
    stage1 = ExposureStage(exp, ("age", "educ"), basis=cfg.exposure_basis())
    stage1.run()
    spec = OutcomeModelSpec(weight_basis(24, 2), ("age", "educ"), True)
    two = trajectory_from_fit(fit_outcome_model(spec, out, stage1.histories(spec.weight_basis)), spec, stage1.grid)
    one = trajectory_from_fit(oracle_one_stage(truth.u_star, truth.ids, truth.grid, out, spec), spec, stage1.grid)
    dI = np.abs(two.gamma_I - one.gamma_I).max()
    dS = np.abs(two.gamma_S - one.gamma_S).max()
    record("8 two-stage vs oracle", max(dI, dS) <= 1e-3, f"max difference I {dI:.2e}, S {dS:.2e} (tol 1e-3)")


def test_criterion_9_thread_count_determinism(tmp_path):
    cfg = SimulationConfig(n_subjects=120)
    exp, out, _ = generate_cohort(cfg, scenario("B"), SEED)
    digests = []
    for workers in (1, 3):
        d = tmp_path / f"fit{workers}"
        d.mkdir()
        res = run_two_stage(exp, out, nhs_settings(bootstrap=12, seed=SEED, workers=workers))
        write_trajectory_csv(res.trajectory, d / "trajectory.csv")
        write_json(fit_summary(res), d / "fit_summary.json")
        digests.append(d)
    same_fit = all(filecmp.cmp(digests[0] / f, digests[1] / f, shallow=False) for f in ("trajectory.csv", "fit_summary.json"))

    runs = []
    for threads in (1, 2):
        d = tmp_path / f"sim{threads}"
        code = cli_main(["simulate", "A", "--replicates", "3", "--n", "80", "--bootstrap", "4",
                         "--seed", str(SEED), "--threads", str(threads), "--out", str(d)])
        assert code == 0
        runs.append(d)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file() and p.name != "manifest.json")
    same_sim = all(filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False) for f in files)
    record(
        "9 determinism",
        same_fit and same_sim,
        f"two-stage fit 1 vs 3 workers identical: {same_fit}; simulate study 1 vs 2 threads, {len(files)} files identical: {same_sim}",
    )


@pytest.mark.slow
def test_scenario_c_structural():
    record("C Scenario C structural", *recovery_verdict(study("C")))
