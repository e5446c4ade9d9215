"""Parametric bootstrap over stage-1 parameters and delta-method bands."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .exposure import ExposureStage, compute_history_covariates
from .mixed import CollinearityError, ConvergenceError, MixedModelFit
from .parallel import parallel_map, replicate_rng
from .trajectory import AssociationTrajectory, OutcomeModelSpec, fit_outcome_model

log = logging.getLogger(__name__)

# stream tag separating bootstrap draws from other uses of the same seed
BOOTSTRAP_STREAM = 0xB007


class BootstrapError(RuntimeError):
    pass


@dataclass
class BootstrapResult:
    """Replicate fits and the combined covariance of the outcome parameters."""

    M: int
    theta_m: np.ndarray  # (M, k) replicate estimates
    V_m: np.ndarray  # (M, k, k) replicate covariances
    V_tot: np.ndarray
    phi_Y_point: np.ndarray
    n_failed: int = 0

    @property
    def within(self) -> np.ndarray:
        return self.V_m.mean(axis=0)

    @property
    def between(self) -> np.ndarray:
        d = self.theta_m - self.theta_m.mean(axis=0)
        return d.T @ d / self.M


def total_variance(theta_m, V_m) -> np.ndarray:
    """Mean within-replicate covariance plus the between-replicate covariance (divisor M)."""
    theta_m = np.asarray(theta_m, dtype=float)
    V_m = np.asarray(V_m, dtype=float)
    if theta_m.ndim == 1:
        theta_m = theta_m[:, None]
    if V_m.ndim == 1:
        V_m = V_m[:, None, None]
    M = theta_m.shape[0]
    d = theta_m - theta_m.mean(axis=0)
    return V_m.mean(axis=0) + d.T @ d / M


def _symmetrize_psd(V: np.ndarray) -> np.ndarray:
    V = (V + V.T) / 2
    w = np.linalg.eigvalsh(V)
    if w.size and w[0] < -1e-8 * max(w[-1], 0.0):
        raise BootstrapError(f"total covariance is not positive semidefinite (min eigenvalue {w[0]:.3g})")
    return V


def _phi_or_beta(fit: MixedModelFit) -> np.ndarray:
    try:
        return fit.phi
    except ValueError:
        return np.concatenate([fit.beta, np.full(fit.n_params - fit.beta.size, np.nan)])


class _Replicate:
    """One bootstrap replicate; a picklable callable for worker pools."""

    def __init__(self, stage1, spec, outcome, point, seed):
        self.stage1, self.spec, self.outcome, self.point, self.seed = stage1, spec, outcome, point, seed

    def __call__(self, m: int, attempt: int):
        rng = replicate_rng(self.seed, BOOTSTRAP_STREAM, m, attempt)
        u = self.stage1.draw(rng)
        H = compute_history_covariates(u, self.spec.weight_basis, self.stage1.grid)
        hist = dict(zip(self.stage1.ids, H))
        fit = fit_outcome_model(self.spec, self.outcome, hist, start=self.point)
        return _phi_or_beta(fit), fit.param_cov


def _run_one(args):
    job, m, max_attempts = args
    failures = 0
    for attempt in range(max_attempts):
        try:
            phi, V = job(m, attempt)
            return m, phi, V, failures
        except (ConvergenceError, CollinearityError, np.linalg.LinAlgError) as exc:
            log.info("bootstrap replicate %d attempt %d failed: %s", m, attempt, exc)
            failures += 1
    return m, None, None, failures


def parametric_bootstrap(
    stage1: ExposureStage,
    outcome_spec: OutcomeModelSpec,
    outcome_data: LongitudinalDataset,
    M: int,
    seed: int,
    point_fit: MixedModelFit | None = None,
    workers: int = 1,
) -> BootstrapResult:
    """Propagate stage-1 uncertainty into the outcome-model covariance.

    Each replicate draws stage-1 parameters from their asymptotic normal
    distribution, recomputes BLUPs and history summaries, and refits the
    outcome model.  Failed refits are redrawn; at most ``2 M`` attempts are
    made in total.
    """
    if M < 2:
        raise ValueError("the bootstrap needs M >= 2 replicates")
    if stage1.fit is None:
        raise ValueError("stage-1 model has not been fitted")
    if point_fit is None:
        point_fit = fit_outcome_model(outcome_spec, outcome_data, stage1.histories(outcome_spec.weight_basis))
    job = _Replicate(stage1, outcome_spec, outcome_data, point_fit, seed)
    # each replicate may retry until the global budget of 2M attempts is spent;
    # replicates run independently so the per-replicate cap is M + 1
    results = parallel_map(_run_one, [(job, m, M + 1) for m in range(M)], workers)
    failed = sum(r[3] for r in results)
    if failed > M or any(r[1] is None for r in results):
        raise BootstrapError(f"{failed} bootstrap refits failed (limit {M})")
    theta_m = np.array([r[1] for r in results])
    V_m = np.array([r[2] for r in results])
    V_tot = _symmetrize_psd(total_variance(theta_m, V_m))
    return BootstrapResult(M, theta_m, V_m, V_tot, _phi_or_beta(point_fit), failed)


def linear_form_se(V: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Row-wise ``sqrt(a' V a)``."""
    return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", A, V, A), 0.0, None))


def pointwise_ci(
    result: BootstrapResult | np.ndarray,
    spec: OutcomeModelSpec,
    grid,
    level: float = 0.95,
    estimate: AssociationTrajectory | None = None,
) -> AssociationTrajectory:
    """Delta-method standard errors and normal-quantile bands on the grid.

    ``result`` is a :class:`BootstrapResult` or a covariance matrix over the
    outcome parameters.  The point estimate comes from ``estimate`` (the
    non-bootstrap fit) or, failing that, from ``result.phi_Y_point``.
    """
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    V = result.V_tot if isinstance(result, BootstrapResult) else np.asarray(result, dtype=float)
    iI, iS = spec.level_index, spec.slope_index
    if max(iI.max(), iS.max()) >= V.shape[0]:
        raise IndexError("coefficient indices exceed the covariance dimension")
    grid = np.asarray(grid, dtype=float)
    basis = spec.weight_basis
    Bg = basis(grid)
    if estimate is None:
        phi = result.phi_Y_point
        from .trajectory import reconstruct_trajectory

        estimate = reconstruct_trajectory(phi[iI], phi[iS], basis, grid)
    avg = Bg.mean(axis=0, keepdims=True)
    VI, VS = V[np.ix_(iI, iI)], V[np.ix_(iS, iS)]
    return AssociationTrajectory(
        grid=grid,
        gamma_I=estimate.gamma_I,
        gamma_S=estimate.gamma_S,
        overall_mean_I=estimate.overall_mean_I,
        overall_mean_S=estimate.overall_mean_S,
        se_I=linear_form_se(VI, Bg),
        se_S=linear_form_se(VS, Bg),
        overall_se_I=float(linear_form_se(VI, avg)[0]),
        overall_se_S=float(linear_form_se(VS, avg)[0]),
        ci_level=level,
    )
