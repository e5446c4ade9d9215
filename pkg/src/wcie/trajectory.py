"""Stage 2: outcome mixed model on history summaries and the association curves."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .data import LongitudinalDataset
from .exposure import ExposureHistory
from .mixed import (
    CollinearityError,
    ConvergenceError,
    Design,
    MixedModelFit,
    MixedModelSpec,
    fit_lmm,
)
from .splines import SplineBasis

log = logging.getLogger(__name__)

FIRST_VISIT = "V0"


class MissingHistoryError(ValueError):
    """Outcome subjects without an exposure history."""

    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:20]) + (" ..." if len(self.missing) > 20 else "")
        super().__init__(f"{len(self.missing)} outcome subject(s) have no exposure history: {shown}")


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Linear outcome trajectory with history effects on level and slope.

    Fixed part: ``1, covariates, [V0], H_0..H_K`` for the level and
    ``time, covariates:time, H_0:time..H_K:time`` for the slope.  Random
    part: correlated intercept and slope.
    """

    weight_basis: SplineBasis
    covariates: tuple[str, ...] = ()
    first_visit: bool = False

    @property
    def history_names(self) -> list[str]:
        return [f"H{k}" for k in range(self.weight_basis.dimension)]

    def mixed_spec(self) -> MixedModelSpec:
        H = self.history_names
        level = ["1", *self.covariates] + ([FIRST_VISIT] if self.first_visit else []) + H
        slope = ["time", *(f"{c}:time" for c in self.covariates), *(f"{h}:time" for h in H)]
        return MixedModelSpec(Design(level + slope), Design(["1", "time"]))

    @property
    def level_index(self) -> np.ndarray:
        names = self.mixed_spec().fixed.names
        return np.array([names.index(h) for h in self.history_names])

    @property
    def slope_index(self) -> np.ndarray:
        names = self.mixed_spec().fixed.names
        return np.array([names.index(f"{h}:time") for h in self.history_names])


@dataclass
class AssociationTrajectory:
    """Time-varying effects of past exposure on outcome level and slope."""

    grid: np.ndarray
    gamma_I: np.ndarray
    gamma_S: np.ndarray
    overall_mean_I: float
    overall_mean_S: float
    se_I: np.ndarray | None = None
    se_S: np.ndarray | None = None
    overall_se_I: float | None = None
    overall_se_S: float | None = None
    ci_level: float = 0.95

    @property
    def z(self) -> float:
        return float(norm.ppf(0.5 + self.ci_level / 2))

    def bounds(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        est, se = (self.gamma_I, self.se_I) if which == "I" else (self.gamma_S, self.se_S)
        if se is None:
            raise ValueError("trajectory has no standard errors")
        half = self.z * se
        return est - half, est + half


def outcome_frame(outcome: LongitudinalDataset, H: Mapping[str, np.ndarray], names: Sequence[str]) -> LongitudinalDataset:
    """Attach history columns and the first-assessment indicator to outcome records."""
    missing = sorted(set(outcome.subjects) - set(H))
    if missing:
        raise MissingHistoryError(missing)
    rows = np.array([H[s] for s in outcome.subject]).reshape(len(outcome), len(names))
    cols = {n: rows[:, k] for k, n in enumerate(names)}
    first = np.zeros(len(outcome))
    seen = {}
    for i in np.lexsort((outcome.time, outcome.subject)):
        if outcome.subject[i] not in seen:
            seen[outcome.subject[i]] = i
            first[i] = 1.0
    cols[FIRST_VISIT] = first
    return outcome.with_columns(**cols)


def history_matrix(histories: Mapping[str, ExposureHistory | np.ndarray]) -> dict[str, np.ndarray]:
    return {s: (h.H if isinstance(h, ExposureHistory) else np.asarray(h, float)) for s, h in histories.items()}


def fit_outcome_model(
    spec: OutcomeModelSpec,
    outcome_data: LongitudinalDataset,
    histories: Mapping[str, ExposureHistory | np.ndarray],
    start: MixedModelFit | None = None,
    compute_cov: bool = True,
) -> MixedModelFit:
    """ML fit of the outcome model with ``H`` plugged in for every subject.

    Raises :class:`MissingHistoryError` when an outcome subject has no
    history and :class:`CollinearityError` when the history columns are
    (nearly) collinear with the rest of the design.
    """
    frame = outcome_frame(outcome_data, history_matrix(histories), spec.history_names)
    return fit_lmm(spec.mixed_spec(), frame, start=start, compute_cov=compute_cov)


def reconstruct_trajectory(theta_I, theta_S, basis: SplineBasis, grid) -> AssociationTrajectory:
    theta_I = np.asarray(theta_I, dtype=float)
    theta_S = np.asarray(theta_S, dtype=float)
    if theta_I.size != basis.dimension or theta_S.size != basis.dimension:
        raise ValueError(
            f"coefficient lengths ({theta_I.size}, {theta_S.size}) do not match basis dimension {basis.dimension}"
        )
    grid = np.asarray(grid, dtype=float)
    Bg = basis(grid)
    gI, gS = Bg @ theta_I, Bg @ theta_S
    return AssociationTrajectory(grid, gI, gS, float(gI.mean()), float(gS.mean()))


def trajectory_from_fit(fit: MixedModelFit, spec: OutcomeModelSpec, grid) -> AssociationTrajectory:
    return reconstruct_trajectory(fit.beta[spec.level_index], fit.beta[spec.slope_index], spec.weight_basis, grid)


@dataclass
class KnotSelection:
    basis: SplineBasis
    fit: MixedModelFit
    n_knots: int
    aic: dict[int, float] = field(default_factory=dict)
    excluded: dict[int, str] = field(default_factory=dict)


def select_knots_by_aic(candidate_counts: Sequence[int], fit_procedure: Callable[[int], tuple]) -> KnotSelection:
    """Minimum-AIC candidate; ties go to the smaller knot count.

    ``fit_procedure(k)`` returns ``(basis, fit)``; candidates that raise a
    convergence or collinearity error are excluded and reported.
    """
    results, aic, excluded = {}, {}, {}
    for k in sorted(candidate_counts):
        try:
            basis, fit = fit_procedure(k)
        except (ConvergenceError, CollinearityError, np.linalg.LinAlgError) as exc:
            log.warning("knot count %d excluded: %s", k, exc)
            excluded[k] = str(exc)
            continue
        results[k] = (basis, fit)
        aic[k] = fit.aic
    if not results:
        raise ConvergenceError("no knot candidate could be fitted: " + "; ".join(f"{k}: {v}" for k, v in excluded.items()))
    best = min(aic, key=lambda k: (aic[k], k))
    basis, fit = results[best]
    return KnotSelection(basis, fit, best, aic, excluded)
