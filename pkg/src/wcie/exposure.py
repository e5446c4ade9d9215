"""Stage 1: predicted error-free exposure histories and their summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset, broadcast_frame
from .mixed import (
    Design,
    LinearMixedModel,
    MixedModelFit,
    MixedModelSpec,
    build_model,
    decode_params,
    fit_model,
    predict_blup,
)
from .splines import SplineBasis, build_natural_cubic_basis, place_knots


class MissingExposureError(ValueError):
    """A subject has no exposure record to predict from."""


@dataclass
class ExposureHistory:
    """Predicted exposure on the integer grid ``-S..0`` and its basis sums."""

    subject_id: str
    grid: np.ndarray
    u_star_hat: np.ndarray
    H: np.ndarray


def make_grid(window: float, step: float = 1.0) -> np.ndarray:
    """``{-S, -S + step, ..., 0}``; ``S + 1`` points for the default step."""
    n = int(round(window / step))
    if n < 1 or not np.isclose(n * step, window):
        raise ValueError(f"window {window} is not a positive multiple of step {step}")
    return -window + step * np.arange(n + 1)


def exposure_spec(basis: SplineBasis, covariates=()) -> MixedModelSpec:
    """Spline trajectory in both the fixed and the random part.

    Fixed: intercept, baseline covariates, non-constant spline columns.
    Random: intercept and the same spline columns, unstructured covariance.
    """
    return MixedModelSpec(
        fixed=Design(["1", *covariates, "spline"], basis),
        random=Design(["1", "spline"], basis),
    )


def exposure_basis(data: LongitudinalDataset, n_knots: int = 4, strategy: str = "percentile") -> SplineBasis:
    """Natural cubic basis with knots from the pooled observation times."""
    knots = place_knots(data.time, n_knots, strategy)
    return build_natural_cubic_basis(knots, (float(data.time.min()), float(data.time.max())))


def predict_exposure_grid(
    fit: MixedModelFit,
    spec: MixedModelSpec,
    subject: LongitudinalDataset,
    grid,
    blup: np.ndarray | None = None,
) -> np.ndarray:
    """Plug-in prediction ``X(t)' beta + Z(t)' b_i`` at every grid time.

    ``subject`` holds the records of a single subject; its BLUP is taken from
    ``fit.blups`` when available and recomputed otherwise.
    """
    if len(subject) == 0:
        raise MissingExposureError("subject has no exposure records")
    sid = subject.subject[0]
    if blup is None:
        blup = fit.blups.get(sid)
        if blup is None:
            blup = predict_blup(fit, spec, subject)
    covs = subject.subject_covariates()[sid]
    frame = broadcast_frame(covs, grid)
    return spec.fixed(frame) @ fit.beta + spec.random(frame) @ blup


def compute_history_covariates(u_star_hat, weight_basis: SplineBasis, grid=None) -> np.ndarray:
    """``H_k = h * sum_t B_k(t) u(t)`` over a grid of spacing ``h``.

    ``u_star_hat`` may be one grid vector or a ``(subjects, grid)`` matrix.
    The default grid is the integer grid spanned by the basis boundary knots,
    where ``h = 1``; finer grids keep the weights on a per-year scale.
    """
    if grid is None:
        lo, hi = weight_basis.boundary_knots
        grid = np.arange(lo, hi + 0.5)
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u_star_hat, dtype=float)
    if u.shape[-1] != grid.size:
        raise ValueError(f"exposure vector has {u.shape[-1]} grid values, basis grid has {grid.size}")
    step = float(grid[1] - grid[0]) if grid.size > 1 else 1.0
    return step * (u @ weight_basis(grid))


def sample_stage1_params(fit: MixedModelFit, rng: np.random.Generator):
    """Draw ``phi ~ N(phi_hat, param_cov)`` and decode to ``(beta, sigma, B)``."""
    phi = fit.phi
    cov = (fit.param_cov + fit.param_cov.T) / 2
    w, V = np.linalg.eigh(cov)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    draw = phi + root @ rng.standard_normal(phi.size)
    return decode_params(draw, len(fit.beta), len(fit.random_names))


class ExposureStage:
    """Fitted stage-1 model plus everything needed to re-predict histories.

    Holds the per-subject sufficient statistics so that histories under
    new parameter values (bootstrap draws) cost one batched BLUP solve.
    """

    def __init__(
        self,
        data: LongitudinalDataset,
        covariates=(),
        n_knots: int = 4,
        strategy: str = "percentile",
        window: float = 24.0,
        step: float = 1.0,
        basis: SplineBasis | None = None,
    ):
        if len(data) == 0:
            raise MissingExposureError("no exposure records")
        self.data = data
        self.covariates = tuple(covariates)
        self.basis = basis if basis is not None else exposure_basis(data, n_knots, strategy)
        self.spec = exposure_spec(self.basis, self.covariates)
        self.grid = make_grid(window, step)
        self.window = window
        self.model: LinearMixedModel = build_model(self.spec, data)
        self.ids = self.model.ids
        covs = data.subject_covariates(self.covariates)
        n, g = self.ids.size, self.grid.size
        frame = {"time": np.tile(self.grid, n)}
        for name in self.covariates:
            frame[name] = np.repeat([covs[sid][name] for sid in self.ids], g)
        self._Xg = self.spec.fixed(frame).reshape(n, g, -1)
        # random part depends on time only
        self._Zg = self.spec.random({"time": self.grid})
        self.fit: MixedModelFit | None = None

    def run(self) -> MixedModelFit:
        self.fit = fit_model(self.model, self.spec.fixed.names, self.spec.random.names)
        return self.fit

    def predict(self, beta, sigma, B) -> np.ndarray:
        """Grid predictions ``(subjects, grid)`` with BLUPs recomputed under the given parameters."""
        b = self.model.blups(beta, sigma, B)
        return self._Xg @ beta + b @ self._Zg.T

    def predicted(self) -> np.ndarray:
        f = self.fit
        return self.predict(f.beta, f.sigma, f.B)

    def histories(self, weight_basis: SplineBasis, u: np.ndarray | None = None) -> dict[str, ExposureHistory]:
        if u is None:
            u = self.predicted()
        H = compute_history_covariates(u, weight_basis, self.grid)
        return {
            sid: ExposureHistory(sid, self.grid, u[i], H[i]) for i, sid in enumerate(self.ids)
        }

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """Grid predictions under one parametric-bootstrap draw of the stage-1 parameters."""
        beta, sigma, B = sample_stage1_params(self.fit, rng)
        return self.predict(beta, sigma, B)
