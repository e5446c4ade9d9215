"""Cohort generator mimicking a landmark exposure/outcome design, and a
replication harness measuring bias and pointwise coverage.

Generating values for the exposure and outcome models are configuration,
chosen to look like a BMI history (level near 25, mild upward drift) and a
cognitive score (intercept near 33.7).  They are not estimates from any
real cohort.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .data import LongitudinalDataset
from .exposure import make_grid
from .parallel import parallel_map, replicate_rng
from .pipeline import PipelineSettings, run_two_stage
from .splines import SplineBasis, build_natural_cubic_basis, type7_quantile

log = logging.getLogger(__name__)

COHORT_STREAM = 0xC0407
STUDY_STREAM = 0x57D7


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Scenario:
    """True association curves on ``[-24, 0]``.

    Closed-form scenarios carry functions; tabulated ones carry a grid and
    are linearly interpolated.
    """

    id: str
    gamma_I_fn: Callable | None = None
    gamma_S_fn: Callable | None = None
    table: tuple | None = None  # (t, gamma_I, gamma_S) arrays

    def gamma_I(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.table is not None:
            return np.interp(t, self.table[0], self.table[1])
        return np.broadcast_to(self.gamma_I_fn(t), t.shape).astype(float)

    def gamma_S(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.table is not None:
            return np.interp(t, self.table[0], self.table[2])
        return np.broadcast_to(self.gamma_S_fn(t), t.shape).astype(float)

    def __reduce__(self):
        if self.id in ("A", "B"):
            return (scenario, (self.id,))
        return (Scenario, (self.id, None, None, self.table))


def _const(v):
    return lambda t: np.full(np.shape(t), v)


def _remote_I(t):
    return (ndtr((np.asarray(t) + 24.0) / 6.0) - 1.0) * 0.1


def _remote_S(t):
    return (ndtr((np.asarray(t) + 24.0) / 6.0) - 1.0) * 0.03


def load_scenario_table(path, scenario_id: str = "custom", window: float = 24.0) -> Scenario:
    """Read ``t, gamma_I[, gamma_S]`` rows covering the integer grid ``-S..0``."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0].strip() != "t" or not 2 <= len(header) <= 3:
            raise ValueError(f"{path}: header must be t,gamma_I[,gamma_S]")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if len(vals) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            rows.append(vals + [0.0] * (3 - len(vals)))
    arr = np.array(sorted(rows))
    grid = make_grid(window)
    if not np.all(np.isin(grid, arr[:, 0])):
        raise ValueError(f"{path}: table must cover every integer time in [-{window:g}, 0]")
    return Scenario(scenario_id, table=(arr[:, 0], arr[:, 1], arr[:, 2]))


def scenario(name: str) -> Scenario:
    """Built-in scenarios: ``A`` constant, ``B`` remote-only, ``C`` opposing remote/recent."""
    name = name.upper()
    if name == "A":
        return Scenario("A", _const(-0.05), _const(-0.01))
    if name == "B":
        return Scenario("B", _remote_I, _remote_S)
    if name == "C":
        with resources.as_file(resources.files("wcie").joinpath("scenario_c.csv")) as p:
            return load_scenario_table(p, "C")
    raise ValueError(f"unknown scenario {name!r} (expected A, B or C)")


# ---------------------------------------------------------------------------
# configuration


def _corr(n: int, rho: float) -> np.ndarray:
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _default_exposure_cov() -> list[list[float]]:
    sd = np.array([3.5, 1.2, 2.0, 2.6, 3.2, 3.6])
    R = np.eye(6)
    R[1:, 1:] = _corr(5, 0.7)
    R[0, 1:] = R[1:, 0] = -0.1
    return (R * np.outer(sd, sd)).tolist()


@dataclass
class SimulationConfig:
    """Design and generating parameters of one simulated cohort.

    Exposure coefficients are ``(intercept, age, educ, spline1..5)`` on the
    natural cubic basis with knots at the 20/40/60/80th percentiles of the
    theoretical visit schedule; outcome coefficients are named.
    """

    n_subjects: int = 1000
    exposure_visit_spacing: float = 2.0
    outcome_visit_spacing: float = 2.0
    visit_jitter: float = 0.5
    exposure_missing_rate: float = 0.10
    outcome_missing_rate: float = 0.03
    sigma_eps_exposure: float = 0.9
    exposure_window: tuple[float, float] = (-24.0, 0.0)
    outcome_window: tuple[float, float] = (0.0, 7.0)
    age_mean: float = 51.0
    age_sd: float = 3.0
    educ_prob: float = 0.25
    exposure_knots: int = 4
    exposure_beta: tuple[float, ...] = (21.45, 0.05, -0.6, 0.9, 1.7, 2.3, 2.8, 3.1)
    exposure_re_cov: list = field(default_factory=_default_exposure_cov)
    outcome_alpha: dict = field(
        default_factory=lambda: {
            "intercept": 33.7,
            "age": -0.1,
            "educ": 0.8,
            "V0": -0.5,
            "time": -0.3,
            "age:time": -0.01,
            "educ:time": 0.05,
        }
    )
    outcome_re_sd: tuple[float, float] = (2.0, 0.25)
    outcome_re_corr: float = 0.3
    sigma_eps_outcome: float = 1.2

    def __post_init__(self):
        self.exposure_window = tuple(map(float, self.exposure_window))
        self.outcome_window = tuple(map(float, self.outcome_window))
        self.exposure_beta = tuple(map(float, self.exposure_beta))
        self.outcome_re_sd = tuple(map(float, self.outcome_re_sd))
        self.validate()

    def validate(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        for name in ("exposure_missing_rate", "outcome_missing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("exposure_visit_spacing", "outcome_visit_spacing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for w in (self.exposure_window, self.outcome_window):
            if not w[0] < w[1]:
                raise ValueError(f"window {w} is not ordered")
        if self.exposure_window[1] != 0.0 or self.outcome_window[0] != 0.0:
            raise ValueError("exposure window must end and outcome window start at the landmark 0")
        if self.sigma_eps_exposure < 0 or self.sigma_eps_outcome < 0:
            raise ValueError("residual SDs must be >= 0")
        if len(self.exposure_beta) != 3 + self.exposure_knots + 1:
            raise ValueError("exposure_beta must hold intercept, age, educ and one value per spline column")

    @property
    def window(self) -> float:
        return -self.exposure_window[0]

    def exposure_basis(self) -> SplineBasis:
        lo, hi = self.exposure_window
        visits = np.arange(lo, hi + 1e-9, self.exposure_visit_spacing)
        probs = np.arange(1, self.exposure_knots + 1) / (self.exposure_knots + 1)
        return build_natural_cubic_basis(type7_quantile(visits, probs), (lo, hi))

    def outcome_re_cov(self) -> np.ndarray:
        s0, s1 = self.outcome_re_sd
        r = self.outcome_re_corr * s0 * s1
        return np.array([[s0**2, r], [r, s1**2]])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exposure_window"] = list(self.exposure_window)
        d["outcome_window"] = list(self.outcome_window)
        d["exposure_beta"] = list(self.exposure_beta)
        d["outcome_re_sd"] = list(self.outcome_re_sd)
        return d


PRESETS = {
    "main": {},
    "spacing4": {"exposure_visit_spacing": 4.0},
    "missing20": {"exposure_missing_rate": 0.20},
    "error18": {"sigma_eps_exposure": 1.8},
}


def preset(name: str, **overrides) -> SimulationConfig:
    """Main design or one of the robustness variants (``spacing4``, ``missing20``, ``error18``)."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return SimulationConfig(**{**PRESETS[name], **overrides})


def nhs_settings(bootstrap: int = 500, weight_knots: int = 2, **kw) -> PipelineSettings:
    """Estimator settings matching the simulated design (covariates, V0 indicator)."""
    return PipelineSettings(
        exposure_covariates=("age", "educ"),
        outcome_covariates=("age", "educ"),
        first_visit=True,
        weight_knots=weight_knots,
        bootstrap=bootstrap,
        **kw,
    )


# ---------------------------------------------------------------------------
# generation


def generate_visit_times(window, spacing: float, jitter_halfwidth: float, rng: np.random.Generator) -> np.ndarray:
    """Theoretical visits every ``spacing`` from the window start, each jittered
    by ``Uniform(-jitter, jitter)`` and clamped into the window."""
    lo, hi = map(float, window)
    if spacing <= 2 * jitter_halfwidth:
        raise ValueError("spacing must exceed twice the jitter half-width")
    visits = np.arange(lo, hi + 1e-9, spacing)
    if visits.size == 0:
        raise ValueError("empty visit schedule")
    if jitter_halfwidth > 0:
        visits = visits + rng.uniform(-jitter_halfwidth, jitter_halfwidth, visits.size)
    return np.clip(visits, lo, hi)


@dataclass
class Truth:
    """Generating quantities of one cohort, one row per subject."""

    ids: list[str]
    grid: np.ndarray
    u_star: np.ndarray  # (N, grid)
    gamma_I: np.ndarray
    gamma_S: np.ndarray
    wcie_I: np.ndarray
    wcie_S: np.ndarray
    exposure_re: np.ndarray
    outcome_re: np.ndarray
    age: np.ndarray
    educ: np.ndarray

    def to_csv(self, path) -> None:
        from .data import fmt

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            q, r = self.exposure_re.shape[1], self.outcome_re.shape[1]
            w.writerow(
                ["subject_id", "age", "educ", "wcie_I", "wcie_S"]
                + [f"b{k}" for k in range(q)]
                + [f"c{k}" for k in range(r)]
                + [f"u_star_{int(t)}" if float(t).is_integer() else f"u_star_{t}" for t in self.grid]
            )
            for i, sid in enumerate(self.ids):
                w.writerow(
                    [sid, fmt(self.age[i]), fmt(self.educ[i]), fmt(self.wcie_I[i]), fmt(self.wcie_S[i])]
                    + [fmt(x) for x in self.exposure_re[i]]
                    + [fmt(x) for x in self.outcome_re[i]]
                    + [fmt(x) for x in self.u_star[i]]
                )

    def trajectory_to_csv(self, path) -> None:
        from .data import fmt

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "gamma_I", "gamma_S"])
            for t, a, b in zip(self.grid, self.gamma_I, self.gamma_S):
                w.writerow([fmt(t), fmt(a), fmt(b)])


def generate_cohort(config: SimulationConfig, scen: Scenario, seed: int):
    """Simulate one cohort.

    Returns ``(exposure, outcome, truth)``.  Every subject draws from its own
    keyed stream so a cohort is reproducible subject by subject.
    """
    config.validate()
    basis = config.exposure_basis()
    grid = make_grid(config.window)
    gI, gS = scen.gamma_I(grid), scen.gamma_S(grid)
    beta = np.asarray(config.exposure_beta)
    B = np.asarray(config.exposure_re_cov, dtype=float)
    C = config.outcome_re_cov()
    FB, FC = _psd_root(B), _psd_root(C)
    a = config.outcome_alpha
    Bgrid = basis(grid)
    width = len(str(config.n_subjects - 1))

    ex_rows, out_rows = [], []
    ids, U, WI, WS, RE, CE, AGE, EDU = [], [], [], [], [], [], [], []
    for i in range(config.n_subjects):
        rng = replicate_rng(seed, COHORT_STREAM, i)
        sid = f"S{i:0{width}d}"
        age = rng.normal(config.age_mean, config.age_sd)
        educ = float(rng.random() < config.educ_prob)
        b = FB @ rng.standard_normal(B.shape[0])
        c = FC @ rng.standard_normal(2)

        def u_star(t, _age=age, _educ=educ, _b=b):
            Bt = basis(t)
            return beta[0] + beta[1] * _age + beta[2] * _educ + Bt[:, 1:] @ beta[3:] + Bt @ _b

        tu = generate_visit_times(config.exposure_window, config.exposure_visit_spacing, config.visit_jitter, rng)
        err = rng.normal(0.0, 1.0, tu.size) * config.sigma_eps_exposure
        keep = rng.random(tu.size) >= config.exposure_missing_rate
        uu = u_star(tu) + err
        for t, v in zip(tu[keep], uu[keep]):
            ex_rows.append((sid, t, v, age, educ))

        ug = beta[0] + beta[1] * age + beta[2] * educ + Bgrid[:, 1:] @ beta[3:] + Bgrid @ b
        wI, wS = float(gI @ ug), float(gS @ ug)

        ty = generate_visit_times(config.outcome_window, config.outcome_visit_spacing, config.visit_jitter, rng)
        eps = rng.normal(0.0, 1.0, ty.size) * config.sigma_eps_outcome
        keep_y = rng.random(ty.size) >= config.outcome_missing_rate
        ty, eps = ty[keep_y], eps[keep_y]
        v0 = np.zeros(ty.size)
        if ty.size:
            v0[0] = 1.0
        level = a["intercept"] + a["age"] * age + a["educ"] * educ + wI + c[0] + a["V0"] * v0
        slope = a["time"] + a["age:time"] * age + a["educ:time"] * educ + wS + c[1]
        y = level + slope * ty + eps
        for t, v in zip(ty, y):
            out_rows.append((sid, t, v, age, educ))

        ids.append(sid)
        U.append(ug)
        WI.append(wI)
        WS.append(wS)
        RE.append(b)
        CE.append(c)
        AGE.append(age)
        EDU.append(educ)

    exposure = _dataset(ex_rows, "exposure")
    outcome = _dataset(out_rows, "outcome")
    truth = Truth(ids, grid, np.array(U), gI, gS, np.array(WI), np.array(WS), np.array(RE), np.array(CE), np.array(AGE), np.array(EDU))
    return exposure, outcome, truth


def _psd_root(S):
    w, V = np.linalg.eigh(np.asarray(S, dtype=float))
    if w[0] < -1e-12 * max(1.0, w[-1]):
        raise ValueError("random-effect covariance must be positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def _dataset(rows, window) -> LongitudinalDataset:
    if not rows:
        return LongitudinalDataset([], [], [], {"age": [], "educ": []}, window)
    sid, t, v, age, educ = zip(*rows)
    return LongitudinalDataset(sid, t, v, {"age": age, "educ": educ}, window)


# ---------------------------------------------------------------------------
# replication study


@dataclass
class StudySummary:
    """Pointwise bias and coverage over replicates, for level and slope curves."""

    grid: np.ndarray
    truth_I: np.ndarray
    truth_S: np.ndarray
    estimates_I: np.ndarray  # (R_ok, grid)
    estimates_S: np.ndarray
    covered_I: np.ndarray  # (R_ok, grid) booleans
    covered_S: np.ndarray
    se_I: np.ndarray | None = None  # (R_ok, grid) bootstrap standard errors
    se_S: np.ndarray | None = None
    n_failed: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def n_ok(self) -> int:
        return self.estimates_I.shape[0]

    def mean(self, which: str) -> np.ndarray:
        return getattr(self, f"estimates_{which}").mean(axis=0)

    def bias(self, which: str) -> np.ndarray:
        return self.mean(which) - getattr(self, f"truth_{which}")

    def sd(self, which: str) -> np.ndarray:
        return getattr(self, f"estimates_{which}").std(axis=0, ddof=1)

    def mcse(self, which: str) -> np.ndarray:
        return self.sd(which) / np.sqrt(self.n_ok)

    def mean_se(self, which: str) -> np.ndarray:
        se = getattr(self, f"se_{which}")
        return np.full(self.grid.size, np.nan) if se is None else se.mean(axis=0)

    def coverage(self, which: str) -> np.ndarray:
        return getattr(self, f"covered_{which}").mean(axis=0)

    def coverage_mcse(self, which: str) -> np.ndarray:
        p = self.coverage(which)
        return np.sqrt(p * (1 - p) / self.n_ok)

    def table(self) -> list[dict]:
        rows = []
        for j, t in enumerate(self.grid):
            row = {"t": t}
            for w in ("I", "S"):
                row.update(
                    {
                        f"truth_{w}": getattr(self, f"truth_{w}")[j],
                        f"mean_{w}": self.mean(w)[j],
                        f"bias_{w}": self.bias(w)[j],
                        f"sd_{w}": self.sd(w)[j],
                        f"mcse_{w}": self.mcse(w)[j],
                        f"mean_se_{w}": self.mean_se(w)[j],
                        f"coverage_{w}": self.coverage(w)[j],
                        f"coverage_mcse_{w}": self.coverage_mcse(w)[j],
                    }
                )
            rows.append(row)
        return rows


class _StudyReplicate:
    def __init__(self, config, scen, settings, seed):
        self.config, self.scen, self.settings, self.seed = config, scen, settings, seed

    def __call__(self, r: int):
        from .mixed import CollinearityError, ConvergenceError
        from .inference import BootstrapError

        cohort_seed = int(replicate_rng(self.seed, STUDY_STREAM, r).integers(2**63))
        exposure, outcome, truth = generate_cohort(self.config, self.scen, cohort_seed)
        settings = replace(self.settings, seed=cohort_seed, workers=1)
        try:
            res = run_two_stage(exposure, outcome, settings, strict=False)
        except (ConvergenceError, CollinearityError, BootstrapError, np.linalg.LinAlgError) as exc:
            return r, None, f"replicate {r}: {type(exc).__name__}: {exc}"
        tr = res.trajectory
        out = {"I": tr.gamma_I, "S": tr.gamma_S, "se_I": tr.se_I, "se_S": tr.se_S}
        for w in ("I", "S"):
            truth_w = truth.gamma_I if w == "I" else truth.gamma_S
            if tr.se_I is not None:
                lo, hi = tr.bounds(w)
                out[f"cov_{w}"] = (lo <= truth_w) & (truth_w <= hi)
            else:
                out[f"cov_{w}"] = np.zeros(truth_w.size, dtype=bool)
        return r, out, None


def run_replication_study(
    config: SimulationConfig,
    scen: Scenario,
    R: int,
    settings: PipelineSettings | None = None,
    seed: int = 0,
    workers: int = 1,
) -> StudySummary:
    """Generate ``R`` cohorts, run the full two-stage pipeline on each, and
    summarize pointwise bias, spread and CI coverage of both curves."""
    if R < 2:
        raise ValueError("a replication study needs R >= 2")
    settings = settings or nhs_settings()
    job = _StudyReplicate(config, scen, settings, seed)
    results = parallel_map(job, range(R), workers)
    ok = [r[1] for r in results if r[1] is not None]
    failures = [r[2] for r in results if r[2] is not None]
    for msg in failures:
        log.warning(msg)
    if not ok:
        raise RuntimeError("every replicate failed: " + "; ".join(failures[:5]))
    grid = make_grid(config.window)
    return StudySummary(
        grid=grid,
        truth_I=scen.gamma_I(grid),
        truth_S=scen.gamma_S(grid),
        estimates_I=np.array([o["I"] for o in ok]),
        estimates_S=np.array([o["S"] for o in ok]),
        covered_I=np.array([o["cov_I"] for o in ok]),
        covered_S=np.array([o["cov_S"] for o in ok]),
        se_I=None if ok[0]["se_I"] is None else np.array([o["se_I"] for o in ok]),
        se_S=None if ok[0]["se_S"] is None else np.array([o["se_S"] for o in ok]),
        n_failed=len(failures),
        failures=failures,
    )
