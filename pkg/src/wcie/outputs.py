"""Result files: trajectory table, fit summary, study summary and run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from pathlib import Path

import numpy as np

from .data import fmt

TRAJECTORY_COLUMNS = ["t", "gamma_I", "se_I", "lo_I", "hi_I", "gamma_S", "se_S", "lo_S", "hi_S"]


def _cell(x) -> str:
    return "" if x is None else fmt(x)


def write_trajectory_csv(traj, path) -> None:
    """One row per grid time; SE and bound columns stay empty without inference."""
    has_se = traj.se_I is not None
    if has_se:
        loI, hiI = traj.bounds("I")
        loS, hiS = traj.bounds("S")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for j, t in enumerate(traj.grid):
            if has_se:
                extra_I = (traj.se_I[j], loI[j], hiI[j])
                extra_S = (traj.se_S[j], loS[j], hiS[j])
            else:
                extra_I = extra_S = (None, None, None)
            w.writerow([_cell(t), _cell(traj.gamma_I[j]), *map(_cell, extra_I), _cell(traj.gamma_S[j]), *map(_cell, extra_S)])


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) if r[c] != "" else np.nan for r in rows]) for c in TRAJECTORY_COLUMNS}


def _fit_block(fit) -> dict:
    return {
        "loglik": fit.loglik,
        "aic": fit.aic,
        "n_obs": fit.n_obs,
        "n_subjects": fit.n_subjects,
        "iterations": fit.n_iter,
        "converged": fit.converged,
        "sigma": fit.sigma,
        "fixed_effects": dict(zip(fit.fixed_names, map(float, fit.beta))),
        "random_names": list(fit.random_names),
        "random_covariance": np.asarray(fit.B).tolist(),
    }


def fit_summary(result) -> dict:
    traj = result.trajectory
    out = {
        "overall_mean_I": traj.overall_mean_I,
        "overall_mean_S": traj.overall_mean_S,
        "overall_se_I": traj.overall_se_I,
        "overall_se_S": traj.overall_se_S,
        "ci_level": traj.ci_level,
        "weight_basis": {
            "kind": result.outcome_spec.weight_basis.kind,
            "knots": list(map(float, result.outcome_spec.weight_basis.knots)),
            "dimension": result.outcome_spec.weight_basis.dimension,
        },
        "exposure_model": _fit_block(result.stage1.fit),
        "outcome_model": _fit_block(result.outcome_fit),
        "dropped_subjects": list(result.dropped_subjects),
    }
    if result.bootstrap is not None:
        out["bootstrap"] = {"replicates": result.bootstrap.M, "failed_refits": result.bootstrap.n_failed}
    if result.selection is not None:
        out["aic_trace"] = {str(k): v for k, v in result.selection.aic.items()}
        out["aic_excluded"] = {str(k): v for k, v in result.selection.excluded.items()}
        out["selected_knots"] = result.selection.n_knots
    return out


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def write_study_summary(summary, path) -> None:
    rows = summary.table()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([fmt(v) for v in row.values()])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, seed: int, settings: dict, inputs=(), outputs=(), extra=None) -> None:
    import numpy
    import scipy

    from . import __version__

    doc = {
        "command": command,
        "seed": seed,
        "settings": settings,
        "versions": {
            "wcie": __version__,
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
        },
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, Path(path).parent): sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    write_json(doc, path)
