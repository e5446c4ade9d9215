"""Long-format repeated-measures container and its CSV representation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping

import numpy as np

Window = Literal["exposure", "outcome"]

BASE_COLUMNS = ("subject_id", "time", "value")


class DataError(ValueError):
    """Malformed or inconsistent longitudinal data."""


@dataclass
class LongitudinalDataset:
    """Repeated measures, one row per (subject, time) record.

    ``covariates`` maps a column name to a per-record float array.  Exposure
    windows hold times ``<= 0`` and outcome windows times ``>= 0``.
    """

    subject: np.ndarray
    time: np.ndarray
    value: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    window: Window = "exposure"

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=str).astype(object)
        self.time = np.asarray(self.time, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        n = self.subject.size
        if self.time.shape != (n,) or self.value.shape != (n,):
            raise DataError("subject, time and value must be 1-d arrays of equal length")
        for name, col in self.covariates.items():
            if col.shape != (n,):
                raise DataError(f"covariate {name!r} has {col.size} values, expected {n}")
            if not np.all(np.isfinite(col)):
                raise DataError(f"covariate {name!r} has non-finite values")
        if not (np.all(np.isfinite(self.time)) and np.all(np.isfinite(self.value))):
            raise DataError("times and values must be finite")
        if self.window == "exposure" and np.any(self.time > 0):
            raise DataError("exposure-window times must be <= 0 (before the landmark)")
        if self.window == "outcome" and np.any(self.time < 0):
            raise DataError("outcome-window times must be >= 0 (after the landmark)")
        if self.window not in ("exposure", "outcome"):
            raise DataError(f"unknown window {self.window!r}")

    def __len__(self) -> int:
        return self.subject.size

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.subject.tolist()))

    def frame(self) -> dict[str, np.ndarray]:
        return {"time": self.time, **self.covariates}

    def sorted(self) -> "LongitudinalDataset":
        """Records ordered by subject id, then time."""
        order = np.lexsort((self.time, self.subject))
        return self.take(order)

    def take(self, idx) -> "LongitudinalDataset":
        return LongitudinalDataset(
            self.subject[idx],
            self.time[idx],
            self.value[idx],
            {k: v[idx] for k, v in self.covariates.items()},
            self.window,
        )

    def select(self, subjects: Iterable[str]) -> "LongitudinalDataset":
        keep = np.isin(self.subject, np.asarray(list(subjects), dtype=object))
        return self.take(np.flatnonzero(keep))

    def with_columns(self, **columns: np.ndarray) -> "LongitudinalDataset":
        covs = dict(self.covariates)
        covs.update(columns)
        return LongitudinalDataset(self.subject, self.time, self.value, covs, self.window)

    def subject_covariates(self, names: Iterable[str] | None = None) -> dict[str, dict[str, float]]:
        """First-record covariate values per subject (baseline covariates)."""
        names = list(self.covariates) if names is None else list(names)
        data = self.sorted()
        out: dict[str, dict[str, float]] = {}
        for i, sid in enumerate(data.subject):
            if sid not in out:
                out[sid] = {n: float(data.covariates[n][i]) for n in names}
        return out

    def to_csv(self, path) -> None:
        names = list(self.covariates)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([*BASE_COLUMNS, *names])
            for i in range(len(self)):
                writer.writerow(
                    [self.subject[i], fmt(self.time[i]), fmt(self.value[i])]
                    + [fmt(self.covariates[n][i]) for n in names]
                )

    @classmethod
    def from_csv(cls, path, window: Window) -> "LongitudinalDataset":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file, header row required") from None
            header = [h.strip() for h in header]
            if tuple(header[:3]) != BASE_COLUMNS:
                raise DataError(
                    f"{path}:1: header must start with {','.join(BASE_COLUMNS)}, got {','.join(header[:3])}"
                )
            names = header[3:]
            subj, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                try:
                    nums = [float(c) for c in row[1:]]
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                if not all(math.isfinite(x) for x in nums):
                    raise DataError(f"{path}:{lineno}: non-finite number")
                subj.append(row[0].strip())
                rows.append(nums)
        arr = np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 1)
        try:
            return cls(subj, arr[:, 0], arr[:, 1], {n: arr[:, 2 + j] for j, n in enumerate(names)}, window)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None


def fmt(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def broadcast_frame(covariates: Mapping[str, float], times) -> dict[str, np.ndarray]:
    """Design frame for one subject evaluated at arbitrary times."""
    times = np.asarray(times, dtype=float)
    return {"time": times, **{k: np.full(times.shape, float(v)) for k, v in covariates.items()}}
