"""Per-study linear calibration of local-lab measurements to the reference lab.

Calibration models are fitted among controls only, by ordinary least
squares of the reference measurement ``X`` on the local measurement ``W``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import PooledDataset


class CalibrationError(ValueError):
    pass


class CalibrationStrategy(str, enum.Enum):
    NAIVE = "naive"
    INTERNALIZED = "internalized"
    FULL = "full"

    @classmethod
    def parse(cls, value) -> "CalibrationStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"n": cls.NAIVE, "in": cls.INTERNALIZED, "fc": cls.FULL}
        v = str(value).strip().lower()
        if v in aliases:
            return aliases[v]
        try:
            return cls(v)
        except ValueError:
            raise ValueError(f"unknown calibration strategy {value!r}") from None

    @property
    def short(self) -> str:
        return {"naive": "N", "internalized": "IN", "full": "FC"}[self.value]


@dataclass(frozen=True)
class CalibrationFit:
    study_id: str
    a_hat: float
    b_hat: float
    se_a: float
    se_b: float
    n_cal: int
    residual_variance: float

    def predict(self, w):
        return self.a_hat + self.b_hat * np.asarray(w, dtype=float)

    def to_dict(self) -> dict:
        return {"study": self.study_id, "a": self.a_hat, "b": self.b_hat, "se_a": self.se_a,
                "se_b": self.se_b, "n_cal": self.n_cal,
                "residual_variance": self.residual_variance}


def fit_calibration(w, x, study_id: str = "") -> CalibrationFit:
    """OLS of ``x`` on ``w`` with classical (homoskedastic) standard errors."""
    w = np.asarray(w, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if w.shape != x.shape:
        raise CalibrationError("w and x must have equal length")
    n = w.size
    if n < 3:
        raise CalibrationError(f"study {study_id!r}: need at least 3 calibration pairs, got {n}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(x))):
        raise CalibrationError(f"study {study_id!r}: non-finite calibration values")
    wc = w - w.mean()
    sww = float(wc @ wc)
    if sww <= 1e-12 * max(1.0, float(w @ w)):
        raise CalibrationError(f"study {study_id!r}: singular calibration design (constant W)")
    b = float(wc @ (x - x.mean())) / sww
    a = float(x.mean() - b * w.mean())
    resid = x - a - b * w
    s2 = float(resid @ resid) / (n - 2)
    se_b = np.sqrt(s2 / sww)
    se_a = np.sqrt(s2 * (1.0 / n + w.mean() ** 2 / sww))
    return CalibrationFit(study_id, a, b, float(se_a), float(se_b), n, s2)


def fit_study_calibrations(dataset: PooledDataset) -> dict[str, CalibrationFit]:
    """Fit one calibration model per local-lab study from its ``in_cal`` controls."""
    fits = {}
    for s in dataset.local_studies:
        m = (dataset.study == s) & dataset.in_cal
        if np.any(dataset.case[m] != 0):
            raise CalibrationError(f"study {s!r}: calibration subset contains cases")
        fits[s] = fit_calibration(dataset.w[m], dataset.x_ref[m], study_id=s)
    return fits


def calibration_design(dataset: PooledDataset, strategy) -> dict[str, np.ndarray]:
    """Rows whose calibrated value is the model prediction ``a_s + b_s W``.

    These are the rows through which the calibration parameters enter the
    dose-response fit. Empty for the naive strategy.
    """
    strategy = CalibrationStrategy.parse(strategy)
    out = {}
    if strategy is CalibrationStrategy.NAIVE:
        return out
    for s in dataset.local_studies:
        m = dataset.study == s
        if strategy is CalibrationStrategy.INTERNALIZED:
            m = m & ~np.isfinite(dataset.x_ref)
        out[s] = m
    return out


def calibrate(dataset: PooledDataset, fits: Mapping[str, CalibrationFit] | None,
              strategy) -> PooledDataset:
    """Return a copy of ``dataset`` with ``x_tilde`` filled for every subject.

    Reference-lab studies always use ``x_ref``. In local-lab studies the naive
    strategy uses ``w``, full calibration predicts for everyone, and
    internalized calibration keeps ``x_ref`` wherever it was measured.
    """
    strategy = CalibrationStrategy.parse(strategy)
    fits = fits or {}
    xt = np.full(len(dataset), np.nan)
    for s in dataset.studies:
        m = dataset.study == s
        if dataset.reference_lab[s]:
            if not np.all(np.isfinite(dataset.x_ref[m])):
                raise CalibrationError(f"reference-lab study {s!r} has missing x_ref")
            xt[m] = dataset.x_ref[m]
            continue
        w = dataset.w[m]
        if not np.all(np.isfinite(w)):
            bad = np.flatnonzero(m)[~np.isfinite(w)][0]
            raise CalibrationError(f"local-lab study {s!r}: subject at row {bad} lacks w")
        if strategy is CalibrationStrategy.NAIVE:
            xt[m] = w
            continue
        if s not in fits:
            raise CalibrationError(f"no calibration fit supplied for local-lab study {s!r}")
        pred = fits[s].predict(w)
        if strategy is CalibrationStrategy.INTERNALIZED:
            xr = dataset.x_ref[m]
            pred = np.where(np.isfinite(xr), xr, pred)
        xt[m] = pred
    return dataset.with_x_tilde(xt)
