"""Subject-level data containers for pooled matched case-control studies."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np


class DataError(ValueError):
    pass


class UninformativeStrataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Stratum:
    """One matched set. Arrays are aligned by subject."""

    study_id: str
    stratum_id: str
    y: np.ndarray
    x_tilde: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    in_cal: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int8)
        object.__setattr__(self, "y", y)
        n = y.size
        for name in ("x_tilde", "w", "x_ref"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).reshape(n))
        z = self.z
        z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        object.__setattr__(self, "z", z)
        if self.in_cal is None:
            object.__setattr__(self, "in_cal", np.zeros(n, dtype=bool))

    @property
    def n_cases(self) -> int:
        return int(self.y.sum())

    @property
    def n_controls(self) -> int:
        return int(self.y.size - self.y.sum())

    @property
    def informative(self) -> bool:
        return self.n_cases >= 1 and self.n_controls >= 1


@dataclass(frozen=True, eq=False)
class PooledDataset:
    """Columnar subject table sorted so that each study, and each stratum
    within it, occupies a contiguous block of rows.

    Missing biomarker values are NaN. ``reference_lab`` maps study id to
    True when that study measured everyone in the reference laboratory.
    ``x_true`` is only populated by the simulator (held-out truth).
    """

    study: np.ndarray
    stratum: np.ndarray
    case: np.ndarray
    w: np.ndarray
    x_ref: np.ndarray
    in_cal: np.ndarray
    z: np.ndarray
    reference_lab: dict
    z_names: tuple = ()
    x_tilde: Optional[np.ndarray] = None
    x_true: Optional[np.ndarray] = None
    _offsets: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, study, stratum, case, w=None, x_ref=None, in_cal=None, z=None,
              reference_lab=None, z_names=None, x_tilde=None, x_true=None) -> "PooledDataset":
        study = np.asarray([str(s) for s in study], dtype=object)
        stratum = np.asarray([str(s) for s in stratum], dtype=object)
        n = study.size
        case = np.asarray(case, dtype=np.int8).reshape(n)
        if np.any((case != 0) & (case != 1)):
            raise DataError("case must be 0/1")

        def col(v):
            return np.full(n, np.nan) if v is None else np.asarray(v, dtype=float).reshape(n)

        w, x_ref = col(w), col(x_ref)
        in_cal = np.zeros(n, dtype=bool) if in_cal is None else np.asarray(in_cal, dtype=bool).reshape(n)
        z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        if z_names is None:
            z_names = tuple(f"z_{i + 1}" for i in range(z.shape[1]))
        if len(z_names) != z.shape[1]:
            raise DataError("z_names length does not match z columns")
        ref = {s: False for s in dict.fromkeys(study)}
        ref.update({str(k): bool(v) for k, v in (reference_lab or {}).items()})

        # stable grouping: studies, then strata, in order of first appearance
        study_rank = {s: i for i, s in enumerate(dict.fromkeys(study))}
        keys = list(dict.fromkeys(zip(study, stratum)))
        stratum_rank = {k: i for i, k in enumerate(keys)}
        skey = np.array([study_rank[s] for s in study], dtype=np.int64)
        tkey = np.array([stratum_rank[k] for k in zip(study, stratum)], dtype=np.int64)
        order = np.lexsort((np.arange(n), tkey, skey))

        def take(v):
            return None if v is None else np.asarray(v)[order]

        sorted_t = tkey[order]
        starts = np.flatnonzero(np.r_[True, sorted_t[1:] != sorted_t[:-1]]) if n else np.zeros(0, int)
        offsets = np.r_[starts, n].astype(np.int64)
        return cls(study=study[order], stratum=stratum[order], case=case[order], w=w[order],
                   x_ref=x_ref[order], in_cal=in_cal[order], z=z[order], reference_lab=ref,
                   z_names=tuple(z_names), x_tilde=take(x_tilde), x_true=take(x_true),
                   _offsets=offsets)

    # -- shape -------------------------------------------------------------

    def __len__(self) -> int:
        return int(self.study.size)

    @property
    def n_z(self) -> int:
        return int(self.z.shape[1])

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    @property
    def n_strata(self) -> int:
        return int(self._offsets.size - 1)

    @property
    def studies(self) -> list[str]:
        return list(dict.fromkeys(self.study))

    @property
    def local_studies(self) -> list[str]:
        return [s for s in self.studies if not self.reference_lab[s]]

    def stratum_study(self) -> np.ndarray:
        return self.study[self._offsets[:-1]]

    def stratum_sizes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-stratum (n_cases, n_controls)."""
        starts = self._offsets[:-1]
        if starts.size == 0:
            return np.zeros(0, int), np.zeros(0, int)
        nc = np.add.reduceat(self.case.astype(np.int64), starts)
        return nc, np.diff(self._offsets) - nc

    def stratum_index(self) -> np.ndarray:
        """Stratum number of each row."""
        return np.repeat(np.arange(self.n_strata), np.diff(self._offsets))

    def strata(self) -> Iterator[Stratum]:
        for j in range(self.n_strata):
            yield self.get_stratum(j)

    def get_stratum(self, j: int) -> Stratum:
        sl = slice(self._offsets[j], self._offsets[j + 1])
        return Stratum(
            study_id=self.study[sl.start], stratum_id=self.stratum[sl.start], y=self.case[sl],
            x_tilde=None if self.x_tilde is None else self.x_tilde[sl], w=self.w[sl],
            x_ref=self.x_ref[sl], z=self.z[sl], in_cal=self.in_cal[sl])

    # -- derived datasets ----------------------------------------------------

    def with_x_tilde(self, x_tilde) -> "PooledDataset":
        return replace(self, x_tilde=np.asarray(x_tilde, dtype=float).reshape(len(self)))

    def subset_rows(self, mask) -> "PooledDataset":
        mask = np.asarray(mask, dtype=bool)
        return PooledDataset.build(
            self.study[mask], self.stratum[mask], self.case[mask], self.w[mask],
            self.x_ref[mask], self.in_cal[mask], self.z[mask],
            {s: v for s, v in self.reference_lab.items() if s in set(self.study[mask])},
            self.z_names,
            None if self.x_tilde is None else self.x_tilde[mask],
            None if self.x_true is None else self.x_true[mask])

    def drop_uninformative(self, warn: bool = True) -> tuple["PooledDataset", list]:
        """Remove strata lacking a case or a control.

        Returns the reduced dataset and the dropped ``(study, stratum)`` keys.
        """
        nc, nk = self.stratum_sizes()
        bad = (nc < 1) | (nk < 1)
        if not bad.any():
            return self, []
        starts = self._offsets[:-1]
        dropped = [(self.study[starts[j]], self.stratum[starts[j]]) for j in np.flatnonzero(bad)]
        if warn:
            warnings.warn(f"dropping {len(dropped)} uninformative strata (no case or no control)",
                          UninformativeStrataWarning, stacklevel=2)
        keep = ~np.repeat(bad, np.diff(self._offsets))
        return self.subset_rows(keep), dropped

    def equals(self, other: "PooledDataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            a, b = np.asarray(a), np.asarray(b)
            if a.dtype.kind == "f":
                return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)
            return a.shape == b.shape and np.array_equal(a, b)

        return (all(same(getattr(self, f), getattr(other, f))
                    for f in ("study", "stratum", "case", "w", "x_ref", "in_cal", "z", "x_tilde"))
                and self.reference_lab == other.reference_lab and self.z_names == other.z_names)
