"""Restricted cubic spline basis with three knots, plus a linear-only basis.

The three-knot basis has two columns, ``f1(x) = x`` and

    f2(x) = (x - t1)_+^3 - (x - t2)_+^3 (t3 - t1)/(t3 - t2)
            + (x - t3)_+^3 (t2 - t1)/(t3 - t2)

which vanishes below ``t1`` and is linear above ``t3``. No rescaling by
``(t3 - t1)^2`` is applied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

RCS3 = "rcs3"
LINEAR = "linear"
KINDS = (RCS3, LINEAR)


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class SplineBasis:
    """Knot locations and basis kind.

    Instances are immutable and safe to share between worker processes.
    """

    knots: tuple[float, ...]
    kind: str = RCS3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BasisError(f"unknown basis kind {self.kind!r}; expected one of {KINDS}")
        knots = tuple(float(t) for t in self.knots)
        object.__setattr__(self, "knots", knots)
        if not all(np.isfinite(knots)):
            raise BasisError("knots must be finite")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise BasisError(f"knots must be strictly increasing, got {knots}")
        if self.kind == RCS3 and len(knots) != 3:
            raise BasisError(f"rcs3 basis needs exactly 3 knots, got {len(knots)}")

    @property
    def dim(self) -> int:
        return 2 if self.kind == RCS3 else 1

    @property
    def term_names(self) -> list[str]:
        return ["x1", "x2"][: self.dim]

    def __call__(self, x):
        return eval_basis(self, x)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(knots=tuple(d["knots"]), kind=d["kind"])

    @classmethod
    def linear(cls) -> "SplineBasis":
        return cls(knots=(), kind=LINEAR)


def _pos3(u):
    return np.maximum(u, 0.0) ** 3


def _pos2(u):
    return np.maximum(u, 0.0) ** 2


def eval_basis(basis: SplineBasis, x) -> np.ndarray:
    """Evaluate the basis at scalar or array ``x``.

    Returns an array of shape ``x.shape + (K,)``.
    """
    x = np.asarray(x, dtype=float)
    if basis.kind == LINEAR:
        return x[..., None].copy()
    t1, t2, t3 = basis.knots
    c2 = (t3 - t1) / (t3 - t2)
    c3 = (t2 - t1) / (t3 - t2)
    f2 = _pos3(x - t1) - _pos3(x - t2) * c2 + _pos3(x - t3) * c3
    return np.stack([x, f2], axis=-1)


def eval_basis_deriv(basis: SplineBasis, x) -> np.ndarray:
    """First derivative of each basis column with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    if basis.kind == LINEAR:
        return np.ones(x.shape + (1,))
    t1, t2, t3 = basis.knots
    c2 = (t3 - t1) / (t3 - t2)
    c3 = (t2 - t1) / (t3 - t2)
    d2 = 3.0 * (_pos2(x - t1) - _pos2(x - t2) * c2 + _pos2(x - t3) * c3)
    return np.stack([np.ones_like(x), d2], axis=-1)


def make_basis(values, quantiles: Sequence[float] = (0.25, 0.5, 0.75),
               kind: str = RCS3) -> SplineBasis:
    """Place knots at empirical quantiles of ``values``.

    Quantiles use linear interpolation between order statistics (numpy's
    default, "type 7"). Use :func:`normal_basis` for theoretical N(mu, sd)
    quantiles.
    """
    if kind == LINEAR:
        return SplineBasis.linear()
    values = np.asarray(values, dtype=float).ravel()
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise BasisError("cannot place knots: no finite values")
    q = _check_quantiles(quantiles)
    knots = np.quantile(values, q)
    _check_distinct(knots, q)
    return SplineBasis(knots=tuple(knots), kind=kind)


def normal_basis(quantiles: Sequence[float] = (0.25, 0.5, 0.75), mu: float = 0.0,
                 sd: float = 1.0, kind: str = RCS3) -> SplineBasis:
    """Knots at theoretical quantiles of N(mu, sd^2)."""
    from scipy.stats import norm

    q = _check_quantiles(quantiles)
    knots = mu + sd * norm.ppf(q)
    _check_distinct(knots, q)
    return SplineBasis(knots=tuple(knots), kind=kind)


def _check_quantiles(quantiles) -> np.ndarray:
    q = np.asarray(quantiles, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise BasisError("quantiles must be a nonempty 1-d sequence")
    if np.any(q <= 0) or np.any(q >= 1):
        raise BasisError(f"quantiles must lie in (0, 1), got {q.tolist()}")
    if np.any(np.diff(q) <= 0):
        raise BasisError(f"quantiles must be strictly increasing, got {q.tolist()}")
    return q


def _check_distinct(knots, q):
    for i in range(len(knots) - 1):
        if not knots[i + 1] > knots[i]:
            raise BasisError(
                f"duplicate knots: quantiles {q[i]:g} and {q[i + 1]:g} both map to "
                f"{knots[i]:g} (degenerate value distribution)")
