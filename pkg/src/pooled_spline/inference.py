"""Two-step estimation and stacked-estimating-equation sandwich variance.

Parameters are stacked as ``theta = (a_1, b_1, ..., a_Q, b_Q, beta)``. The
calibration estimating functions are the OLS normal equations of each
calibration control; the dose-response estimating functions are the
stratum scores evaluated at the calibrated values. Clusters are strata,
and a calibration control's residual terms join its own stratum's cluster.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats

from . import _backend
from .calibration import (CalibrationFit, CalibrationStrategy, calibrate, calibration_design,
                          fit_study_calibrations)
from .data import PooledDataset
from .likelihood import (ConvergenceReport, ModelCoefficients, SolverControls, design_matrix,
                         evaluate, fit, total_score)
from .splines import RCS3, SplineBasis, eval_basis, eval_basis_deriv, make_basis


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class WaldResult:
    terms: tuple
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"terms": list(self.terms), "statistic": self.statistic, "df": self.df,
                "p_value": self.p_value}


@dataclass(frozen=True)
class SandwichResult:
    vcov_theta: np.ndarray
    theta_names: list
    vcov_beta: np.ndarray
    kind: str
    bread: np.ndarray | None = None
    meat: np.ndarray | None = None
    cross_block: np.ndarray | None = None


@dataclass
class FitResult:
    coef: ModelCoefficients
    vcov_beta: np.ndarray
    calibration_fits: dict
    strategy: CalibrationStrategy
    basis: SplineBasis
    term_names: list
    convergence: ConvergenceReport
    vcov_kind: str = "sandwich"
    wald: list = field(default_factory=list)
    vcov_theta: np.ndarray | None = None
    theta_names: list | None = None

    @property
    def params(self) -> np.ndarray:
        return self.coef.vector

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov_beta), 0.0, None))

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        z = stats.norm.ppf(0.5 + level / 2)
        return np.column_stack([self.params - z * self.se, self.params + z * self.se])

    def term_index(self, terms) -> list[int]:
        out = []
        for t in terms:
            if isinstance(t, (int, np.integer)):
                out.append(int(t))
            else:
                try:
                    out.append(self.term_names.index(t))
                except ValueError:
                    raise InferenceError(f"unknown term {t!r}; have {self.term_names}") from None
        return out

    def to_dict(self) -> dict:
        ci = self.conf_int()
        return {
            "strategy": self.strategy.value,
            "basis": self.basis.to_dict(),
            "terms": self.term_names,
            "coef": self.params.tolist(),
            "se": self.se.tolist(),
            "ci95": ci.tolist(),
            "vcov": self.vcov_beta.tolist(),
            "vcov_kind": self.vcov_kind,
            "wald": [w.to_dict() for w in self.wald],
            "convergence": self.convergence.to_dict(),
        }


# -- sandwich -------------------------------------------------------------------

def _feature_derivs(dataset: PooledDataset, basis: SplineBasis) -> np.ndarray:
    """d(features)/d(x_tilde) per row, zero in confounder columns."""
    h = eval_basis_deriv(basis, dataset.x_tilde)
    return np.hstack([h, np.zeros((len(dataset), dataset.n_z))])


def cross_block_analytic(dataset: PooledDataset, basis: SplineBasis, strategy, beta,
                         studies: Sequence[str]) -> np.ndarray:
    """d(total score)/d(a_s, b_s) for each study, shape ``(D, 2 * len(studies))``.

    ``dataset`` must hold only informative strata with ``x_tilde`` filled.
    For a row ``k`` moved by ``dx_k``, the score of its stratum changes by
    ``(y_k - pi_k) h_k dx_k - Cov(T, 1[k in S]) (beta . h_k) dx_k``, where ``T`` is
    the case-set feature sum and ``pi_k`` the inclusion probability. Both
    pieces are read off one kernel call on augmented feature columns that
    carry zero coefficients.
    """
    beta = np.asarray(beta, dtype=float)
    F = design_matrix(dataset, basis)
    D = F.shape[1]
    h = _feature_derivs(dataset, basis)
    slope = h @ beta
    design = calibration_design(dataset, strategy)
    cols, vcols = [], []
    for s in studies:
        m = design.get(s, np.zeros(len(dataset), bool)).astype(float)
        for d in (m, m * np.nan_to_num(dataset.w)):
            cols.append(d[:, None] * h)
            vcols.append(d * slope)
    Q2 = len(vcols)
    aug = np.hstack([F] + cols + [np.column_stack(vcols)]) if Q2 else F
    beta_aug = np.concatenate([beta, np.zeros(aug.shape[1] - D)])
    _, score, hess = _backend.clogit_strata(aug, dataset.case, dataset.offsets, beta_aug, True)
    tot = score.sum(axis=0)
    out = np.empty((D, Q2))
    vstart = D + Q2 * D
    for p in range(Q2):
        out[:, p] = tot[D + p * D: D + (p + 1) * D] + hess[:D, vstart + p]
    return out


def cross_block_fd(dataset: PooledDataset, basis: SplineBasis, fits: Mapping[str, CalibrationFit],
                   strategy, beta, studies: Sequence[str], step: float = 1e-6) -> np.ndarray:
    """Central finite-difference version of :func:`cross_block_analytic`."""
    from dataclasses import replace

    D = len(beta)
    out = np.empty((D, 2 * len(studies)))
    for q, s in enumerate(studies):
        for j, name in enumerate(("a_hat", "b_hat")):
            vals = []
            for sign in (1, -1):
                f2 = dict(fits)
                f2[s] = replace(fits[s], **{name: getattr(fits[s], name) + sign * step})
                xt = calibrate(dataset, f2, strategy).x_tilde
                vals.append(total_score(dataset, basis, beta, x_tilde=xt))
            out[:, 2 * q + j] = (vals[0] - vals[1]) / (2 * step)
    return out


def sandwich_vcov(dataset: PooledDataset, basis: SplineBasis,
                  calibration_fits: Mapping[str, CalibrationFit] | None, strategy, coef,
                  small_sample: bool = False, cross: str = "analytic") -> SandwichResult:
    """Covariance of ``theta_hat = (a, b, beta)`` from the stacked estimating equations.

    ``dataset`` must already carry ``x_tilde`` for ``strategy``. With no
    calibration parameters (naive strategy, or only reference-lab studies)
    there is nothing to propagate and the inverse observed information is
    returned, flagged with ``kind='inverse_information'``.
    """
    strategy = CalibrationStrategy.parse(strategy)
    fits = dict(calibration_fits or {})
    beta = coef.vector if isinstance(coef, ModelCoefficients) else np.asarray(coef, float)
    D = beta.size
    names_b = basis.term_names + list(dataset.z_names)
    data, _ = dataset.drop_uninformative(warn=False)
    _, U, H = evaluate(data, basis, beta)
    info = -H

    studies = []
    if strategy is not CalibrationStrategy.NAIVE:
        studies = [s for s in dataset.local_studies if s in fits]
        missing = [s for s in dataset.local_studies if s not in fits]
        if missing:
            raise InferenceError(f"missing calibration fits for studies {missing}")
    if not studies:
        try:
            V = np.linalg.inv(info)
        except np.linalg.LinAlgError as exc:
            raise InferenceError("observed information is singular") from exc
        V = 0.5 * (V + V.T)
        return SandwichResult(V, names_b, V, "inverse_information")

    Q = len(studies)
    dim = 2 * Q + D
    theta_names = [f"{p}[{s}]" for s in studies for p in ("a", "b")] + names_b

    # clusters are all strata of the full dataset (calibration controls may sit
    # in strata that were dropped as uninformative)
    keys = list(zip(dataset.stratum_study(), dataset.stratum[dataset.offsets[:-1]]))
    cluster_of = {k: i for i, k in enumerate(keys)}
    Psi = np.zeros((len(keys), dim))
    inf_keys = zip(data.stratum_study(), data.stratum[data.offsets[:-1]])
    Psi[[cluster_of[k] for k in inf_keys], 2 * Q:] = U

    A = np.zeros((dim, dim))
    A[2 * Q:, 2 * Q:] = info
    row_cluster = dataset.stratum_index()
    for q, s in enumerate(studies):
        m = (dataset.study == s) & dataset.in_cal
        w, x = dataset.w[m], dataset.x_ref[m]
        r = x - fits[s].a_hat - fits[s].b_hat * w
        np.add.at(Psi[:, 2 * q], row_cluster[m], r)
        np.add.at(Psi[:, 2 * q + 1], row_cluster[m], w * r)
        A[2 * q:2 * q + 2, 2 * q:2 * q + 2] = [[m.sum(), w.sum()], [w.sum(), w @ w]]

    if cross == "analytic":
        C = cross_block_analytic(data, basis, strategy, beta, studies)
    elif cross == "fd":
        C = cross_block_fd(data, basis, fits, strategy, beta, studies)
    else:
        raise ValueError(f"unknown cross-block method {cross!r}")
    A[2 * Q:, :2 * Q] = -C

    B = Psi.T @ Psi
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise InferenceError("bread matrix of the stacked estimating equations is singular") from exc
    V = Ainv @ B @ Ainv.T
    if small_sample:
        nc = len(keys)
        V *= nc / (nc - 1)
    V = 0.5 * (V + V.T)
    return SandwichResult(V, theta_names, V[2 * Q:, 2 * Q:].copy(), "sandwich", A, B, C)


# -- tests and curves -------------------------------------------------------------

def wald_test(fit_result: FitResult, terms) -> WaldResult:
    """Joint Wald chi-square test that the selected coefficients are zero."""
    idx = fit_result.term_index(terms)
    b = fit_result.params[idx]
    V = fit_result.vcov_beta[np.ix_(idx, idx)]
    try:
        stat = float(b @ np.linalg.solve(V, b))
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"covariance block for {terms} is singular") from exc
    if not np.isfinite(stat):
        raise InferenceError(f"covariance block for {terms} is singular")
    df = len(idx)
    return WaldResult(tuple(fit_result.term_names[i] for i in idx), stat, df,
                      float(stats.chi2.sf(stat, df)))


class CurvePoint(NamedTuple):
    x: float
    log_rr: float
    lo95: float
    hi95: float


def log_rr_curve(fit_result: FitResult, basis: SplineBasis | None, grid, x_ref: float,
                 level: float = 0.95) -> list[CurvePoint]:
    """Pointwise log relative risk versus ``x_ref`` with delta-method limits."""
    basis = basis or fit_result.basis
    x_ref = float(x_ref)
    if not np.isfinite(x_ref):
        raise InferenceError("reference level must be finite")
    grid = np.asarray(grid, dtype=float).ravel()
    if not np.all(np.isfinite(grid)):
        raise InferenceError("curve grid must be finite")
    K = basis.dim
    bx = fit_result.coef.beta_x
    Vxx = fit_result.vcov_beta[:K, :K]
    g = eval_basis(basis, grid) - eval_basis(basis, x_ref)
    lr = g @ bx
    var = np.einsum("ij,jk,ik->i", g, Vxx, g)
    half = stats.norm.ppf(0.5 + level / 2) * np.sqrt(np.clip(var, 0.0, None))
    return [CurvePoint(float(a), float(b), float(b - c), float(b + c))
            for a, b, c in zip(grid, lr, half)]


# -- two-step pipeline ----------------------------------------------------------

def default_wald_terms(basis: SplineBasis, z_names) -> list[tuple]:
    names = basis.term_names
    tests = [(n,) for n in names] + [(z,) for z in z_names]
    if basis.kind == RCS3:
        tests.append(tuple(names))
    return tests


def analyze(dataset: PooledDataset, strategy="full", basis: SplineBasis | None = None,
            basis_kind: str = RCS3, knot_quantiles=(0.25, 0.5, 0.75),
            knot_source: str = "calibrated", controls: SolverControls | None = None,
            small_sample: bool = False, wald_terms=None) -> FitResult:
    """Calibrate, fit the conditional logistic spline model, and compute the sandwich.

    Knots come from ``basis`` when given, otherwise from ``knot_quantiles`` of
    the pooled calibrated values (``knot_source='calibrated'``) or of the
    observed reference measurements (``knot_source='reference'``).
    """
    strategy = CalibrationStrategy.parse(strategy)
    fits = {} if strategy is CalibrationStrategy.NAIVE else fit_study_calibrations(dataset)
    cal = calibrate(dataset, fits, strategy)
    if basis is None:
        if knot_source == "calibrated":
            src = cal.x_tilde
        elif knot_source == "reference":
            src = dataset.x_ref[np.isfinite(dataset.x_ref)]
        else:
            raise ValueError(f"unknown knot source {knot_source!r}")
        basis = make_basis(src, knot_quantiles, kind=basis_kind)
    coef, _, report = fit(cal, basis, init=None, controls=controls)
    sw = sandwich_vcov(cal, basis, fits, strategy, coef, small_sample=small_sample)
    names = basis.term_names + list(dataset.z_names)
    res = FitResult(coef=coef, vcov_beta=sw.vcov_beta, calibration_fits=fits, strategy=strategy,
                    basis=basis, term_names=names, convergence=report, vcov_kind=sw.kind,
                    vcov_theta=sw.vcov_theta, theta_names=sw.theta_names)
    for terms in (wald_terms if wald_terms is not None else
                  default_wald_terms(basis, dataset.z_names)):
        res.wald.append(wald_test(res, terms))
    return res
