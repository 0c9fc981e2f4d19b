"""Conditional logistic likelihood for n:m matched strata and its maximization.

The stratum denominator sums over every case-sized subset of the stratum.
Two evaluators are provided: direct enumeration (small strata, also used as
an oracle) and the elementary-symmetric-function recursion in the compiled
kernel, which the fitter always uses.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _backend
from .data import PooledDataset, Stratum
from .splines import SplineBasis, eval_basis

log = logging.getLogger(__name__)

ENUMERATION_CAP = 10_000


class LikelihoodError(ValueError):
    pass


class EnumerationCapError(LikelihoodError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory or []


class SingularHessianError(LikelihoodError):
    def __init__(self, msg, null_direction=None):
        super().__init__(msg)
        self.null_direction = null_direction


@dataclass(frozen=True)
class ModelCoefficients:
    beta_x: np.ndarray
    beta_z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        bx = np.atleast_1d(np.asarray(self.beta_x, dtype=float))
        bz = np.atleast_1d(np.asarray(self.beta_z, dtype=float))
        if not (np.all(np.isfinite(bx)) and np.all(np.isfinite(bz))):
            raise LikelihoodError("coefficients must be finite")
        object.__setattr__(self, "beta_x", bx)
        object.__setattr__(self, "beta_z", bz)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta_x, self.beta_z])

    @classmethod
    def from_vector(cls, v, k: int) -> "ModelCoefficients":
        v = np.asarray(v, dtype=float)
        return cls(v[:k], v[k:])

    @classmethod
    def zeros(cls, k: int, p: int = 0) -> "ModelCoefficients":
        return cls(np.zeros(k), np.zeros(p))


@dataclass
class SolverControls:
    tol_grad: float = 1e-8
    tol_step: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 20


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    loglik: float
    max_abs_score: float
    last_step: float
    halvings: int
    n_strata: int
    n_dropped: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- features ---------------------------------------------------------------

def stratum_features(stratum: Stratum, basis: SplineBasis) -> np.ndarray:
    if stratum.x_tilde is None or not np.all(np.isfinite(stratum.x_tilde)):
        raise LikelihoodError(f"stratum {stratum.stratum_id!r}: calibrated values missing")
    return np.hstack([eval_basis(basis, stratum.x_tilde), stratum.z])


def design_matrix(dataset: PooledDataset, basis: SplineBasis, x_tilde=None) -> np.ndarray:
    xt = dataset.x_tilde if x_tilde is None else x_tilde
    if xt is None or not np.all(np.isfinite(xt)):
        raise LikelihoodError("x_tilde must be filled for every subject before fitting")
    return np.hstack([eval_basis(basis, xt), dataset.z])


# -- single stratum -----------------------------------------------------------

def _check_informative(stratum: Stratum):
    if not stratum.informative:
        raise LikelihoodError(
            f"stratum {stratum.stratum_id!r} needs at least one case and one control")


def _coef_vector(coef) -> np.ndarray:
    return coef.vector if isinstance(coef, ModelCoefficients) else np.asarray(coef, dtype=float)


def enumerate_moments(features, y, beta):
    """Brute-force log-likelihood, score and Hessian of one stratum.

    Every case-sized subset is listed explicitly.
    """
    features = np.asarray(features, dtype=float)
    y = np.asarray(y).astype(bool)
    n, N = int(y.sum()), y.size
    count = math.comb(N, n)
    if count > ENUMERATION_CAP:
        raise EnumerationCapError(
            f"stratum has C({N},{n}) = {count} case sets, above the enumeration cap "
            f"{ENUMERATION_CAP}; use the recursive evaluator (method='recursive')")
    subsets = list(itertools.combinations(range(N), n))
    T = np.array([features[list(c)].sum(axis=0) for c in subsets])
    eta = T @ beta
    lse = logsumexp(eta)
    p = np.exp(eta - lse)
    t_obs = features[y].sum(axis=0)
    mu = p @ T
    cov = (T * p[:, None]).T @ T - np.outer(mu, mu)
    return float(t_obs @ beta - lse), t_obs - mu, -cov


def _recursive(features, y, beta, want_hess=True):
    off = np.array([0, len(y)], dtype=np.int64)
    ll, sc, h = _backend.clogit_strata(features, np.asarray(y, dtype=np.int8), off,
                                       np.asarray(beta, dtype=float), want_hess)
    return float(ll[0]), sc[0], h


def stratum_loglik(stratum: Stratum, basis: SplineBasis, coef, method: str = "auto") -> float:
    """Log of the stratum's conditional likelihood contribution at ``coef``.

    ``method`` is 'enumerate', 'recursive', or 'auto' (enumerate when the
    number of case sets is within :data:`ENUMERATION_CAP`).
    """
    _check_informative(stratum)
    F = stratum_features(stratum, basis)
    beta = _coef_vector(coef)
    if method == "auto":
        method = ("enumerate" if math.comb(stratum.y.size, stratum.n_cases) <= ENUMERATION_CAP
                  else "recursive")
    if method == "enumerate":
        return enumerate_moments(F, stratum.y, beta)[0]
    if method == "recursive":
        return _recursive(F, stratum.y, beta, want_hess=False)[0]
    raise ValueError(f"unknown method {method!r}")


def stratum_score(stratum: Stratum, basis: SplineBasis, coef) -> np.ndarray:
    _check_informative(stratum)
    return _recursive(stratum_features(stratum, basis), stratum.y, _coef_vector(coef), False)[1]


def stratum_hessian(stratum: Stratum, basis: SplineBasis, coef) -> np.ndarray:
    _check_informative(stratum)
    return _recursive(stratum_features(stratum, basis), stratum.y, _coef_vector(coef), True)[2]


# -- whole dataset ------------------------------------------------------------

def evaluate(dataset: PooledDataset, basis: SplineBasis, beta, want_hess=True, x_tilde=None):
    """Per-stratum log-likelihoods and scores plus the total Hessian."""
    F = design_matrix(dataset, basis, x_tilde)
    return _backend.clogit_strata(F, dataset.case, dataset.offsets, np.asarray(beta, float),
                                  want_hess)


def total_score(dataset: PooledDataset, basis: SplineBasis, beta, x_tilde=None) -> np.ndarray:
    return evaluate(dataset, basis, beta, want_hess=False, x_tilde=x_tilde)[1].sum(axis=0)


def _check_information(info, names=None):
    evals, evecs = np.linalg.eigh(0.5 * (info + info.T))
    scale = max(1.0, float(np.abs(evals).max()))
    if evals[0] <= 1e-12 * scale:
        v = evecs[:, 0]
        label = ", ".join(f"{n}={c:+.3g}" for n, c in zip(names or range(v.size), v))
        raise SingularHessianError(
            f"observed information is singular (smallest eigenvalue {evals[0]:.3g}); "
            f"null direction [{label}] suggests separation or collinearity", v)


def fit(dataset: PooledDataset, basis: SplineBasis, init: ModelCoefficients | None = None,
        controls: SolverControls | None = None):
    """Maximize the summed conditional log-likelihood by damped Newton.

    Uninformative strata are dropped first. Returns ``(coef, information,
    report)`` where ``information`` is the negative Hessian at the optimum.
    """
    controls = controls or SolverControls()
    data, dropped = dataset.drop_uninformative(warn=False)
    if dropped:
        log.warning("dropped %d uninformative strata", len(dropped))
    if data.n_strata == 0:
        raise LikelihoodError("no informative strata")
    K, P = basis.dim, data.n_z
    names = basis.term_names + list(data.z_names)
    F = design_matrix(data, basis)
    case, off = data.case, data.offsets
    kern = _backend.clogit_strata

    beta = np.zeros(K + P) if init is None else init.vector.astype(float).copy()
    ll_s, sc_s, hess = kern(F, case, off, beta, True)
    ll, grad = ll_s.sum(), sc_s.sum(axis=0)
    trajectory = [(beta.copy(), ll)]
    step_norm = np.inf
    total_halvings = 0
    for it in range(1, controls.max_iter + 1):
        info = -hess
        _check_information(info, names)
        step = np.linalg.solve(info, grad)
        t = 1.0
        for h in range(controls.max_halvings + 1):
            cand = beta + t * step
            ll_c_s, sc_c_s, hess_c = kern(F, case, off, cand, True)
            ll_c = ll_c_s.sum()
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
            total_halvings += 1
        else:
            raise ConvergenceError(
                f"step-halving failed at iteration {it}", trajectory)
        step_norm = float(np.max(np.abs(cand - beta)))
        beta, ll, grad, hess = cand, ll_c, sc_c_s.sum(axis=0), hess_c
        trajectory.append((beta.copy(), ll))
        if np.max(np.abs(grad)) < controls.tol_grad and step_norm < controls.tol_step:
            info = -hess
            _check_information(info, names)
            report = ConvergenceReport(True, it, float(ll), float(np.max(np.abs(grad))),
                                       step_norm, total_halvings, data.n_strata, len(dropped))
            return ModelCoefficients.from_vector(beta, K), info, report
    raise ConvergenceError(
        f"Newton iteration did not converge in {controls.max_iter} iterations "
        f"(max |score| {np.max(np.abs(grad)):.3g}, last step {step_norm:.3g})", trajectory)
