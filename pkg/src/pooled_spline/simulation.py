"""Monte Carlo engine for 1:1 matched case-control pooling studies.

Each replicate draws its variates from a Philox (counter-based) stream keyed
by ``(seed, replicate)``, so serial and parallel runs see identical data.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .calibration import CalibrationStrategy
from .data import PooledDataset
from .inference import analyze
from .splines import SplineBasis, eval_basis, normal_basis

log = logging.getLogger(__name__)

POOL_CAP = 10_000
_BLOCK = 32
_Z975 = 1.959963984540054
ALL_STRATEGIES = ("internalized", "full", "naive")


class ConfigError(ValueError):
    pass


class BatteryError(RuntimeError):
    pass


def _default_knots():
    return tuple(normal_basis().knots)


@dataclass(frozen=True)
class SimulationConfig:
    n_studies: int = 4
    pairs_per_study: int = 500
    mu_x: float = 0.0
    sigma2_x: float = 1.0
    a: tuple = (-3.0, 1.0, -1.0, 3.0)
    b: tuple = (0.5, 0.75, 1.25, 1.5)
    sigma2_w: tuple = (3.8, 1.7, 0.6, 0.4)
    beta_x1: float = -math.log(1.5)
    beta_x2: float = 0.08
    beta0_sd: float = 0.1
    calibration_proportion: float = 0.05
    knots: tuple = field(default_factory=_default_knots)
    n_replicates: int = 1000
    seed: int = 20190101
    strategies: tuple = ALL_STRATEGIES
    variance_ratio: float | None = None

    def __post_init__(self):
        for name in ("a", "b", "sigma2_w", "knots", "strategies"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "strategies",
                           tuple(CalibrationStrategy.parse(s).value for s in self.strategies))
        self.validate()

    def validate(self):
        S = self.n_studies
        if S < 1 or self.pairs_per_study < 1:
            raise ConfigError("n_studies and pairs_per_study must be positive")
        for name in ("a", "b", "sigma2_w"):
            if len(getattr(self, name)) != S:
                raise ConfigError(f"{name} needs one entry per study ({S})")
        if self.sigma2_x <= 0:
            raise ConfigError("sigma2_x must be positive")
        for s, (b, v) in enumerate(zip(self.b, self.sigma2_w)):
            if b == 0:
                raise ConfigError(f"study {s + 1}: calibration slope b must be nonzero")
            if v <= 0:
                raise ConfigError(f"study {s + 1}: sigma2_w must be positive")
            # Var(eps) = sigma2_x - b^2 sigma2_w keeps the joint normal PSD
            if b * b * v > self.sigma2_x * (1 + 1e-12):
                raise ConfigError(
                    f"study {s + 1}: b^2 * sigma2_w = {b * b * v:g} exceeds sigma2_x = "
                    f"{self.sigma2_x:g}; the (X, W, eps) covariance is not PSD")
        if not 0 < self.calibration_proportion <= 1:
            raise ConfigError("calibration_proportion must lie in (0, 1]")
        if self.n_cal < 3:
            raise ConfigError(
                f"calibration subset of {self.n_cal} controls per study is below 3")
        if self.beta0_sd < 0:
            raise ConfigError("beta0_sd must be nonnegative")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")
        SplineBasis(self.knots)
        if not self.strategies:
            raise ConfigError("at least one strategy is required")

    @property
    def n_cal(self) -> int:
        return math.ceil(self.calibration_proportion * self.pairs_per_study - 1e-9)

    @property
    def basis(self) -> SplineBasis:
        return SplineBasis(self.knots)

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta_x1, self.beta_x2])

    def with_variance_ratio(self, ratio: float) -> "SimulationConfig":
        """Set each study's local-lab variance so that b_s^2 sigma2_w / sigma2_x = ratio."""
        if not 0 < ratio <= 1:
            raise ConfigError(f"variance ratio must lie in (0, 1], got {ratio}")
        s2w = tuple(ratio * self.sigma2_x / (b * b) for b in self.b)
        return replace(self, sigma2_w=s2w, variance_ratio=float(ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent Philox substream for one replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


def _pick_uniform(mask, u):
    """Column index of a uniformly chosen True entry per row."""
    count = mask.sum(axis=1)
    target = np.floor(u * count).astype(np.int64) + 1
    cum = np.cumsum(mask, axis=1)
    return np.argmax((cum == target[:, None]) & mask, axis=1)


def _draw_study_pairs(cfg: SimulationConfig, s: int, rng: np.random.Generator):
    """One (case, control) pair per stratum for study ``s``.

    Subjects are drawn one at a time into the stratum's pool until both a case
    and a control exist; then one of each is selected uniformly from the pool.
    """
    J = cfg.pairs_per_study
    a, b, s2w = cfg.a[s], cfg.b[s], cfg.sigma2_w[s]
    mean_w = (cfg.mu_x - a) / b
    sd_w = math.sqrt(s2w)
    sd_e = math.sqrt(max(cfg.sigma2_x - b * b * s2w, 0.0))
    basis = cfg.basis
    beta = cfg.beta

    beta0 = rng.normal(0.0, cfg.beta0_sd, J) if cfg.beta0_sd > 0 else np.zeros(J)
    out = np.empty((J, 4))  # case x, case w, control x, control w
    pending = np.arange(J)
    pool = None
    while pending.size:
        P = pending.size
        w = rng.normal(mean_w, sd_w, (P, _BLOCK))
        x = a + b * w + rng.normal(0.0, sd_e, (P, _BLOCK))
        eta = beta0[pending, None] + eval_basis(basis, x) @ beta
        y = rng.random((P, _BLOCK)) < expit(eta)
        if pool is None:
            pool = (x, w, y)
        else:
            pool = tuple(np.hstack([p, q]) for p, q in zip(pool, (x, w, y)))
        px, pw, py = pool
        seen_case = np.logical_or.accumulate(py, axis=1)
        seen_ctrl = np.logical_or.accumulate(~py, axis=1)
        both = seen_case & seen_ctrl
        done = both[:, -1]
        if done.any():
            rows = np.flatnonzero(done)
            stop = np.argmax(both[rows], axis=1)
            prefix = np.arange(py.shape[1])[None, :] <= stop[:, None]
            yr = py[rows]
            ic = _pick_uniform(yr & prefix, rng.random(rows.size))
            ik = _pick_uniform(~yr & prefix, rng.random(rows.size))
            tgt = pending[rows]
            out[tgt, 0] = px[rows, ic]
            out[tgt, 1] = pw[rows, ic]
            out[tgt, 2] = px[rows, ik]
            out[tgt, 3] = pw[rows, ik]
            keep = ~done
            pending = pending[keep]
            pool = tuple(p[keep] for p in pool)
        if pending.size and pool[0].shape[1] >= POOL_CAP:
            log.debug("restarting %d strata after %d draws", pending.size, POOL_CAP)
            beta0[pending] = (rng.normal(0.0, cfg.beta0_sd, pending.size)
                              if cfg.beta0_sd > 0 else 0.0)
            pool = None
    return out


def generate_dataset(config: SimulationConfig, replicate: int = 0,
                     rng: np.random.Generator | None = None) -> PooledDataset:
    """Simulate one pooled dataset; every study uses a local laboratory.

    Reference values are kept only for the calibration subset (a simple random
    sample of the selected controls of each study); the full truth is kept in
    ``x_true``.
    """
    rng = rng or replicate_rng(config.seed, replicate)
    J = config.pairs_per_study
    cols = {k: [] for k in ("study", "stratum", "case", "w", "x_ref", "in_cal", "x_true")}
    for s in range(config.n_studies):
        pairs = _draw_study_pairs(config, s, rng)
        cal = np.zeros(J, dtype=bool)
        cal[rng.choice(J, config.n_cal, replace=False)] = True
        x = np.column_stack([pairs[:, 0], pairs[:, 2]]).ravel()
        w = np.column_stack([pairs[:, 1], pairs[:, 3]]).ravel()
        in_cal = np.column_stack([np.zeros(J, bool), cal]).ravel()
        cols["study"].append(np.full(2 * J, str(s + 1), dtype=object))
        cols["stratum"].append(np.repeat(np.arange(1, J + 1).astype(str), 2).astype(object))
        cols["case"].append(np.tile([1, 0], J))
        cols["w"].append(w)
        cols["x_ref"].append(np.where(in_cal, x, np.nan))
        cols["in_cal"].append(in_cal)
        cols["x_true"].append(x)
    c = {k: np.concatenate(v) for k, v in cols.items()}
    return PooledDataset.build(c["study"], c["stratum"], c["case"], w=c["w"], x_ref=c["x_ref"],
                               in_cal=c["in_cal"], x_true=c["x_true"])


# -- batteries ------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    strategy: str
    ok: bool
    estimate: tuple = (math.nan, math.nan)
    se: tuple = (math.nan, math.nan)
    error: str = ""


def run_replicate(config: SimulationConfig, replicate: int) -> list[ReplicateRecord]:
    data = generate_dataset(config, replicate)
    basis = config.basis
    out = []
    for strat in config.strategies:
        try:
            res = analyze(data, strat, basis=basis, wald_terms=())
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            out.append(ReplicateRecord(replicate, strat, False, error=f"{type(exc).__name__}: {exc}"))
            continue
        out.append(ReplicateRecord(replicate, strat, True, tuple(res.params.tolist()),
                                   tuple(res.se.tolist())))
    return out


@dataclass(frozen=True)
class CoefficientSummary:
    bias: float
    bias_kind: str  # "relative" or "absolute" (true value zero)
    bias_mcse: float
    sd: float
    mean_se: float
    coverage: float
    n_ok: int
    n_failed: int


@dataclass
class OperatingCharacteristics:
    config: SimulationConfig
    summaries: dict  # (strategy, coefficient index) -> CoefficientSummary
    records: list

    def get(self, strategy, coef: int = 0) -> CoefficientSummary:
        return self.summaries[(CalibrationStrategy.parse(strategy).value, coef)]


def summarize(config: SimulationConfig, records: Sequence[ReplicateRecord]) -> OperatingCharacteristics:
    truth = config.beta
    out = {}
    n = config.n_replicates
    for strat in config.strategies:
        rs = sorted((r for r in records if r.strategy == strat), key=lambda r: r.replicate)
        ok = [r for r in rs if r.ok]
        fails = len(rs) - len(ok)
        if fails > 0.10 * n:
            msgs = sorted({r.error for r in rs if not r.ok})[:3]
            raise BatteryError(f"{strat}: {fails} of {n} replicates failed; e.g. {msgs}")
        est = np.array([r.estimate for r in ok]).reshape(-1, 2)
        se = np.array([r.se for r in ok]).reshape(-1, 2)
        for k in range(2):
            e, t = est[:, k], truth[k]
            if t != 0:
                dev, kind = (e - t) / t, "relative"
            else:
                dev, kind = e - t, "absolute"
            m = len(ok)
            out[(strat, k)] = CoefficientSummary(
                bias=float(dev.mean()) if m else math.nan,
                bias_kind=kind,
                bias_mcse=float(dev.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan,
                sd=float(e.std(ddof=1)) if m > 1 else math.nan,
                mean_se=float(se[:, k].mean()) if m else math.nan,
                coverage=float(np.mean(np.abs(e - t) <= _Z975 * se[:, k])) if m else math.nan,
                n_ok=m, n_failed=fails)
    return OperatingCharacteristics(config, out, list(records))


def _worker_count(threads):
    if threads is None:
        threads = int(os.environ.get("POOLED_SPLINE_THREADS", "1") or 1)
    return max(1, int(threads))


def run_battery(config: SimulationConfig, threads: int | None = None) -> OperatingCharacteristics:
    """Run every replicate under every configured strategy and aggregate."""
    threads = _worker_count(threads)
    reps = range(config.n_replicates)
    if threads == 1:
        chunks = [run_replicate(config, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run_replicate, [config] * len(reps), reps,
                                   chunksize=max(1, len(reps) // (4 * threads))))
    records = [r for chunk in chunks for r in chunk]
    return summarize(config, records)


def variance_ratio_battery(config: SimulationConfig, ratios: Sequence[float],
                           threads: int | None = None) -> dict:
    """Operating characteristics per variance ratio ``b_s^2 sigma2_w / sigma2_x``."""
    return {float(r): run_battery(config.with_variance_ratio(r), threads) for r in ratios}
