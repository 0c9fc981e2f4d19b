"""Command line entry point: ``pooled-spline {fit,simulate,curve}``."""
from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .calibration import CalibrationStrategy, calibrate
from .inference import FitResult, InferenceError, analyze, log_rr_curve
from .io import (load_dataset, read_config, write_curve_csv, write_json, write_ops_csv,
                 write_raw_csv)
from .likelihood import ConvergenceError, LikelihoodError, ModelCoefficients
from .simulation import BatteryError, ConfigError, run_battery
from .splines import LINEAR, RCS3, SplineBasis

log = logging.getLogger("pooled_spline")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected min:max:step, got {text!r}")
    if step <= 0 or hi < lo:
        raise argparse.ArgumentTypeError("grid needs min <= max and step > 0")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pooled-spline",
                                description="Calibrated spline analysis of pooled matched "
                                            "case-control biomarker studies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the calibrated conditional logistic spline model")
    f.add_argument("data", help="dataset CSV")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--strategy", default="full",
                   choices=[s.value for s in CalibrationStrategy])
    f.add_argument("--basis", default="rcs3", choices=[RCS3, LINEAR])
    f.add_argument("--knot-quantiles", type=_floats, default=(0.25, 0.5, 0.75))
    f.add_argument("--knots", type=_floats, default=None,
                   help="explicit knots t1,t2,t3 (overrides --knot-quantiles)")
    f.add_argument("--knot-source", default="calibrated", choices=["calibrated", "reference"],
                   help="values whose quantiles define the knots")
    f.add_argument("--reference-studies", default="",
                   help="comma list of studies measured in the reference lab")
    f.add_argument("--ref-level", type=float, default=None,
                   help="reference biomarker level; writes curve.csv")
    f.add_argument("--curve-grid", type=_grid, default=None, help="min:max:step")
    f.add_argument("--small-sample", action="store_true",
                   help="inflate the sandwich by n_clusters/(n_clusters-1)")

    s = sub.add_parser("simulate", help="run a Monte Carlo battery")
    s.add_argument("--config", required=True,
                   help="config file (key = value) or manifest.json; bundled names accepted")
    s.add_argument("--out", required=True)
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $POOLED_SPLINE_THREADS or 1)")
    s.add_argument("--keep-raw", action="store_true", help="write per-replicate raw.csv")

    c = sub.add_parser("curve", help="log relative risk curve from a saved fit.json")
    c.add_argument("--fit", required=True, help="fit.json written by 'fit'")
    c.add_argument("--ref-level", type=float, required=True)
    c.add_argument("--curve-grid", type=_grid, required=True, help="min:max:step")
    c.add_argument("--out", required=True)
    return p


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args) -> int:
    out = _prepare_out(args.out)
    refs = [s for s in args.reference_studies.split(",") if s]
    data, report = load_dataset(args.data, reference_studies=refs)
    write_json(report.to_dict(), out / "report.json")
    basis = None
    if args.basis == LINEAR:
        basis = SplineBasis.linear()
    elif args.knots is not None:
        basis = SplineBasis(args.knots)
    try:
        res = analyze(data, args.strategy, basis=basis, basis_kind=args.basis,
                      knot_quantiles=args.knot_quantiles, knot_source=args.knot_source,
                      small_sample=args.small_sample)
    except (ConvergenceError, LikelihoodError, InferenceError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        traj = getattr(exc, "trajectory", None)
        if traj:
            diag["trajectory"] = [{"beta": b.tolist(), "loglik": float(l)} for b, l in traj]
        nd = getattr(exc, "null_direction", None)
        if nd is not None:
            diag["null_direction"] = np.asarray(nd).tolist()
        write_json(diag, out / "diagnostic.json")
        print(f"fit failed: {exc}", file=sys.stderr)
        return 3
    write_json(res.to_dict(), out / "fit.json")
    write_json({"strategy": res.strategy.value,
                "studies": [f.to_dict() for f in res.calibration_fits.values()]},
               out / "calibration.json")
    if args.ref_level is not None:
        grid = args.curve_grid
        if grid is None:
            cal = calibrate(data, res.calibration_fits, res.strategy)
            grid = np.linspace(np.min(cal.x_tilde), np.max(cal.x_tilde), 101)
        write_curve_csv(log_rr_curve(res, res.basis, grid, args.ref_level), out / "curve.csv")
    return 0


def _fit_from_json(path) -> FitResult:
    import json

    from .likelihood import ConvergenceReport

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    basis = SplineBasis.from_dict(doc["basis"])
    coef = ModelCoefficients.from_vector(doc["coef"], basis.dim)
    return FitResult(coef=coef, vcov_beta=np.asarray(doc["vcov"], dtype=float),
                     calibration_fits={}, strategy=CalibrationStrategy.parse(doc["strategy"]),
                     basis=basis, term_names=doc["terms"],
                     convergence=ConvergenceReport(**doc["convergence"]),
                     vcov_kind=doc.get("vcov_kind", "sandwich"))


def cmd_curve(args) -> int:
    out = _prepare_out(args.out)
    res = _fit_from_json(args.fit)
    write_curve_csv(log_rr_curve(res, res.basis, args.curve_grid, args.ref_level),
                    out / "curve.csv")
    return 0


def cmd_simulate(args) -> int:
    from dataclasses import replace

    cfg, extra = read_config(args.config)
    if args.replicates is not None:
        cfg = replace(cfg, n_replicates=args.replicates)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    out = _prepare_out(args.out)
    ratios = extra.get("variance_ratios")
    if ratios:
        batteries = [run_battery(cfg.with_variance_ratio(r), args.threads) for r in ratios]
    else:
        batteries = [run_battery(cfg, args.threads)]
    write_ops_csv(batteries, out / "ops.csv")
    if args.keep_raw:
        write_raw_csv(batteries, out / "raw.csv")
    manifest = {"config": cfg.to_dict(), "variance_ratios": ratios, "seed": cfg.seed,
                "n_replicates": cfg.n_replicates, "version": __version__,
                "backend": _backend.BACKEND}
    write_json(manifest, out / "manifest.json")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"fit": cmd_fit, "simulate": cmd_simulate, "curve": cmd_curve}
    try:
        return handlers[args.command](args)
    except (ConfigError, BatteryError, ValueError, OSError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
