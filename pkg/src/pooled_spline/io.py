"""CSV ingestion and validation, simulation config files, result writers.

Dataset CSV columns (header required, comma separated, UTF-8):

    study, stratum, case        required
    w                           local-lab measurement; may be empty in reference-lab studies
    x_ref                       reference-lab measurement, optional
    in_cal                      0/1 calibration-subset flag, optional (default 0)
    is_reference_lab            0/1, constant within a study, optional (default 0)
    z_1, ..., z_P               pre-coded confounders, optional
    x_tilde                     calibrated value, optional (written back by save_dataset)
"""
from __future__ import annotations

import configparser
import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import DataError, PooledDataset, UninformativeStrataWarning
from .simulation import ConfigError, SimulationConfig

REQUIRED = ("study", "stratum", "case", "w")


class SchemaError(DataError):
    pass


@dataclass
class ValidationReport:
    n_rows: int
    n_strata: int
    dropped_strata: list = field(default_factory=list)
    missing: dict = field(default_factory=dict)
    per_study: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_strata": self.n_strata,
                "dropped_strata": [list(k) for k in self.dropped_strata],
                "missing": self.missing, "per_study": self.per_study}


def _num(text: str, line: int, col: str) -> float:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"line {line}: column {col!r} is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"line {line}: column {col!r} is not finite: {text!r}")
    return v


def _flag(text: str, line: int, col: str, default: int = 0) -> int:
    text = text.strip()
    if text == "":
        return default
    if text not in ("0", "1"):
        raise SchemaError(f"line {line}: column {col!r} must be 0 or 1, got {text!r}")
    return int(text)


def load_dataset(path, reference_studies=None) -> tuple[PooledDataset, ValidationReport]:
    """Read and validate a pooled case-control CSV.

    ``reference_studies`` marks studies measured in the reference lab, in
    addition to any ``is_reference_lab`` column. Uninformative strata are
    dropped with a warning; schema violations raise :class:`SchemaError`
    citing the file line.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing_cols = [c for c in REQUIRED if c not in header]
        if missing_cols:
            raise SchemaError(f"{path}: missing required column(s) {missing_cols}")
        reader.fieldnames = header
        z_cols = sorted((h for h in header if h.startswith("z_")),
                        key=lambda h: (len(h), h))
        rows = []
        for rec in reader:
            line = reader.line_num
            rec = {k: (v or "") for k, v in rec.items()}
            case = _flag(rec["case"], line, "case", default=-1)
            if case < 0:
                raise SchemaError(f"line {line}: column 'case' is empty")
            row = {
                "line": line,
                "study": rec["study"].strip(),
                "stratum": rec["stratum"].strip(),
                "case": case,
                "w": _num(rec["w"], line, "w"),
                "x_ref": _num(rec.get("x_ref", ""), line, "x_ref"),
                "in_cal": _flag(rec.get("in_cal", ""), line, "in_cal"),
                "ref": _flag(rec.get("is_reference_lab", ""), line, "is_reference_lab"),
                "z": [_num(rec[c], line, c) for c in z_cols],
                "x_tilde": _num(rec.get("x_tilde", ""), line, "x_tilde"),
            }
            if not row["study"] or not row["stratum"]:
                raise SchemaError(f"line {line}: empty study or stratum id")
            if row["in_cal"] and row["case"]:
                raise SchemaError(f"line {line}: in_cal=1 on a case; calibration uses controls only")
            if row["in_cal"] and math.isnan(row["x_ref"]):
                raise SchemaError(f"line {line}: in_cal=1 requires x_ref")
            if any(math.isnan(v) for v in row["z"]):
                raise SchemaError(f"line {line}: missing confounder value")
            rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    ref = {}
    for r in rows:
        prev = ref.setdefault(r["study"], r["ref"])
        if prev != r["ref"]:
            raise SchemaError(f"line {r['line']}: is_reference_lab differs within study {r['study']!r}")
    for s in reference_studies or ():
        if s not in ref:
            raise SchemaError(f"reference study {s!r} not present in data")
        ref[s] = 1
    for r in rows:
        if ref[r["study"]]:
            if math.isnan(r["x_ref"]):
                raise SchemaError(f"line {r['line']}: reference-lab study {r['study']!r} lacks x_ref")
        elif math.isnan(r["w"]):
            raise SchemaError(f"line {r['line']}: local-lab study {r['study']!r} lacks w")

    xt = np.array([r["x_tilde"] for r in rows])
    has_xt = "x_tilde" in header and np.all(np.isfinite(xt))
    ds = PooledDataset.build(
        [r["study"] for r in rows], [r["stratum"] for r in rows], [r["case"] for r in rows],
        w=[r["w"] for r in rows], x_ref=[r["x_ref"] for r in rows],
        in_cal=[r["in_cal"] for r in rows],
        z=np.array([r["z"] for r in rows], dtype=float).reshape(len(rows), len(z_cols)),
        reference_lab={k: bool(v) for k, v in ref.items()}, z_names=tuple(z_cols),
        x_tilde=xt if has_xt else None)
    ds2, dropped = ds.drop_uninformative(warn=False)
    if dropped:
        warnings.warn(f"{path.name}: dropping {len(dropped)} uninformative strata "
                      f"(no case or no control): {dropped[:5]}",
                      UninformativeStrataWarning, stacklevel=2)

    missing = {"w": int(np.isnan(ds.w).sum()), "x_ref": int(np.isnan(ds.x_ref).sum())}
    per_study = {}
    nc, nk = ds2.stratum_sizes()
    sstudy = ds2.stratum_study()
    for s in ds2.studies:
        m = ds2.study == s
        per_study[s] = {
            "reference_lab": bool(ds2.reference_lab[s]),
            "n_cases": int(ds2.case[m].sum()),
            "n_controls": int((1 - ds2.case[m]).sum()),
            "n_strata": int((sstudy == s).sum()),
            "n_cal": int(ds2.in_cal[m].sum()),
        }
    report = ValidationReport(len(rows), ds2.n_strata, dropped, missing, per_study)
    return ds2, report


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def save_dataset(dataset: PooledDataset, path) -> None:
    cols = ["study", "stratum", "case", "w", "x_ref", "in_cal", "is_reference_lab",
            *dataset.z_names]
    if dataset.x_tilde is not None:
        cols.append("x_tilde")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for i in range(len(dataset)):
            row = [dataset.study[i], dataset.stratum[i], int(dataset.case[i]),
                   _fmt(dataset.w[i]), _fmt(dataset.x_ref[i]), int(dataset.in_cal[i]),
                   int(dataset.reference_lab[dataset.study[i]]),
                   *(_fmt(v) for v in dataset.z[i])]
            if dataset.x_tilde is not None:
                row.append(_fmt(dataset.x_tilde[i]))
            wr.writerow(row)


# -- simulation config ----------------------------------------------------------

_INT = ("n_studies", "pairs_per_study", "n_replicates", "seed")
_FLOAT = ("mu_x", "sigma2_x", "beta_x1", "beta_x2", "beta0_sd", "calibration_proportion")
_FLOAT_LIST = ("a", "b", "sigma2_w", "knots")
EXTRA_KEYS = ("variance_ratios",)


def _parse_beta(text: str) -> float:
    """Accept plain numbers and the forms '-log(1.5)' / 'log(1.75)'."""
    t = text.strip().replace(" ", "")
    sign = 1.0
    if t.startswith("-"):
        sign, t = -1.0, t[1:]
    if t.startswith("log(") and t.endswith(")"):
        return sign * math.log(float(t[4:-1]))
    return sign * float(t)


def parse_config_mapping(raw: dict) -> tuple[SimulationConfig, dict]:
    kwargs, extra = {}, {}
    for key, val in raw.items():
        key = key.strip().lower()
        try:
            if key in _INT:
                kwargs[key] = int(str(val).strip())
            elif key in ("beta_x1", "beta_x2") and isinstance(val, str):
                kwargs[key] = _parse_beta(val)
            elif key in _FLOAT:
                kwargs[key] = float(val)
            elif key in _FLOAT_LIST:
                kwargs[key] = tuple(float(v) for v in
                                    (val.split(",") if isinstance(val, str) else val))
            elif key == "strategies":
                kwargs[key] = tuple(v.strip() for v in
                                    (val.split(",") if isinstance(val, str) else val) if v.strip())
            elif key == "variance_ratio":
                kwargs[key] = None if val in (None, "", "none") else float(val)
            elif key == "variance_ratios":
                extra[key] = [float(v) for v in (val.split(",") if isinstance(val, str) else val)]
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {val!r}") from None
    return SimulationConfig(**kwargs), extra


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("pooled_spline") / "configs" / name))


def read_config(path) -> tuple[SimulationConfig, dict]:
    """Load a flat ``key = value`` config, or a JSON manifest from a previous run.

    Per-study vectors are comma lists. Names of bundled configs (e.g.
    ``table1_row2.cfg``) resolve when no such file exists locally.
    """
    p = Path(path)
    if not p.exists():
        alt = bundled_config(p.name)
        if not alt.exists():
            raise ConfigError(f"config file {path} not found")
        p = alt
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        doc = json.loads(text)
        raw = dict(doc.get("config", doc))
        if doc.get("variance_ratios") is not None:
            raw["variance_ratios"] = doc["variance_ratios"]
        return parse_config_mapping(raw)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[simulation]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_config_mapping(dict(cp["simulation"]))


# -- writers --------------------------------------------------------------------

def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_curve_csv(points, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "log_rr", "lo95", "hi95"])
        for p in points:
            wr.writerow([_fmt(float(v)) for v in p])


_COEFS = ("x1", "x2")
_STRAT_ORDER = ("internalized", "full", "naive")


def ops_columns(strategies) -> list[str]:
    strats = [s for s in _STRAT_ORDER if s in strategies]
    short = {"internalized": "IN", "full": "FC", "naive": "N"}
    cols = ["calibration_proportion", "variance_ratio", "beta_x1", "beta_x2", "n_replicates"]
    for k, c in enumerate(_COEFS):
        cols.append(f"bias_kind_{c}")
        for metric in ("bias", "sd", "coverage"):
            cols += [f"{metric}_{c}_{short[s]}" for s in strats]
    cols += [f"failures_{short[s]}" for s in strats]
    return cols


def write_ops_csv(batteries, path) -> None:
    """One row per scenario: bias, SD and coverage for each strategy and coefficient."""
    batteries = list(batteries)
    strategies = batteries[0].config.strategies
    cols = ops_columns(strategies)
    strats = [s for s in _STRAT_ORDER if s in strategies]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for oc in batteries:
            cfg = oc.config
            row = [_fmt(cfg.calibration_proportion),
                   "" if cfg.variance_ratio is None else _fmt(cfg.variance_ratio),
                   _fmt(cfg.beta_x1), _fmt(cfg.beta_x2), cfg.n_replicates]
            for k in range(2):
                row.append(oc.get(strats[0], k).bias_kind)
                for metric in ("bias", "sd", "coverage"):
                    row += [_fmt(getattr(oc.get(s, k), metric)) for s in strats]
            row += [oc.get(s, 0).n_failed for s in strats]
            wr.writerow(row)


def write_raw_csv(batteries, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variance_ratio", "replicate", "strategy", "ok", "est_x1", "est_x2",
                     "se_x1", "se_x2", "error"])
        for oc in batteries:
            vr = "" if oc.config.variance_ratio is None else _fmt(oc.config.variance_ratio)
            for r in sorted(oc.records, key=lambda r: (r.replicate, _STRAT_ORDER.index(r.strategy))):
                wr.writerow([vr, r.replicate, r.strategy, int(r.ok),
                             *(_fmt(v) for v in r.estimate), *(_fmt(v) for v in r.se), r.error])
