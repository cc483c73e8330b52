"""Command-line interface.

Subcommands: ``estimate``, ``pretest``, ``weights``, ``diagnose-ols``,
``simulate`` and ``export-plot``.  Settings come from an optional JSON
config (``--config``) overridden by flags.  Exit codes: 0 on success, 2 when
an estimand is not identified, 1 on input, solver or other failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .benchmark import TABLE1_COLUMNS, DgpSpec, NoiseSpec, run_table1
from .design import (
    OutcomeModelSpec,
    TreatmentEffectModel,
    build_estimand,
    check_estimability,
    materialize_design,
)
from .estimator import adjusted_weights, fit_imputation, fit_joint
from .exceptions import DidImputeError, NotIdentified, NothingToPlot
from .inference import VarianceSpec, conservative_se, pretest
from .panel import Panel, PanelSchema, load_panel
from .weights import detect_underidentification, implied_weights, static_ols_weights

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_NOT_IDENTIFIED = 0, 1, 2

#: every warning code a report may carry
WARNING_CODES = {
    "missing_outcome_dropped": "rows with a missing outcome were dropped",
    "always_treated_dropped": "units treated in their first observed period were dropped",
    "rank_repair": "collinear design columns beyond the period normalisation were dropped",
    "non_imputable_observations": "some treated observations have no identified Y(0)",
    "theta_partially_identified": "some treatment-effect parameters are not identified",
    "degenerate_denominator": "a tau_bar group had zero total squared weight; tau_bar set to 0",
    "taubar_multi_period_units": "cell-wise tau_bar used with several weighted periods per unit",
    "non_imputable_in_variance": "non-imputable observations carry weight in the variance",
    "ols_negative_weights": "the static regression puts negative weight on some treated observations",
    "fully_dynamic_underidentified": "the fully dynamic regression is not identified",
    "horizon_not_identified": "a requested horizon is not identified and was skipped",
}

CSV_FLOAT = "%.17g"


def _warn(code: str) -> str:
    if code not in WARNING_CODES:
        raise KeyError(f"undocumented warning code {code!r}")
    return code


# --- reports ---------------------------------------------------------------------


@dataclass
class EstimandResult:
    label: str
    estimate: float
    se: float
    n_H: float
    N: int
    N0: int
    N1: int
    taubar_mode: str
    warnings: List[str] = field(default_factory=list)


@dataclass
class EstimateReport:
    estimates: List[EstimandResult]
    pretest: Optional[Dict[str, Any]] = None
    warnings: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "EstimateReport":
        """Raise ``KeyError`` for warning codes missing from :data:`WARNING_CODES`."""
        for code in list(self.warnings) + [w for e in self.estimates for w in e.warnings]:
            _warn(code)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EstimateReport":
        return cls([EstimandResult(**e) for e in d["estimates"]], d.get("pretest"),
                   list(d.get("warnings", [])), dict(d.get("metadata", {})))

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{k: v for k, v in dataclasses.asdict(e).items() if k != "warnings"}
                             for e in self.estimates])


# --- configuration ------------------------------------------------------------------


@dataclass
class RunConfig:
    input: Optional[str] = None
    schema: PanelSchema = field(default_factory=PanelSchema)
    outcome_model: OutcomeModelSpec = field(default_factory=OutcomeModelSpec)
    treatment_effect_model: TreatmentEffectModel = field(default_factory=TreatmentEffectModel)
    estimands: List[Any] = field(default_factory=lambda: ["att"])
    variance: VarianceSpec = field(default_factory=VarianceSpec)
    pretest: Optional[Dict[str, Any]] = None
    simulate: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    threads: int = 1

    def validate(self):
        labels = [e.get("label") for e in self.estimands if isinstance(e, dict) and e.get("label")]
        if len(labels) != len(set(labels)):
            raise ValueError("estimand labels must be unique")


def parse_estimand(text: str):
    """Shorthand: ``att``, ``horizon:H``, ``cohort:E``, ``per_dose`` or a JSON object."""
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    if ":" in text:
        kind, arg = text.split(":", 1)
        key = {"horizon": "h", "balanced_horizon": "h", "cohort": "e"}.get(kind)
        if key is None:
            raise ValueError(f"cannot parse estimand {text!r}")
        return {"kind": kind, key: int(arg)}
    return text


def _int_list(text: str) -> List[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def build_config(args) -> RunConfig:
    raw: Dict[str, Any] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    cols = dict(raw.get("columns", {}))
    for key in ("unit", "time", "outcome", "event_time", "treated", "weight", "dose"):
        val = getattr(args, key, None)
        if val is not None:
            cols[key] = val
    if getattr(args, "covariates", None):
        cols["covariates"] = args.covariates.split(",")
    cols["covariates"] = tuple(cols.get("covariates", ()))
    cols["groups"] = tuple(cols.get("groups", ()))
    schema = PanelSchema(**cols)
    est = raw.get("estimand", raw.get("estimands", "att"))
    estimands = est if isinstance(est, list) else [est]
    if getattr(args, "estimand", None):
        estimands = [parse_estimand(e) for e in args.estimand]
    if getattr(args, "horizons", None):
        by_h = [{"kind": "horizon", "h": h} for h in _int_list(args.horizons)]
        estimands = (estimands if getattr(args, "estimand", None) else []) + by_h
    var = dict(raw.get("variance", {}))
    if getattr(args, "taubar_mode", None):
        var["taubar_mode"] = args.taubar_mode
    if getattr(args, "leave_out", False):
        var["leave_out"] = True
    cfg = RunConfig(
        input=args.input or raw.get("input"),
        schema=schema,
        outcome_model=OutcomeModelSpec.from_dict(raw.get("outcome_model", {})),
        treatment_effect_model=TreatmentEffectModel.from_config(raw.get("treatment_effect_model")),
        estimands=estimands,
        variance=VarianceSpec(**var),
        pretest=raw.get("pretest"),
        simulate=dict(raw.get("simulate", {})),
        seed=args.seed if args.seed is not None else raw.get("seed"),
        threads=args.threads or raw.get("threads", 1),
    )
    cfg.validate()
    return cfg


def _load(cfg: RunConfig) -> Panel:
    if not cfg.input:
        raise ValueError("no input file given (use --input or the config key 'input')")
    return load_panel(cfg.input, cfg.schema)


def _emit(text: str, out: Optional[str]):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _frame_text(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=CSV_FLOAT)


def _table_text(df: pd.DataFrame) -> str:
    return df.to_string(index=False, float_format=lambda x: f"{x:.4g}")


# --- the estimation pipeline ----------------------------------------------------------------


def _estimate_one(panel, cfg, spec, design):
    w = build_estimand(panel, spec)
    tem = cfg.treatment_effect_model
    warns = []
    if tem.restricted:
        jdesign = materialize_design(panel, cfg.outcome_model, tem, check_joint=False)
        fit = fit_joint(panel, cfg.outcome_model, tem, w, design=jdesign)
        w_se = adjusted_weights(panel, cfg.outcome_model, tem, w, design=jdesign)
    else:
        est = check_estimability(panel, None, w, design=design)
        if not est.identified:
            raise NotIdentified(f"estimand {w.label!r} is not identified", certificate=est.certificate)
        fit = fit_imputation(panel, None, w, design=design, check=False)
        w_se = w
    imp = fit if not tem.restricted else fit_imputation(panel, None, w_se, design=design)
    iw = implied_weights(panel, w=w_se, design=design)
    var = conservative_se(imp, iw, cfg.variance)
    warns += [_warn(c) for c in fit.warnings + var.flags]
    res = EstimandResult(w.label, fit.tau_w, var.se, iw.n_h, panel.n_obs, panel.n_untreated,
                         panel.n_treated, var.mode, sorted(set(warns)))
    return res, fit


def run_estimate(cfg: RunConfig, panel: Optional[Panel] = None):
    panel = panel or _load(cfg)
    design = materialize_design(panel, cfg.outcome_model)
    warnings = [_warn(code) for code, _ in panel.warnings]
    if design.repairs:
        warnings.append(_warn("rank_repair"))
    results, fits = [], []
    for spec in cfg.estimands:
        res, fit = _estimate_one(panel, cfg, spec, design)
        results.append(res)
        fits.append(fit)
    pre = None
    if cfg.pretest:
        pt = pretest(panel, cfg.outcome_model, cfg.pretest.get("leads"),
                     cfg.pretest.get("mode", "homoskedastic_F"), design=design)
        pre = pt.to_dict()
    meta = {"version": __version__, "seed": cfg.seed, "input": cfg.input,
            "outcome_model": cfg.outcome_model.to_dict(), "treatment_effect_model": cfg.treatment_effect_model.kind,
            "dropped_missing": panel.n_dropped_missing, "rank_repairs": list(design.repairs)}
    return EstimateReport(results, pre, sorted(set(warnings)), meta).validate(), fits


# --- subcommands ------------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    cfg = build_config(args)
    if args.leads is not None or args.pretest_mode:
        cfg.pretest = {"leads": args.leads, "mode": args.pretest_mode or "homoskedastic_F"}
    report, fits = run_estimate(cfg)
    if args.format == "csv":
        _emit(_frame_text(report.to_frame()), args.out)
    elif args.format == "table":
        _emit(_table_text(report.to_frame()), args.out)
    else:
        _emit(report.to_json(), args.out)
    if args.tau_out:
        frames = [f.tau_frame().assign(estimand=r.label) for r, f in zip(report.estimates, fits)]
        pd.concat(frames).to_csv(args.tau_out, index=False, float_format=CSV_FLOAT)
    return EXIT_OK


def cmd_pretest(args) -> int:
    cfg = build_config(args)
    panel = _load(cfg)
    opts = cfg.pretest or {}
    leads = args.leads if args.leads is not None else opts.get("leads")
    mode = args.mode or opts.get("mode", "homoskedastic_F")
    res = pretest(panel, cfg.outcome_model, leads, mode)
    _emit(json.dumps(res.to_dict(), indent=2), args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    cfg = build_config(args)
    panel = _load(cfg)
    tem = cfg.treatment_effect_model
    w = build_estimand(panel, cfg.estimands[0])
    design = materialize_design(panel, cfg.outcome_model, tem)
    iw = implied_weights(panel, w=w, tem=tem, design=design)
    diag = {"estimand": w.label, **iw.diagnostics()}
    frame = iw.to_frame()
    if args.format == "json":
        _emit(json.dumps({"diagnostics": diag, "weights": json.loads(frame.to_json(orient="records",
                                                                                  double_precision=15))},
                         indent=2), args.out)
    else:
        _emit(_frame_text(frame), args.out)
        text = json.dumps(diag, indent=2)
        if args.diagnostics:
            with open(args.diagnostics, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stderr.write(text + "\n")
    return EXIT_OK


def cmd_diagnose_ols(args) -> int:
    cfg = build_config(args)
    panel = _load(cfg)
    rep = static_ols_weights(panel, cfg.outcome_model)
    under = detect_underidentification(panel)
    warnings = []
    if rep.mass_negative < 0:
        warnings.append(_warn("ols_negative_weights"))
    if not under.ok:
        warnings.append(_warn("fully_dynamic_underidentified"))
    neg = rep.to_frame()
    neg = neg[neg.w_ols < 0]
    summary = {**rep.summary(),
               "negative_cells": [{"unit": u, "time": int(t), "w_ols": float(x)}
                                  for u, t, x in zip(neg.unit, neg.time, neg.w_ols)],
               "fully_dynamic": {"null_dimension": under.dimension, "horizons": under.horizons,
                                 "witness": None if under.witness is None else [float(x) for x in under.witness]},
               "warnings": warnings}
    if args.format == "csv":
        _emit(_frame_text(rep.to_frame()), args.out)
        sys.stderr.write(json.dumps(summary, indent=2) + "\n")
    else:
        _emit(json.dumps(summary, indent=2), args.out)
        if args.weights_out:
            rep.to_frame().to_csv(args.weights_out, index=False, float_format=CSV_FLOAT)
    return EXIT_OK


#: tolerances used when checking simulated values against the published ones
SIMULATE_TOLERANCES = {"imputation": 0.10, "not_yet_treated": 0.15, "last_cohort": 0.15, "coverage": (0.92, 0.97)}


def _records(df: pd.DataFrame) -> list:
    """Rows as plain Python scalars (floats keep full round-trip precision)."""
    return [{k: (v.item() if isinstance(v, np.generic) else v) for k, v in row.items()}
            for row in df.to_dict(orient="records")]


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    sim = dict(cfg.simulate)
    for key in ("reps", "units", "periods"):
        if getattr(args, key, None) is not None:
            sim[key] = getattr(args, key)
    base = DgpSpec()
    spec = DgpSpec(I=int(sim.get("units", sim.get("I", base.I))), T=int(sim.get("periods", sim.get("T", base.T))),
                   reps=int(sim.get("reps", base.reps)),
                   seed=int(cfg.seed) if cfg.seed is not None else int(sim.get("seed", base.seed)),
                   noise=NoiseSpec(**sim.get("noise", {})))
    columns = args.columns.split(",") if args.columns else sim.get("columns", list(TABLE1_COLUMNS))
    rep = run_table1(spec, columns, threads=cfg.threads)
    table = rep.wide()
    if args.format == "json":
        _emit(json.dumps(_records(table), indent=2), args.out)
    elif args.format == "table":
        _emit(_table_text(table), args.out)
    else:
        _emit(_frame_text(table), args.out)
    meta = {"cohort_counts": rep.cohort_counts, "tolerances": SIMULATE_TOLERANCES,
            "spec": {"I": spec.I, "T": spec.T, "reps": spec.reps, "seed": spec.seed},
            "seconds": rep.seconds, "long": _records(rep.table)}
    text = json.dumps(meta, indent=2)
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def plot_rows(panel: Panel, cfg: RunConfig, horizons=None, leads=None, mode="homoskedastic_F") -> pd.DataFrame:
    """Event-study plot data: effect rows for horizons and pre-trend rows from the lead test."""
    design = materialize_design(panel, cfg.outcome_model)
    if horizons is None:
        k = panel.rel_time[panel.treated]
        horizons = sorted(set(k.tolist())) if len(k) else []
    rows = []
    for h in horizons:
        try:
            res, _ = _estimate_one(panel, cfg, {"kind": "horizon", "h": int(h)}, design)
        except NotIdentified:
            logger.warning("%s: horizon %s", _warn("horizon_not_identified"), h)
            continue
        rows.append({"relative_time": int(h), "coefficient": res.estimate, "se": res.se, "kind": "effect"})
    if leads is None or leads > 0:
        pt = pretest(panel, cfg.outcome_model, leads, mode, design=design)
        for h, g, s in sorted(zip(pt.relative_times, pt.gamma_hat, pt.se)):
            rows.append({"relative_time": int(h), "coefficient": float(g), "se": float(s), "kind": "pretrend"})
    if not rows:
        raise NothingToPlot("no effect or pre-trend coefficients to plot")
    df = pd.DataFrame(rows)
    return df.sort_values(["relative_time", "kind"]).reset_index(drop=True)


def cmd_export_plot(args) -> int:
    cfg = build_config(args)
    panel = _load(cfg)
    horizons = _int_list(args.horizons) if args.horizons else None
    df = plot_rows(panel, cfg, horizons, args.leads, args.mode or "homoskedastic_F")
    if args.format == "json":
        _emit(df.to_json(orient="records", double_precision=15), args.out)
    else:
        _emit(_frame_text(df), args.out)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--input", help="input CSV")
    p.add_argument("--unit", help="unit column")
    p.add_argument("--time", help="period column")
    p.add_argument("--outcome", help="outcome column")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--event-time", dest="event_time", help="event-date column")
    g.add_argument("--treated", help="0/1 treatment indicator column")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--weight", help="observation-weight column")
    p.add_argument("--dose", help="treatment-dose column")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=("json", "csv", "table"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="didimpute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[common], help="estimate treatment effects with standard errors")
    p.add_argument("--estimand", action="append", help="att, horizon:H, cohort:E, per_dose or JSON (repeatable)")
    p.add_argument("--horizons", help="horizon list, e.g. 0..4")
    p.add_argument("--taubar-mode", dest="taubar_mode",
                   choices=("auto", "single", "by_cohort_period", "by_horizon"))
    p.add_argument("--leave-out", dest="leave_out", action="store_true")
    p.add_argument("--leads", type=int, help="also run the pre-trend test with this many leads")
    p.add_argument("--pretest-mode", dest="pretest_mode", choices=("homoskedastic_F", "cluster_wald"))
    p.add_argument("--tau-out", dest="tau_out", help="CSV of per-observation effect estimates")
    p.set_defaults(func=cmd_estimate, default_format="json")

    p = sub.add_parser("pretest", parents=[common], help="test for pre-trends on untreated observations")
    p.add_argument("--leads", type=int)
    p.add_argument("--mode", choices=("homoskedastic_F", "cluster_wald"))
    p.set_defaults(func=cmd_pretest, default_format="json")

    p = sub.add_parser("weights", parents=[common], help="implied observation weights of the estimator")
    p.add_argument("--estimand", action="append")
    p.add_argument("--horizons")
    p.add_argument("--diagnostics", help="path for the JSON diagnostics block")
    p.set_defaults(func=cmd_weights, default_format="csv")

    p = sub.add_parser("diagnose-ols", parents=[common], help="static TWFE weights and dynamic identification")
    p.add_argument("--weights-out", dest="weights_out")
    p.set_defaults(func=cmd_diagnose_ols, default_format="json")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo efficiency benchmark")
    p.add_argument("--reps", type=int)
    p.add_argument("--units", type=int)
    p.add_argument("--periods", type=int)
    p.add_argument("--columns", help=f"comma-separated subset of {','.join(TABLE1_COLUMNS)}")
    p.add_argument("--json-out", dest="json_out")
    p.set_defaults(func=cmd_simulate, default_format="csv")

    p = sub.add_parser("export-plot", parents=[common], help="event-study plot data")
    p.add_argument("--horizons")
    p.add_argument("--leads", type=int)
    p.add_argument("--mode", choices=("homoskedastic_F", "cluster_wald"))
    p.set_defaults(func=cmd_export_plot, default_format="csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.format is None:
        args.format = args.default_format
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NotIdentified as exc:
        err = {"error": exc.code, "message": str(exc), "unmatched_columns": sorted(exc.certificate)}
        sys.stderr.write(json.dumps(err) + "\n")
        return EXIT_NOT_IDENTIFIED
    except (DidImputeError, OSError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        sys.stderr.write(json.dumps({"error": code, "message": str(exc)}) + "\n")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
