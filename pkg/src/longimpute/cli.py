"""Command-line front end: describe, diagnose, analyze, simulate, study.

Exit codes: 0 success, 2 input or configuration error, 3 every selected
analysis method failed.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__, diagnostics, simgen
from .analysis import METHODS, AnalysisBundle, run_method
from .dataset import describe, load_csv, write_csv, write_summary_csv
from .errors import ConfigError, LongImputeError
from .lmm import format_p

EXIT_OK, EXIT_INPUT, EXIT_ALL_FAILED = 0, 2, 3
SEED_ENV = "LONGIMPUTE_SEED"


class UsageError(Exception):
    """Bad command-line value; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def _resolve_seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        seed = int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed < 0:
        raise UsageError(f"{SEED_ENV} must be nonnegative")
    return seed


def _seed_type(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if v < 0 or v >= 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _methods_type(text):
    methods = tuple(m.strip().lower() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise argparse.ArgumentTypeError(f"choose methods from {','.join(METHODS)}")
    if len(set(methods)) != len(methods):
        raise argparse.ArgumentTypeError("a method is listed twice")
    return methods


def _versions():
    return {"longimpute": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3]))}


def _timestamp():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Output:
    """Write named files into ``--out`` or, with ``--out -``, to stdout."""

    def __init__(self, out):
        self.stdout = out == "-"
        self.dir = None if self.stdout else Path(out)

    def write(self, name: str, text: str):
        if self.stdout:
            sys.stdout.write(text)
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    if v is None:
        return "NA"
    v = float(v)
    return repr(v) if math.isfinite(v) else "NA"


def _load(args):
    path = args.input
    if not os.path.exists(path):
        raise UsageError(f"input file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    ds = load_csv(io.BytesIO(raw), raw_cd4=args.raw_cd4,
                  allow_intermittent=args.allow_intermittent,
                  allow_negative=args.allow_negative)
    return ds, hashlib.sha256(raw).hexdigest()


# ---------------------------------------------------------------------------
# report sections


def _diagnostics(ds, start_visit: int) -> dict:
    out = {}
    try:
        fit = diagnostics.fit_dropout_logistic(diagnostics.dropout_design(ds, start_visit))
        out["dropout_model"] = {"status": "ok", "odds_ratios": fit.records(),
                                "sigma_u": fit.sigma_u, "loglik": fit.loglik,
                                "n_records": fit.n_records, "converged": fit.converged}
    except (LongImputeError, ValueError) as exc:
        out["dropout_model"] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    try:
        out["mcar_test"] = {"status": "ok", **diagnostics.little_mcar_test(ds).to_dict()}
    except (LongImputeError, ValueError, np.linalg.LinAlgError) as exc:
        out["mcar_test"] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    try:
        out["pattern_chi2"] = {"status": "ok", **diagnostics.pattern_chi2(ds).to_dict()}
    except (LongImputeError, ValueError) as exc:
        out["pattern_chi2"] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return out


def _diagnostics_csv(diag) -> str:
    rows = []
    dm = diag["dropout_model"]
    if dm["status"] == "ok":
        for r in dm["odds_ratios"]:
            rows.append(["dropout_model", r["variable"], _num(r["odds_ratio"]), _num(r["se"]),
                         _num(r["ci_low"]), _num(r["ci_high"]), "", format_p(r["p"])])
    for key in ("mcar_test", "pattern_chi2"):
        d = diag[key]
        if d["status"] == "ok":
            rows.append([key, "", "", "", "", "", f"{_num(d['statistic'])};df={d['df']}",
                         format_p(d["p"])])
    return _csv_text(["section", "variable", "odds_ratio", "se", "ci_low", "ci_high",
                      "statistic", "p"], rows)


def _method_records(results):
    methods, coefs = [], []
    for m, res in results.items():
        entry = {"method": m, "status": "ok" if res.ok else "failed"}
        if res.ok:
            entry.update(n_subjects=res.n_subjects, sigma_b2=res.sigma_b2,
                         sigma_e2=res.sigma_e2, loglik=res.loglik)
            for r in res.records():
                r["p_display"] = format_p(r["p"])
                coefs.append(r)
        else:
            entry["error"] = res.error
        methods.append(entry)
    return methods, coefs


def _coef_csv(results, layout) -> str:
    if layout == "plain":
        rows = []
        for res in results.values():
            for r in res.records():
                rows.append([r["method"], r["coef"], _num(r["estimate"]), _num(r["se"]),
                             _num(r["ci_low"]), _num(r["ci_high"]), _num(r["p"]),
                             _num(r["df"])])
        return _csv_text(["method", "coef", "estimate", "se", "ci_low", "ci_high", "p", "df"],
                         rows)
    # wide layout: one row per coefficient, Est/Std/p-value per method
    ok = [m for m, r in results.items() if r.ok]
    header = ["coef"] + [f"{m}_{c}" for m in ok for c in ("est", "std", "p")]
    names = []
    for m in ok:
        names += [n for n in results[m].names if n not in names]
    rows = []
    for n in names:
        row = [n]
        for m in ok:
            res = results[m]
            if n in res.names:
                i = res.names.index(n)
                row += [f"{res.estimate[i]:.4f}", f"{res.se[i]:.4f}", format_p(res.p[i])]
            else:
                row += ["", "", ""]
        rows.append(row)
    return _csv_text(header, rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_describe(args) -> int:
    ds, digest = _load(args)
    report = describe(ds)
    out = _Output(args.out)
    if args.format == "json":
        doc = {"command": "describe", "descriptives": report,
               "provenance": {"input_sha256": digest, "versions": _versions(),
                              "timestamp": _timestamp()}}
        out.write("describe.json", _dumps(doc))
    else:
        buf = io.StringIO()
        write_summary_csv(report, buf)
        out.write("describe.csv", buf.getvalue())
    return EXIT_OK


def cmd_diagnose(args) -> int:
    ds, digest = _load(args)
    diag = _diagnostics(ds, args.dropout_start)
    out = _Output(args.out)
    if args.format == "json":
        doc = {"command": "diagnose", "diagnostics": diag,
               "provenance": {"input_sha256": digest, "versions": _versions(),
                              "timestamp": _timestamp()}}
        out.write("diagnose.json", _dumps(doc))
    else:
        out.write("diagnostics.csv", _diagnostics_csv(diag))
    return EXIT_OK


def run_analysis(ds, bundle: AnalysisBundle, seed: int, threads: int = 1) -> dict:
    """Run each selected method; every method sees the same seed, so results do
    not depend on which other methods run or on ``threads``."""
    if threads > 1 and len(bundle.methods) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = {m: pool.submit(run_method, ds, m, bundle, seed) for m in bundle.methods}
            return {m: futs[m].result() for m in bundle.methods}
    return {m: run_method(ds, m, bundle, seed) for m in bundle.methods}


def cmd_analyze(args) -> int:
    ds, digest = _load(args)
    seed = _resolve_seed(args.seed)
    try:
        bundle = AnalysisBundle(methods=args.methods, mi_k=args.mi_k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    results = run_analysis(ds, bundle, seed, args.threads)
    methods, coefs = _method_records(results)
    out = _Output(args.out)
    if args.format == "json":
        doc = {"command": "analyze", "descriptives": describe(ds),
               "diagnostics": _diagnostics(ds, args.dropout_start),
               "methods": methods, "coefficients": coefs,
               "provenance": {"seed": seed, "mi_k": bundle.mi_k,
                              "methods": list(bundle.methods), "input_sha256": digest,
                              "versions": _versions(), "timestamp": _timestamp()}}
        out.write("analyze.json", _dumps(doc))
    else:
        out.write("coefficients.csv", _coef_csv(results, args.layout))
        if not out.stdout:
            out.write("methods.csv", _csv_text(
                ["method", "status", "n_subjects", "sigma_b2", "sigma_e2", "error"],
                [[m["method"], m["status"], m.get("n_subjects", ""), _num(m.get("sigma_b2")),
                  _num(m.get("sigma_e2")), m.get("error", "")] for m in methods]))
    for m in methods:
        if m["status"] == "failed":
            print(f"longimpute: method {m['method']} failed: {m['error']}", file=sys.stderr)
    return EXIT_OK if any(r.ok for r in results.values()) else EXIT_ALL_FAILED


def _config(args):
    cfg = simgen.TrialGeneratorConfig.load(args.config) if args.config else \
        simgen.TrialGeneratorConfig()
    if args.seed is not None or os.environ.get(SEED_ENV):
        d = cfg.to_dict()
        d["seed"] = _resolve_seed(args.seed)
        cfg = simgen.TrialGeneratorConfig.from_dict(d)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    trial = simgen.generate(cfg)
    out = _Output(args.out)
    for name, ds in (("full.csv", trial.full), ("observed.csv", trial.observed)):
        buf = io.StringIO()
        write_csv(ds, buf)
        out.write(name, buf.getvalue())
    if not out.stdout:
        out.write("config.json", _dumps(cfg.to_dict()))
    return EXIT_OK


STUDY_FIELDS = ("method", "coef", "truth", "n_ok", "mean_estimate", "bias", "mc_se", "emp_se",
                "mean_model_se", "coverage")


def cmd_study(args) -> int:
    if args.reps < 2:
        raise ConfigError("need at least two replicates", "reps")
    cfg = _config(args)
    try:
        bundle = AnalysisBundle(methods=args.methods, mi_k=args.mi_k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = simgen.replicate_study(cfg, args.reps, bundle, threads=args.threads)
    out = _Output(args.out)
    rows = [[r["method"], r["coef"]] + [_num(r[k]) if k != "n_ok" else str(r[k])
                                         for k in STUDY_FIELDS[2:]] for r in summary.rows]
    out.write("summary.csv", _csv_text(STUDY_FIELDS, rows))
    if not out.stdout:
        doc = {"command": "study", "n_reps": summary.n_reps, "failures": summary.failures,
               "config": cfg.to_dict(), "methods": list(bundle.methods), "mi_k": bundle.mi_k,
               "rows": summary.rows,
               "provenance": {"versions": _versions(), "timestamp": _timestamp()}}
        out.write("summary.json", _dumps(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longimpute",
                                description="Missing-data analysis of longitudinal trials.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--input", required=True, help="long-format CSV")
        sp.add_argument("--raw-cd4", action="store_true",
                        help="outcomes are raw CD4 counts; take square roots on load")
        sp.add_argument("--allow-intermittent", action="store_true",
                        help="accept non-monotone missingness where supported")
        sp.add_argument("--allow-negative", action="store_true",
                        help="accept negative square-root outcomes (simulated data)")

    def out_args(sp, formats=True):
        sp.add_argument("--out", default=".", help="output directory, or - for stdout")
        if formats:
            sp.add_argument("--format", choices=("csv", "json"), default="csv")

    def run_args(sp):
        sp.add_argument("--methods", type=_methods_type, default=METHODS,
                        help="comma-separated subset of " + ",".join(METHODS))
        sp.add_argument("--mi-k", type=int, default=25, help="number of imputations")
        sp.add_argument("--seed", type=_seed_type, default=None,
                        help=f"RNG seed (falls back to ${SEED_ENV}, then 0)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")

    sp = sub.add_parser("describe", help="retention and pattern-mean tables")
    data_args(sp)
    out_args(sp)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("diagnose", help="dropout model, MCAR test, pattern chi-squared")
    data_args(sp)
    out_args(sp)
    sp.add_argument("--dropout-start", type=int, default=1,
                    help="0-based first visit at risk of withdrawal (default 1)")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("analyze", help="fit the selected missing-data methods")
    data_args(sp)
    out_args(sp)
    run_args(sp)
    sp.add_argument("--layout", choices=("table", "plain"), default="table",
                    help="coefficient CSV: wide table or tidy long format")
    sp.add_argument("--dropout-start", type=int, default=1, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("simulate", help="generate a synthetic trial")
    sp.add_argument("--config", help="TOML or JSON generator config")
    sp.add_argument("--seed", type=_seed_type, default=None)
    out_args(sp, formats=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("study", help="replicate simulation study of bias and coverage")
    sp.add_argument("--config", help="TOML or JSON generator config")
    sp.add_argument("--reps", type=int, default=200)
    run_args(sp)
    out_args(sp, formats=False)
    sp.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except (LongImputeError, UsageError, OSError) as exc:
        print(f"longimpute: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
