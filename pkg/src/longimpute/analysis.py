"""Run one missing-data strategy end to end and collect its coefficient table.

Shared by the simulation study and the command line so both report the same
numbers for the same inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import impute, lmm
from .dataset import LongitudinalDataset
from .errors import LongImputeError

METHODS = ("cc", "locf", "bocf", "ml", "mi")
Z975 = stats.norm.ppf(0.975)


@dataclass(frozen=True)
class AnalysisBundle:
    methods: tuple = METHODS
    model: lmm.ModelSpec = field(default_factory=lmm.ModelSpec)
    fit_options: lmm.FitOptions = field(default_factory=lmm.FitOptions)
    mi_k: int = 25
    imputation: impute.ImputationModelSpec = field(default_factory=impute.ImputationModelSpec)

    def __post_init__(self):
        methods = tuple(m.lower() for m in self.methods)
        if not methods:
            raise ValueError("select at least one method")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {METHODS}")
        if "mi" in methods and self.mi_k < 2:
            raise ValueError("mi_k must be at least 2 when mi is selected")
        object.__setattr__(self, "methods", methods)


@dataclass
class MethodResult:
    method: str
    names: tuple = ()
    estimate: np.ndarray = None
    se: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    p: np.ndarray = None
    df: np.ndarray = None
    n_subjects: int = 0
    sigma_b2: float = float("nan")
    sigma_e2: float = float("nan")
    loglik: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def records(self) -> list:
        if not self.ok:
            return []
        return [
            {"method": self.method, "coef": n, "estimate": float(self.estimate[i]),
             "se": float(self.se[i]), "ci_low": float(self.lower[i]),
             "ci_high": float(self.upper[i]), "p": float(self.p[i]),
             "df": None if np.isinf(self.df[i]) else float(self.df[i])}
            for i, n in enumerate(self.names)
        ]


def _from_fit(method, fit: lmm.LmmFit, n_subjects):
    se = fit.se
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * stats.norm.sf(np.abs(fit.beta / se))
    return MethodResult(method, fit.names, fit.beta, se, fit.beta - Z975 * se,
                        fit.beta + Z975 * se, p, np.full(len(fit.names), np.inf),
                        n_subjects, fit.vc.sigma_b2, fit.vc.sigma_e2, fit.loglik)


def _fit_completed(cd, bundle):
    return lmm.fit_ml(cd.data, bundle.model, bundle.fit_options)


def run_method(ds: LongitudinalDataset, method: str, bundle: AnalysisBundle,
               seed: int = 0) -> MethodResult:
    """Fit one strategy; data/model failures are captured in ``error``."""
    try:
        if method == "cc":
            cd = impute.complete_case(ds)
            return _from_fit(method, _fit_completed(cd, bundle), cd.data.n_subjects)
        if method == "locf":
            return _from_fit(method, _fit_completed(impute.locf(ds), bundle), ds.n_subjects)
        if method == "bocf":
            return _from_fit(method, _fit_completed(impute.bocf(ds), bundle), ds.n_subjects)
        if method == "ml":
            return _from_fit(method, lmm.fit_ml(ds, bundle.model, bundle.fit_options),
                             ds.n_subjects)
        if method == "mi":
            return _run_mi(ds, bundle, seed)
    except (LongImputeError, np.linalg.LinAlgError) as exc:
        return MethodResult(method, error=f"{type(exc).__name__}: {exc}")
    raise ValueError(f"unknown method {method!r}")


def _run_mi(ds, bundle, seed):
    completed = impute.multiple_impute(ds, bundle.mi_k, bundle.imputation, seed)
    base = lmm.prepare(completed[0].data, bundle.model)
    fits = []
    for cd in completed:
        # every cell is filled, so rows follow the same row-major order
        d = base.with_y(cd.data.y.ravel())
        fits.append(lmm.fit_ml(d, bundle.model, bundle.fit_options))
    pooled = impute.pool(fits)
    lo, hi = pooled.interval(0.95)
    return MethodResult("mi", pooled.names, pooled.point, pooled.se, lo, hi, pooled.p,
                        pooled.df, ds.n_subjects,
                        float(np.mean([f.vc.sigma_b2 for f in fits])),
                        float(np.mean([f.vc.sigma_e2 for f in fits])))


def analyze(ds: LongitudinalDataset, bundle: AnalysisBundle, seed: int = 0) -> dict:
    """Run every selected method; keys follow ``bundle.methods`` order."""
    return {m: run_method(ds, m, bundle, seed) for m in bundle.methods}
