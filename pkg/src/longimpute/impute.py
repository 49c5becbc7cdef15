"""Completed datasets (CC, LOCF, BOCF, multiple imputation) and Rubin pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import _rng
from .dataset import MONOTONE, LongitudinalDataset, is_monotone
from .errors import (
    EmptyAnalysisSetError,
    IntermittentMissingnessError,
    PoolingError,
    SampleSizeError,
    ShapeError,
    SingularDesignError,
)
from .lmm import check_rank

STRATEGIES = ("CC", "LOCF", "BOCF", "MI")
DF_CAP = 1e9


@dataclass(frozen=True)
class CompletedDataset:
    data: LongitudinalDataset
    strategy: str
    imputation_index: int | None = None
    seed_trace: str | None = None


def _require_monotone(ds, what):
    if is_monotone(ds) != MONOTONE:
        raise IntermittentMissingnessError(f"{what} needs monotone missingness")


def _filled(ds, y):
    # filled cells need a treatment status; carry it forward as the model design does
    return ds.replace(y=y, art=np.where(np.isnan(ds.art), ds.art_filled(), ds.art))


def complete_case(ds: LongitudinalDataset) -> CompletedDataset:
    """Keep only the subjects observed at every visit."""
    keep = ds.is_completer
    if not keep.any():
        raise EmptyAnalysisSetError("no completers: complete-case analysis set is empty")
    return CompletedDataset(ds.subset(keep), "CC")


def locf(ds: LongitudinalDataset) -> CompletedDataset:
    """Carry each subject's last observed outcome forward."""
    _require_monotone(ds, "LOCF")
    y = np.array(ds.y, copy=True)
    for j in range(1, ds.n_visits):
        gap = np.isnan(y[:, j])
        y[gap, j] = y[gap, j - 1]
    return CompletedDataset(_filled(ds, y), "LOCF")


def bocf(ds: LongitudinalDataset) -> CompletedDataset:
    """Fill every missing outcome with the subject's baseline value."""
    _require_monotone(ds, "BOCF")
    y = np.where(np.isnan(ds.y), ds.y[:, :1], ds.y)
    return CompletedDataset(_filled(ds, y), "BOCF")


# ---------------------------------------------------------------------------
# multiple imputation


@dataclass(frozen=True)
class ImputationModelSpec:
    """Predictors of the per-visit imputation regressions.

    Each visit's outcome is regressed on earlier outcomes plus baseline and
    same-visit covariates; nothing from later visits enters.
    """

    prior_outcomes: bool = True
    arm: bool = True
    art: bool = True
    age: bool = True
    arm_by_art: bool = True
    prior_art: bool = True

    def columns(self, j: int) -> list:
        names = ["intercept"]
        if self.prior_outcomes:
            names += [f"y{k}" for k in range(j)]
        if self.arm:
            names.append("arm")
        if self.age:
            names.append("age")
        if self.art:
            names.append(f"art{j}")
            if self.arm_by_art and self.arm:
                names.append(f"arm:art{j}")
        if self.prior_art:
            names += [f"art{k}" for k in range(j)]
        return names


def _visit_design(spec, j, y, arm, age, art):
    cols = [np.ones(y.shape[0])]
    if spec.prior_outcomes:
        cols += [y[:, k] for k in range(j)]
    if spec.arm:
        cols.append(arm)
    if spec.age:
        cols.append(age)
    if spec.art:
        cols.append(art[:, j])
        if spec.arm_by_art and spec.arm:
            cols.append(arm * art[:, j])
    if spec.prior_art:
        cols += [art[:, k] for k in range(j)]
    return np.column_stack(cols)


@dataclass(frozen=True)
class _VisitModel:
    visit: int
    missing: np.ndarray  # row indices to impute
    Z_obs: np.ndarray
    y_obs: np.ndarray
    names: tuple


def _optional(name, j):
    # treatment-history terms beyond the current visit's ART may be redundant
    return name.startswith("arm:art") or (name.startswith("art") and name != f"art{j}")


def _usable_columns(Z, names, j, max_cols):
    """Indices of the columns used at visit ``j``.

    Core columns must have full rank (else :class:`SingularDesignError`).
    Optional treatment-history columns are added only when they raise the
    rank and at most ``max_cols`` columns are used; under monotone uptake
    earlier ART columns often coincide on the observed rows.
    """
    core = [i for i, n in enumerate(names) if not _optional(n, j)]
    check_rank(Z[:, core], [names[i] for i in core], visit=j, what="imputation design")
    chosen = list(core)
    scale = np.abs(Z).max(axis=0)
    Zs = Z / np.where(scale > 0, scale, 1.0)
    tol = max(Z.shape) * np.finfo(float).eps * 10 * np.linalg.norm(Zs, 2)
    rank = len(core)
    for i, n in enumerate(names):
        # leave at least two residual degrees of freedom for the variance draw
        if _optional(n, j) and rank < max_cols:
            r = np.linalg.matrix_rank(Zs[:, chosen + [i]], tol=tol)
            if r > rank:
                chosen.append(i)
                rank = r
    return np.array(sorted(chosen))


def _posterior_draw(Z, yv, rng):
    """Coefficients and residual variance from the noninformative posterior.

    Prior: flat on coefficients, p(sigma^2) proportional to 1/sigma^2, so
    sigma^2 | y ~ RSS / chi2_{n-p} and beta | sigma^2, y ~ N(beta_hat,
    sigma^2 (Z'Z)^-1).
    """
    n, p = Z.shape
    q, r = np.linalg.qr(Z)
    beta_hat = np.linalg.solve(r, q.T @ yv)
    resid = yv - Z @ beta_hat
    rss = float(resid @ resid)
    sigma2 = rss / rng.chisquare(n - p)
    beta = beta_hat + np.sqrt(sigma2) * np.linalg.solve(r, rng.standard_normal(p))
    return beta, sigma2


def multiple_impute(ds: LongitudinalDataset, K: int = 25, spec: ImputationModelSpec | None = None,
                    seed: int = 0) -> list:
    """K completed datasets by sequential Bayesian linear regression.

    Visits are processed in order.  At visit ``j`` the regression is fitted on
    the subjects observed at ``j``; a posterior draw of (coefficients,
    variance) then generates the missing values, which feed forward as
    predictors for later visits.  Imputation ``k`` uses the stream
    ``(seed, k)`` and is therefore independent of the others.
    """
    if int(K) < 1:
        raise ValueError("K must be a positive integer")
    spec = spec or ImputationModelSpec()
    _require_monotone(ds, "sequential multiple imputation")
    art = ds.art_filled()
    arm = ds.arm.astype(float)
    obs = ds.observed
    # column choice depends only on observed rows, so it is fixed before any draw
    keep = {}
    for j in range(1, ds.n_visits):
        if obs[:, j].all():
            continue
        rows = obs[:, j]
        names = spec.columns(j)
        n_core = sum(not _optional(n, j) for n in names)
        if rows.sum() <= n_core + 1:
            raise SampleSizeError(f"visit {j}: {int(rows.sum())} observed subjects for "
                                  f"{n_core} predictors")
        Z = _visit_design(spec, j, ds.y[rows], arm[rows], ds.age[rows], art[rows])
        keep[j] = _usable_columns(Z, names, j, int(rows.sum()) - 2)

    out = []
    for k in range(1, int(K) + 1):
        rng = _rng.stream(seed, k)
        y = np.array(ds.y, copy=True)
        for j in range(1, ds.n_visits):
            miss = np.isnan(y[:, j])
            if not miss.any():
                continue
            rows = obs[:, j]
            cols = keep[j]
            Z = _visit_design(spec, j, y[rows], arm[rows], ds.age[rows], art[rows])[:, cols]
            beta, sigma2 = _posterior_draw(Z, y[rows, j], rng)
            Zm = _visit_design(spec, j, y[miss], arm[miss], ds.age[miss], art[miss])[:, cols]
            y[miss, j] = Zm @ beta + np.sqrt(sigma2) * rng.standard_normal(miss.sum())
        out.append(CompletedDataset(_filled(ds, y), "MI", k, _rng.trace(seed, k)))
    return out


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PooledEstimate:
    names: tuple
    point: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    df: np.ndarray
    K: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total)

    @property
    def p(self) -> np.ndarray:
        t = np.abs(self.point) / self.se
        return 2.0 * stats.t.sf(t, np.minimum(self.df, DF_CAP))

    def interval(self, level: float = 0.95):
        q = stats.t.ppf(0.5 + level / 2.0, np.minimum(self.df, DF_CAP))
        return self.point - q * self.se, self.point + q * self.se

    def to_records(self) -> list:
        p = self.p
        return [
            {"coef": name, "estimate": float(self.point[i]), "within": float(self.within[i]),
             "between": float(self.between[i]), "total": float(self.total[i]),
             "df": float(min(self.df[i], DF_CAP)), "p": float(p[i])}
            for i, name in enumerate(self.names)
        ]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=2)


def _coerce(fit):
    if hasattr(fit, "beta") and hasattr(fit, "beta_cov"):
        return tuple(fit.names), np.asarray(fit.beta, float), np.diag(fit.beta_cov).astype(float)
    names, est, var = fit
    return tuple(names), np.asarray(est, float).reshape(-1), np.asarray(var, float).reshape(-1)


def pool(fits: Sequence) -> PooledEstimate:
    """Combine K per-imputation fits with Rubin's rules.

    ``fits`` holds :class:`~longimpute.lmm.LmmFit` objects or
    ``(names, estimates, variances)`` triples.
    """
    items = [_coerce(f) for f in fits]
    K = len(items)
    if K < 2:
        raise PoolingError(f"pooling needs at least two imputations, got {K}")
    names = items[0][0]
    for nm, est, var in items:
        if nm != names or est.shape != (len(names),) or var.shape != (len(names),):
            raise ShapeError("imputation fits disagree in coefficients")
    Q = np.array([est for _, est, _ in items])
    U = np.array([var for _, _, var in items])
    qbar = Q.mean(axis=0)
    wbar = U.mean(axis=0)
    b = Q.var(axis=0, ddof=1)
    inflated = (1.0 + 1.0 / K) * b
    total = wbar + inflated
    with np.errstate(divide="ignore", invalid="ignore"):
        df = (K - 1) * (1.0 + wbar / inflated) ** 2
    df = np.where(inflated > 0, df, np.inf)
    return PooledEstimate(names, qbar, wbar, b, total, df, K)
