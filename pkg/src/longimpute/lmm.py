"""Random-intercept linear mixed model fitted by maximum likelihood.

The model is ``y_ij = x_ij' beta + b_i + e_ij`` with ``b_i ~ N(0, sigma_b2)``
and ``e_ij ~ N(0, sigma_e2)``, evaluated on the observed rows only.  With a
compound-symmetric covariance every quantity reduces to per-subject sums, so
a likelihood evaluation costs O(N p) after a one-off O(rows p^2) setup.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .dataset import ARMS, LongitudinalDataset, SubjectRecord
from .errors import (
    DegenerateInferenceError,
    DegenerateVarianceError,
    DomainError,
    NonConvergenceError,
    SingularDesignError,
)

LOG2PI = np.log(2.0 * np.pi)
SIGMA_E2_FLOOR = 1e-10
SIGMA_B2_FLOOR = 1e-12

TERMS = ("intercept", "prednisolone", "month", "prednisolone:month", "art",
         "prednisolone:art", "age")


@dataclass(frozen=True)
class ModelSpec:
    fixed_terms: tuple = TERMS
    random_intercept: bool = True

    def __post_init__(self):
        terms = tuple(self.fixed_terms)
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown terms {unknown}; choose from {TERMS}")
        if "intercept" not in terms:
            raise ValueError("the intercept is always part of the model")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicated terms")
        for t in terms:
            if ":" in t:
                missing = [m for m in t.split(":") if m not in terms]
                if missing:
                    raise ValueError(f"interaction {t} requires main effect(s) {missing}")
        if not self.random_intercept:
            raise ValueError("only the random-intercept model is supported")
        object.__setattr__(self, "fixed_terms", terms)

    @property
    def p(self) -> int:
        return len(self.fixed_terms)


@dataclass(frozen=True)
class VarianceComponents:
    sigma_b2: float
    sigma_e2: float

    def __post_init__(self):
        if not self.sigma_b2 >= 0:
            raise DomainError(f"sigma_b2 must be >= 0, got {self.sigma_b2}")
        if not self.sigma_e2 > 0:
            raise DomainError(f"sigma_e2 must be > 0, got {self.sigma_e2}")


def _columns(terms, arm, month, art, age):
    cols = {
        "intercept": np.ones_like(month),
        "prednisolone": arm,
        "month": month,
        "prednisolone:month": arm * month,
        "art": art,
        "prednisolone:art": arm * art,
        "age": age,
    }
    return np.column_stack([cols[t] for t in terms])


def design_rows(subject: SubjectRecord, spec: ModelSpec, months: Sequence[float]):
    """Covariate rows and outcome vector for the subject's observed visits."""
    keep = [j for j, v in enumerate(subject.outcomes) if v is not None]
    m = np.asarray([months[j] for j in keep], dtype=float)
    a = np.full_like(m, float(subject.arm == ARMS[1]))
    art = np.asarray([subject.art[j] for j in keep], dtype=float)
    age = np.full_like(m, float(subject.age))
    X = _columns(spec.fixed_terms, a, m, art, age)
    y = np.asarray([subject.outcomes[j] for j in keep], dtype=float)
    return X, y


@dataclass
class LmmData:
    """Stacked observed rows plus the per-subject sums the likelihood needs."""

    names: tuple
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray  # subject index per row, rows grouped by subject
    n_i: np.ndarray
    XtX: np.ndarray = field(init=False)
    Sx: np.ndarray = field(init=False)

    def __post_init__(self):
        N = self.n_i.shape[0]
        self.XtX = self.X.T @ self.X
        self.Sx = np.zeros((N, self.X.shape[1]))
        np.add.at(self.Sx, self.group, self.X)
        self._set_y(self.y)

    def _set_y(self, y):
        self.y = np.asarray(y, dtype=float)
        self.Xty = self.X.T @ self.y
        self.yty = float(self.y @ self.y)
        self.Sy = np.bincount(self.group, weights=self.y, minlength=self.n_i.shape[0])

    def with_y(self, y) -> "LmmData":
        """Same design, new outcome vector (rows in the same order)."""
        new = object.__new__(LmmData)
        new.__dict__.update(self.__dict__)
        new._set_y(y)
        return new

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.n_i.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def prepare(ds: LongitudinalDataset, spec: ModelSpec | None = None) -> LmmData:
    spec = spec or ModelSpec()
    obs = ds.observed
    rows, cols = np.nonzero(obs)
    months = ds.schedule.as_array()[cols]
    arm = ds.arm[rows].astype(float)
    art = ds.art_filled()[rows, cols]
    X = _columns(spec.fixed_terms, arm, months, art, ds.age[rows])
    n_i = obs.sum(axis=1)
    return LmmData(spec.fixed_terms, X, ds.y[rows, cols], rows.astype(np.intp), n_i)


def _as_data(ds, spec):
    return ds if isinstance(ds, LmmData) else prepare(ds, spec)


# ---------------------------------------------------------------------------
# likelihood pieces


def _loglik(d: LmmData, beta, s, a):
    S = d.Sy - d.Sx @ beta
    Q = d.yty - 2.0 * beta @ d.Xty + beta @ d.XtX @ beta
    n = d.n_i
    lam = a + n * s
    B = S * S / n
    W = Q - B.sum()
    return -0.5 * (d.n_obs * LOG2PI + (d.n_obs - d.n_subjects) * np.log(a)
                   + np.log(lam).sum() + W / a + (B / lam).sum())


def _gls(d: LmmData, s, a):
    w = s / (a + d.n_i * s)
    A = (d.XtX - d.Sx.T @ (w[:, None] * d.Sx)) / a
    b = (d.Xty - d.Sx.T @ (w * d.Sy)) / a
    return A, b


def _solve(A, b):
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.linalg.solve(A, b)
    z = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, z)


def _check_vc(vc):
    if not vc.sigma_e2 > 0:
        raise DomainError("sigma_e2 must be positive")


def marginal_loglik(ds, spec: ModelSpec | None, beta, vc: VarianceComponents) -> float:
    """Observed-data log-likelihood of the random-intercept model."""
    _check_vc(vc)
    d = _as_data(ds, spec)
    return float(_loglik(d, np.asarray(beta, dtype=float), vc.sigma_b2, vc.sigma_e2))


def loglik_gradient(ds, spec: ModelSpec | None, beta, vc: VarianceComponents) -> np.ndarray:
    """Gradient w.r.t. ``(beta, log sigma_b2, log sigma_e2)``."""
    _check_vc(vc)
    d = _as_data(ds, spec)
    beta = np.asarray(beta, dtype=float)
    s, a = vc.sigma_b2, vc.sigma_e2
    lam = a + d.n_i * s
    S = d.Sy - d.Sx @ beta
    Xtr = d.Xty - d.XtX @ beta
    g_beta = (Xtr - d.Sx.T @ (s / lam * S)) / a
    return np.concatenate([g_beta, _vc_score(d, beta, s, a)])


def _profile(d: LmmData, s, a, reml=False):
    A, b = _gls(d, s, a)
    beta = _solve(A, b)
    ll = _loglik(d, beta, s, a)
    if reml:
        sign, logdet = np.linalg.slogdet(A)
        ll += 0.5 * d.p * LOG2PI - 0.5 * logdet
    return ll, beta, A


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    algorithm: str = "direct"  # direct | em | em-then-direct
    max_iter: int = 2000
    em_steps: int = 50  # EM warm-up length for em-then-direct
    tol_loglik: float = 1e-8
    tol_param: float = 1e-6
    reml: bool = False
    polish: bool = True

    def __post_init__(self):
        if self.algorithm not in ("direct", "em", "em-then-direct"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass
class LmmFit:
    names: tuple
    beta: np.ndarray
    beta_cov: np.ndarray
    vc: VarianceComponents
    loglik: float
    n_subjects: int
    n_obs: int
    converged: bool
    iterations: int
    boundary: bool
    algorithm: str = "direct"
    reml: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.beta_cov), 0.0, None))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def to_dict(self) -> dict:
        table = wald_table(self, strict=False)
        return {
            "beta": {r.coef: r.estimate for r in table},
            "se": {r.coef: r.se for r in table},
            "p": {r.coef: r.p for r in table},
            "sigma_b2": self.vc.sigma_b2,
            "sigma_e2": self.vc.sigma_e2,
            "loglik": self.loglik,
            "converged": self.converged,
            "boundary": self.boundary,
        }


def check_rank(X: np.ndarray, names: Sequence[str], visit=None, what="design"):
    """Raise :class:`SingularDesignError` naming columns that add no rank."""
    if X.shape[0] == 0:
        raise SingularDesignError(f"{what} has no rows", list(names), visit)
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    tol = max(X.shape) * np.finfo(float).eps * 10
    full = np.linalg.matrix_rank(Xs, tol=tol * np.linalg.norm(Xs, 2))
    if full == X.shape[1]:
        return
    bad = []
    rank = 0
    for k in range(X.shape[1]):
        r = np.linalg.matrix_rank(Xs[:, : k + 1], tol=tol * np.linalg.norm(Xs, 2))
        if r == rank:
            bad.append(names[k])
        rank = r
    where = "" if visit is None else f" at visit {visit}"
    raise SingularDesignError(f"{what} is rank deficient{where}; collinear column(s): "
                              f"{', '.join(bad)}", bad, visit)


def _start_values(d: LmmData):
    beta, *_ = np.linalg.lstsq(d.X, d.y, rcond=None)
    rss = float(((d.y - d.X @ beta) ** 2).sum())
    half = max(rss / max(d.n_obs - d.p, 1), 1e-8 * (1.0 + float(np.var(d.y)))) / 2.0
    return beta, half, half


def em_step(ds, spec: ModelSpec | None, beta, vc: VarianceComponents):
    """One ECM update: GLS for beta, then an EM update of the variances.

    Returns ``(beta, vc)``.  Each half-step is a conditional maximisation, so
    the observed-data log-likelihood never decreases.
    """
    _check_vc(vc)
    d = _as_data(ds, spec)
    s, a = vc.sigma_b2, vc.sigma_e2
    A, b = _gls(d, s, a)
    beta = _solve(A, b)
    lam = a + d.n_i * s
    S = d.Sy - d.Sx @ beta
    bhat = s / lam * S
    bvar = s * a / lam
    Q = d.yty - 2.0 * beta @ d.Xty + beta @ d.XtX @ beta
    # E||r_i - 1 b_i||^2 = Q_i - 2 bhat_i S_i + n_i (bhat_i^2 + bvar_i)
    resid = Q - 2.0 * (bhat * S).sum() + (d.n_i * (bhat ** 2 + bvar)).sum()
    s_new = float(np.mean(bhat ** 2 + bvar))
    a_new = float(max(resid / d.n_obs, SIGMA_E2_FLOOR))
    return beta, VarianceComponents(max(s_new, 0.0), a_new)


def _run_em(d, beta, s, a, max_steps, tol_ll, tol_par):
    ll = _loglik(d, beta, s, a)
    steps = 0
    converged = False
    for steps in range(1, max_steps + 1):
        beta_new, vc = em_step(d, None, beta, VarianceComponents(s, a))
        ll_new = _loglik(d, beta_new, vc.sigma_b2, vc.sigma_e2)
        step = max(np.max(np.abs(beta_new - beta)), abs(vc.sigma_b2 - s), abs(vc.sigma_e2 - a))
        beta, s, a = beta_new, vc.sigma_b2, vc.sigma_e2
        if abs(ll_new - ll) < tol_ll and step < tol_par:
            ll = ll_new
            converged = True
            break
        ll = ll_new
    return beta, s, a, ll, steps, converged


def _vc_score(d, beta, s, a):
    n = d.n_i
    lam = a + n * s
    S = d.Sy - d.Sx @ beta
    Q = d.yty - 2.0 * beta @ d.Xty + beta @ d.XtX @ beta
    B = S * S / n
    W = Q - B.sum()
    d_a = -0.5 * ((d.n_obs - d.n_subjects) / a + (1.0 / lam).sum() - W / a ** 2
                  - (B / lam ** 2).sum())
    d_s = -0.5 * (n / lam - n * B / lam ** 2).sum()
    return np.array([s * d_s, a * d_a])


def _newton_polish(d, theta, reml, steps=10):
    """Newton refinement of the log variance parameters.

    For ML the profiled score is exact (beta is at its GLS optimum, so only
    the variance partials survive); REML falls back to differencing.
    """

    def value(t):
        return _profile(d, np.exp(t[0]), np.exp(t[1]), reml)[0]

    def score(t):
        s, a = np.exp(t)
        if not reml:
            _, beta, _ = _profile(d, s, a)
            return _vc_score(d, beta, s, a)
        h = 1e-5
        return np.array([(value(t + h * e) - value(t - h * e)) / (2 * h) for e in np.eye(2)])

    best = np.array(theta, dtype=float)
    fbest = value(best)
    h = 1e-5
    for _ in range(steps):
        g = score(best)
        H = np.column_stack([(score(best + h * e) - score(best - h * e)) / (2 * h)
                             for e in np.eye(2)])
        H = 0.5 * (H + H.T)
        try:
            if np.any(np.linalg.eigvalsh(H) >= 0):
                break
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        cand = best - step
        fc = value(cand)
        if not fc >= fbest - 1e-12 * abs(fbest):
            break
        best, fbest = cand, fc
        if np.max(np.abs(step)) < 1e-12:
            break
    return best


def fit_ml(ds, spec: ModelSpec | None = None, options: FitOptions | None = None) -> LmmFit:
    """Maximum likelihood fit on the observed rows.

    ``ds`` is a :class:`LongitudinalDataset` or a prepared :class:`LmmData`.
    Variance components are searched by Nelder-Mead on the log scale with
    beta profiled out by GLS.
    """
    spec = spec or ModelSpec()
    options = options or FitOptions()
    d = _as_data(ds, spec)
    if d.n_subjects < 2:
        raise SingularDesignError("need at least two subjects", [])
    check_rank(d.X, d.names)

    beta0, s0, a0 = _start_values(d)
    rss0 = float(((d.y - d.X @ beta0) ** 2).sum())
    if rss0 <= SIGMA_E2_FLOOR * d.n_obs * (1.0 + float(np.mean(d.y ** 2))):
        raise DegenerateVarianceError("outcomes are fitted exactly; residual variance is at "
                                      "its floor", beta=beta0)

    iterations = 0
    converged = False
    if options.algorithm in ("em", "em-then-direct"):
        n_em = options.max_iter if options.algorithm == "em" else options.em_steps
        beta0, s0, a0, ll_em, it, em_conv = _run_em(
            d, beta0, max(s0, 1e-8), a0, n_em, options.tol_loglik, options.tol_param)
        iterations += it
        if options.algorithm == "em":
            converged = em_conv
            beta, s, a, ll = beta0, s0, a0, ll_em
            if not converged:
                raise NonConvergenceError(f"EM did not converge in {options.max_iter} steps",
                                          best=_package(d, beta, s, a, ll, False, iterations,
                                                        options))
            return _package(d, beta, s, a, ll, True, iterations, options)

    lo_b, lo_e = np.log(SIGMA_B2_FLOOR), np.log(SIGMA_E2_FLOOR)

    def objective(t):
        s = np.exp(max(t[0], lo_b))
        a = np.exp(max(t[1], lo_e))
        return -_profile(d, s, a, options.reml)[0]

    x0 = np.log([max(s0, 1e-8), a0])
    res = optimize.minimize(objective, x0, method="Nelder-Mead",
                            options={"xatol": options.tol_param, "fatol": options.tol_loglik,
                                     "maxiter": options.max_iter,
                                     "maxfev": 4 * options.max_iter,
                                     "initial_simplex": np.array([x0, x0 + [0.5, 0.0],
                                                                  x0 + [0.0, 0.5]])})
    iterations += int(res.nit)
    theta = np.maximum(res.x, [lo_b, lo_e])
    if options.polish and theta[0] > lo_b + 2.0:
        theta = _newton_polish(d, theta, options.reml)
    s, a = float(np.exp(theta[0])), float(np.exp(theta[1]))
    if s <= SIGMA_B2_FLOOR * (1 + 1e-6):
        s = SIGMA_B2_FLOOR
    ll, beta, _ = _profile(d, s, a, options.reml)
    if a <= SIGMA_E2_FLOOR * 10:
        raise DegenerateVarianceError("residual variance collapsed to its floor", beta=beta)
    converged = bool(res.success)
    fit = _package(d, beta, s, a, ll, converged, iterations, options)
    if not converged:
        raise NonConvergenceError(f"Nelder-Mead stopped: {res.message}", best=fit)
    return fit


def _package(d, beta, s, a, ll, converged, iterations, options):
    A, _ = _gls(d, s, a)
    cov = np.linalg.inv(A)
    cov = 0.5 * (cov + cov.T)
    return LmmFit(
        names=tuple(d.names), beta=np.asarray(beta, dtype=float), beta_cov=cov,
        vc=VarianceComponents(float(s), float(a)), loglik=float(ll),
        n_subjects=d.n_subjects, n_obs=d.n_obs, converged=converged,
        iterations=iterations, boundary=bool(s < 1e-8 * a),
        algorithm=options.algorithm, reml=options.reml,
    )


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class WaldRow:
    coef: str
    estimate: float
    se: float
    z: float
    p: float


def format_p(p: float) -> str:
    if p is None or np.isnan(p):
        return "NA"
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


def wald_table(fit: LmmFit, strict: bool = True) -> list:
    """Estimate, standard error, z and two-sided normal p per coefficient.

    A zero standard error raises :class:`DegenerateInferenceError` unless
    ``strict`` is False, in which case z and p are NaN.
    """
    rows = []
    for name, est, se in zip(fit.names, fit.beta, fit.se):
        if not se > 0:
            if strict:
                raise DegenerateInferenceError(f"standard error of {name} is zero", coef=name)
            rows.append(WaldRow(name, float(est), float(se), np.nan, np.nan))
            continue
        z = est / se
        rows.append(WaldRow(name, float(est), float(se), float(z), float(2 * stats.norm.sf(abs(z)))))
    return rows
