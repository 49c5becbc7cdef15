"""Dropout-mechanism diagnostics.

* a discrete-time withdrawal hazard with a subject random intercept, fitted by
  adaptive Gauss-Hermite quadrature;
* Little's MCAR test on the visit-outcome vector;
* Pearson chi-squared comparing dropout-pattern distributions between arms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .dataset import ARMS, MONOTONE, LongitudinalDataset, is_monotone
from .errors import (
    DegenerateOutcomeError,
    IntermittentMissingnessError,
    SeparationError,
    SingularCovarianceError,
    SingularDesignError,
)
from .lmm import check_rank

COVARIATES = ("month", "art", "delta_cd4", "prednisolone")
SIGMA_MAX = 10.0  # random-intercept SD on the logit scale


# ---------------------------------------------------------------------------
# person-period layout


@dataclass(frozen=True)
class PersonPeriod:
    """One row per subject and visit at risk of withdrawal.

    ``event`` is 1 when the outcome at ``visit`` is missing, i.e. the subject
    withdrew before it.  Covariates: month of the visit, ART at the previous
    visit, the change in outcome between the two visits before it (0 when
    only baseline precedes), and arm.
    """

    subject: np.ndarray
    visit: np.ndarray
    month: np.ndarray
    art: np.ndarray
    delta_cd4: np.ndarray
    prednisolone: np.ndarray
    event: np.ndarray

    def __len__(self):
        return self.event.shape[0]

    def matrix(self, covariates=COVARIATES) -> np.ndarray:
        cols = [np.ones(len(self))] + [getattr(self, c).astype(float) for c in covariates]
        return np.column_stack(cols)


def dropout_design(ds: LongitudinalDataset, start_visit: int = 1) -> PersonPeriod:
    """Expand a monotone dataset into person-period withdrawal records.

    ``start_visit`` is the 0-based index of the first visit at risk; records
    for a subject stop after the withdrawal event.
    """
    if is_monotone(ds) != MONOTONE:
        raise IntermittentMissingnessError("the withdrawal model needs monotone data")
    if start_visit < 1:
        raise ValueError("baseline cannot be a withdrawal visit")
    obs = ds.observed
    months = ds.schedule.as_array()
    art = ds.art_filled()
    cols = {k: [] for k in ("subject", "visit", "month", "art", "delta_cd4", "event")}
    for j in range(start_visit, ds.n_visits):
        at_risk = np.flatnonzero(obs[:, j - 1])
        if at_risk.size == 0:
            continue
        if j >= 2:
            delta = ds.y[at_risk, j - 1] - ds.y[at_risk, j - 2]
        else:
            delta = np.zeros(at_risk.size)
        cols["subject"].append(at_risk)
        cols["visit"].append(np.full(at_risk.size, j))
        cols["month"].append(np.full(at_risk.size, months[j]))
        cols["art"].append(art[at_risk, j - 1])
        cols["delta_cd4"].append(delta)
        cols["event"].append((~obs[at_risk, j]).astype(np.int8))
    if not cols["subject"]:
        empty = np.zeros(0)
        return PersonPeriod(empty.astype(int), empty.astype(int), empty, empty, empty,
                            empty, empty.astype(np.int8))
    arrays = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.lexsort((arrays["visit"], arrays["subject"]))
    arrays = {k: v[order] for k, v in arrays.items()}
    return PersonPeriod(prednisolone=ds.arm[arrays["subject"]].astype(float), **arrays)


# ---------------------------------------------------------------------------
# mixed-effects logistic withdrawal model


@dataclass(frozen=True)
class DropoutModelSpec:
    covariates: tuple = COVARIATES
    random_intercept: bool = True
    quadrature_nodes: int = 15

    def __post_init__(self):
        bad = [c for c in self.covariates if c not in COVARIATES]
        if bad:
            raise ValueError(f"unknown covariate(s) {bad}; choose from {COVARIATES}")
        q = self.quadrature_nodes
        if q < 5 or q % 2 == 0:
            raise ValueError("quadrature_nodes must be odd and >= 5")


@dataclass(frozen=True)
class OddsRatio:
    variable: str
    coef: float
    coef_se: float
    odds_ratio: float
    se: float  # delta-method SE of the odds ratio
    ci_low: float
    ci_high: float
    p: float


@dataclass
class DropoutFit:
    odds_ratios: list
    intercept: float
    intercept_se: float
    sigma_u: float
    loglik: float
    converged: bool
    n_records: int
    n_subjects: int
    coef_cov: np.ndarray = field(repr=False, default=None)

    def get(self, variable: str) -> OddsRatio:
        for o in self.odds_ratios:
            if o.variable == variable:
                return o
        raise KeyError(variable)

    def records(self) -> list:
        return [{"variable": o.variable, "odds_ratio": o.odds_ratio, "se": o.se,
                 "ci_low": o.ci_low, "ci_high": o.ci_high, "p": o.p} for o in self.odds_ratios]


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class _AGHQ:
    """Adaptive Gauss-Hermite marginal log-likelihood of a random-intercept logit.

    The random effect is written ``sigma * u`` with ``u ~ N(0, 1)``; the
    likelihood is even and smooth in ``sigma``, including at 0.
    """

    def __init__(self, X, y, group, n_groups, nodes):
        self.X, self.y, self.group, self.G = X, y.astype(float), group, n_groups
        self.sign = 2.0 * self.y - 1.0
        x, w = special.roots_hermite(nodes)
        self.x, self.logw = x, np.log(w) + x ** 2
        self.u = np.zeros(n_groups)
        order = np.argsort(group, kind="stable")
        if np.any(order != np.arange(group.size)):
            raise ValueError("records must be grouped by subject")
        self.starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])

    def _h(self, eta, u, sigma):
        # sum over a subject's records of log p(y | u) evaluated per node column
        z = eta[:, None] + sigma * u[self.group]
        ll = _log_sigmoid(self.sign[:, None] * z)
        return np.add.reduceat(ll, self.starts, axis=0) - 0.5 * u ** 2

    def _modes(self, eta, sigma):
        u = self.u.copy()
        for _ in range(100):
            p = special.expit(eta + sigma * u[self.group])
            g = sigma * np.bincount(self.group, self.y - p, self.G) - u
            H = -sigma ** 2 * np.bincount(self.group, p * (1 - p), self.G) - 1.0
            step = g / H
            u -= step
            if np.max(np.abs(step)) < 1e-12:
                break
        p = special.expit(eta + sigma * u[self.group])
        H = sigma ** 2 * np.bincount(self.group, p * (1 - p), self.G) + 1.0
        return u, 1.0 / np.sqrt(H)

    def loglik(self, beta, sigma):
        eta = self.X @ beta
        if sigma == 0.0:
            return float(np.sum(_log_sigmoid(self.sign * eta)))
        u_hat, s_hat = self._modes(eta, sigma)
        self.u = u_hat
        nodes = u_hat[:, None] + np.sqrt(2.0) * s_hat[:, None] * self.x[None, :]
        h = self._h(eta, nodes, sigma)
        li = np.log(np.sqrt(2.0) * s_hat) - 0.5 * np.log(2 * np.pi) + special.logsumexp(
            h + self.logw[None, :], axis=1)
        return float(li.sum())


def _irls(X, y, max_iter=100):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        p = special.expit(eta)
        w = p * (1 - p)
        if np.max(np.abs(eta)) > 30 or w.min() < 1e-12:
            raise SeparationError("complete or quasi-complete separation in the withdrawal data")
        step = np.linalg.solve((X * w[:, None]).T @ X, X.T @ (y - p))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            return beta
    raise SeparationError("logistic start values diverged; the data look separated")


def _hessian(f, x, h=1e-4):
    k = x.size
    H = np.empty((k, k))
    E = np.eye(k) * h
    for i in range(k):
        for j in range(i, k):
            H[i, j] = H[j, i] = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j])
                                 + f(x - E[i] - E[j])) / (4 * h * h)
    return H


def fit_dropout_logistic(records: PersonPeriod, spec: DropoutModelSpec | None = None) -> DropoutFit:
    """Maximum likelihood fit of the withdrawal hazard; odds ratios with 95% CIs."""
    spec = spec or DropoutModelSpec()
    y = records.event.astype(float)
    if y.size == 0 or y.sum() == 0 or y.sum() == y.size:
        raise DegenerateOutcomeError("withdrawal outcome has no events or no non-events")
    names = ("intercept",) + tuple(spec.covariates)
    X = records.matrix(spec.covariates)
    check_rank(X, names, what="withdrawal design")
    beta0 = _irls(X, y)
    _, group = np.unique(records.subject, return_inverse=True)
    G = int(group.max()) + 1
    model = _AGHQ(X, y, group, G, spec.quadrature_nodes)
    k = X.shape[1]

    if spec.random_intercept:
        def nll(theta):
            return -model.loglik(theta[:k], theta[k])

        # few events per subject leave the SD weakly identified; bounding it keeps the
        # fixed effects from running off along a flat ridge
        bounds = [(None, None)] * k + [(-SIGMA_MAX, SIGMA_MAX)]
        best = None
        for s0 in (0.5, 1.5):
            model.u = np.zeros(G)
            res = optimize.minimize(nll, np.append(beta0, s0), method="L-BFGS-B", bounds=bounds,
                                    options={"ftol": 1e-14, "gtol": 1e-7, "maxiter": 1000})
            if best is None or res.fun < best.fun:
                best = res
        theta = best.x
        theta[k] = abs(theta[k])
        converged = bool(best.success)
        at_bound = theta[k] > SIGMA_MAX - 1e-6
        H = _hessian(nll, theta)
        if at_bound:
            H = H[:k, :k]
        ll = -nll(theta)
    else:
        def nll(beta):
            return -model.loglik(beta, 0.0)

        theta = beta0
        converged = True
        H = _hessian(nll, theta)
        ll = -nll(theta)

    cov = _invert_information(H, k)
    se = np.sqrt(np.diag(cov)[:k])
    z975 = stats.norm.ppf(0.975)
    ors = []
    for i, name in enumerate(names[1:], start=1):
        b, s = theta[i], se[i]
        ors.append(OddsRatio(name, float(b), float(s), float(np.exp(b)), float(np.exp(b) * s),
                             float(np.exp(b - z975 * s)), float(np.exp(b + z975 * s)),
                             float(2 * stats.norm.sf(abs(b / s)))))
    return DropoutFit(ors, float(theta[0]), float(se[0]),
                      float(theta[k]) if spec.random_intercept else 0.0, float(ll), converged,
                      len(records), G, cov[:k, :k])


def _invert_information(H, k):
    """Covariance of the fixed effects from the observed information.

    At a boundary estimate of the random-intercept SD the curvature in that
    direction can vanish; the fixed-effect block is used alone then.
    """
    H = 0.5 * (H + H.T)
    if H.shape[0] > k:
        evals = np.linalg.eigvalsh(H)
        if evals.min() > 1e-8 * evals.max():
            return np.linalg.inv(H)
        H = H[:k, :k]
    try:
        return np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise SingularDesignError("information matrix is singular", []) from None


# ---------------------------------------------------------------------------
# Little's MCAR test


@dataclass(frozen=True)
class McarTestResult:
    statistic: float
    df: int
    p: float
    n_patterns: int
    mean: np.ndarray = field(repr=False, default=None)
    cov: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p": self.p,
                "n_patterns": self.n_patterns}


def em_mvn(Y: np.ndarray, tol: float = 1e-8, max_iter: int = 500):
    """ML mean and covariance of incomplete multivariate-normal rows.

    Returns ``(mu, sigma, iterations)``.  Convergence is judged on changes
    scaled by the current standard deviations, so the iteration path is
    equivariant under affine rescaling of the data.
    """
    Y = np.asarray(Y, dtype=float)
    # work on standardised columns so large offsets do not cancel in the moments
    loc = np.nanmean(Y, axis=0)
    scale = np.nanstd(Y, axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Y = (Y - loc) / scale
    N, k = Y.shape
    miss = np.isnan(Y)
    mu = np.zeros(k)
    sigma = np.diag(np.nanvar(Y, axis=0))
    keys, inv = np.unique(miss, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    groups = [(keys[g], np.flatnonzero(inv == g)) for g in range(len(keys))]
    it = 0
    for it in range(1, max_iter + 1):
        T1 = np.zeros(k)
        T2 = np.zeros((k, k))
        for mpat, rows in groups:
            o = ~mpat
            Yo = Y[np.ix_(rows, o)]
            Yhat = np.empty((rows.size, k))
            Yhat[:, o] = Yo
            C = np.zeros((k, k))
            if mpat.any():
                if not o.any():
                    Yhat[:] = mu
                    C = sigma.copy()
                else:
                    Soo = sigma[np.ix_(o, o)]
                    Smo = sigma[np.ix_(mpat, o)]
                    A = np.linalg.solve(Soo, Smo.T).T
                    Yhat[:, mpat] = mu[mpat] + (Yo - mu[o]) @ A.T
                    C[np.ix_(mpat, mpat)] = sigma[np.ix_(mpat, mpat)] - A @ Smo.T
            T1 += Yhat.sum(axis=0)
            T2 += Yhat.T @ Yhat + rows.size * C
        mu_new = T1 / N
        sigma_new = T2 / N - np.outer(mu_new, mu_new)
        sd = np.sqrt(np.clip(np.diag(sigma_new), 1e-300, None))
        change = max(np.max(np.abs(mu_new - mu) / sd),
                     np.max(np.abs(sigma_new - sigma) / np.outer(sd, sd)))
        mu, sigma = mu_new, sigma_new
        if change < tol:
            break
    return loc + scale * mu, sigma * np.outer(scale, scale), it


def _merge_small_patterns(obs_sets, counts):
    """Map each pattern with fewer than two subjects onto a retained pattern.

    The target is the retained pattern observing the most variables among
    those whose observed set is contained in the small pattern's set; the
    subject then contributes only those variables.  Returns a dict
    small -> target (or None when nothing qualifies).
    """
    keep = [p for p in obs_sets if counts[p] >= 2]
    mapping = {}
    for p in obs_sets:
        if counts[p] >= 2:
            continue
        cands = [q for q in keep if all(b <= a for a, b in zip(p, q)) and any(q)]
        mapping[p] = max(cands, key=lambda q: (sum(q), q)) if cands else None
    return mapping


def little_mcar_test(data) -> McarTestResult:
    """Little's chi-squared test that missingness is completely at random.

    ``data`` is a dataset (the visit outcomes are the variables) or a raw
    ``(N, k)`` array with NaN for missing values.
    """
    Y = data.y if isinstance(data, LongitudinalDataset) else np.asarray(data, dtype=float)
    Y = np.array(Y, dtype=float)
    N, k = Y.shape
    obs = ~np.isnan(Y)
    keys = [tuple(r) for r in obs.astype(int)]
    counts = {}
    for key in keys:
        counts[key] = counts.get(key, 0) + 1
    if len(counts) == 1:
        return McarTestResult(0.0, 0, 1.0, 1)

    # the statistic is location/scale invariant; standardise for conditioning
    loc = np.nanmean(Y, axis=0)
    scale = np.nanstd(Y, axis=0)
    Y = (Y - loc) / np.where(scale > 0, scale, 1.0)
    try:
        mu, sigma, _ = em_mvn(Y)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance became singular during EM") from None
    mapping = _merge_small_patterns(list(counts), counts)
    members = {}
    for i, key in enumerate(keys):
        target = mapping.get(key, key)
        if target is None:
            continue
        members.setdefault(target, []).append(i)

    d2 = 0.0
    df = 0
    for pat, rows in members.items():
        o = np.array(pat, dtype=bool)
        if not o.any():
            continue
        ybar = Y[np.ix_(rows, o)].mean(axis=0)
        S = sigma[np.ix_(o, o)]
        diff = ybar - mu[o]
        try:
            c = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(
                f"estimated covariance is singular for pattern {pat}") from None
        z = np.linalg.solve(c, diff)
        d2 += len(rows) * float(z @ z)
        df += int(o.sum())
    df -= int(obs.any(axis=0).sum())
    p = float(stats.chi2.sf(d2, df)) if df > 0 else 1.0
    return McarTestResult(float(d2), int(df), p, len(members), mu, sigma)


# ---------------------------------------------------------------------------
# pattern distribution chi-squared


@dataclass(frozen=True)
class Chi2Result:
    statistic: float
    df: int
    p: float
    table: np.ndarray = field(repr=False, default=None)
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p": self.p,
                "warnings": list(self.warnings)}


def chi2_table(table) -> Chi2Result:
    """Pearson chi-squared test of independence for a two-way count table."""
    O = np.asarray(table, dtype=float)
    O = O[O.sum(axis=1) > 0][:, O.sum(axis=0) > 0]
    if O.shape[0] < 2 or O.shape[1] < 2:
        raise ValueError("need at least two arms and two patterns")
    E = O.sum(axis=1, keepdims=True) * O.sum(axis=0, keepdims=True) / O.sum()
    stat = float(((O - E) ** 2 / E).sum())
    df = (O.shape[0] - 1) * (O.shape[1] - 1)
    warns = ()
    if (E < 1).any():
        warns = (f"{int((E < 1).sum())} expected cell count(s) below 1; "
                 "the chi-squared approximation may be poor",)
    return Chi2Result(stat, df, float(stats.chi2.sf(stat, df)), O, warns)


def pattern_table(ds: LongitudinalDataset) -> np.ndarray:
    """Arm x pattern counts; columns run from completers to earliest dropout."""
    label = ds.observed.sum(axis=1) - 1
    levels = sorted(set(label.tolist()), reverse=True)
    return np.array([[int(((ds.arm == a) & (label == lv)).sum()) for lv in levels]
                     for a in range(len(ARMS))])


def pattern_chi2(ds) -> Chi2Result:
    """Do dropout-pattern distributions differ between arms?

    Accepts a dataset or an arm x pattern count table.
    """
    if isinstance(ds, LongitudinalDataset):
        return chi2_table(pattern_table(ds))
    return chi2_table(ds)
