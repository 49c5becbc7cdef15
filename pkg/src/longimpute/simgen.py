"""Synthetic two-arm trials with known truth and a discrete-time dropout hazard.

Outcomes follow the random-intercept model used for analysis.  Dropout is
simulated visit by visit from a logistic hazard in the visit month, the ART
status at the previous visit and the most recent observed change in the
outcome; the outcome term is what makes the default mechanism MAR.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _rng
from .analysis import AnalysisBundle, analyze
from .dataset import LongitudinalDataset, VisitSchedule
from .errors import ConfigError
from .lmm import TERMS

MECHANISMS = ("none", "mcar", "mar")

# beta: intercept chosen for a baseline mean near 13 on the sqrt scale;
# the rest are the direct-likelihood estimates reported for the trial.
DEFAULT_BETA = (11.5, 0.28, 0.39, -0.12, 2.98, -0.21, -3.14)
# hazard intercept solved once for 66% month-6 retention (see calibrate_intercept)
DEFAULT_HAZARD_INTERCEPT = -3.686


@dataclass(frozen=True)
class DropoutConfig:
    """Logit of the withdrawal hazard at visit j (0-based, j >= start_visit).

    ``logit h = intercept + coef_month * month_j + coef_art * ART_{j-1}
    + coef_delta * (Y_{j-1} - Y_{j-2})``.  Odds ratios are per month, for ART
    on vs off, and per unit change on the square-root scale.
    """

    mechanism: str = "mar"
    intercept: float = DEFAULT_HAZARD_INTERCEPT
    coef_month: float = math.log(0.85)
    coef_art: float = math.log(8.62)
    coef_delta: float = math.log(1.24)
    start_visit: int = 2

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"must be one of {MECHANISMS}", "dropout.mechanism")
        for name in ("intercept", "coef_month", "coef_art", "coef_delta"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError("must be a finite number", f"dropout.{name}")
        if isinstance(self.start_visit, bool) or not isinstance(self.start_visit, int):
            raise ConfigError("must be an integer", "dropout.start_visit")
        if self.start_visit < 1:
            raise ConfigError("baseline is never masked; use >= 1", "dropout.start_visit")

    def effective(self) -> "DropoutConfig":
        """Coefficients actually used by the mechanism.

        ``mcar`` keeps only the time trend: ART shifts the outcome mean, so
        ART-driven withdrawal would not be independent of the outcomes.
        """
        if self.mechanism == "mcar":
            return replace(self, coef_art=0.0, coef_delta=0.0)
        return self


@dataclass(frozen=True)
class TrialGeneratorConfig:
    n_per_arm: int = 70
    schedule: VisitSchedule = field(default_factory=VisitSchedule)
    beta: tuple = DEFAULT_BETA
    sigma_b2: float = 1.0
    sigma_e2: float = 20.0
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    art_process: tuple = (0.5, 0.55, 0.6, 0.7, 0.8)
    seed: int = 1

    def __post_init__(self):
        if int(self.n_per_arm) < 1:
            raise ConfigError("must be a positive integer", "n_per_arm")
        if len(self.beta) != len(TERMS):
            raise ConfigError(f"needs {len(TERMS)} values {TERMS}", "beta")
        if self.sigma_b2 < 0:
            raise ConfigError("must be >= 0", "sigma_b2")
        if self.sigma_e2 <= 0:
            raise ConfigError("must be > 0", "sigma_e2")
        p = self.art_process
        if len(p) != self.schedule.n:
            raise ConfigError("needs one probability per visit", "art_process")
        if any(not 0 <= v <= 1 for v in p) or any(b < a for a, b in zip(p, p[1:])):
            raise ConfigError("must be nondecreasing probabilities", "art_process")
        if self.dropout.start_visit >= self.schedule.n:
            raise ConfigError("beyond the last visit", "dropout.start_visit")

    # -- (de)serialisation ------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule.months)
        d["beta"] = dict(zip(TERMS, self.beta))
        d["art_process"] = list(self.art_process)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialGeneratorConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError("unknown field", sorted(extra)[0])
        kw = {}
        try:
            if "schedule" in d:
                kw["schedule"] = VisitSchedule(tuple(d.pop("schedule")))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "schedule") from None
        if "beta" in d:
            beta = d.pop("beta")
            if isinstance(beta, dict):
                bad = set(beta) - set(TERMS)
                if bad:
                    raise ConfigError("unknown term", f"beta.{sorted(bad)[0]}")
                beta = tuple(float(beta.get(t, DEFAULT_BETA[i])) for i, t in enumerate(TERMS))
            kw["beta"] = tuple(float(b) for b in beta)
        if "dropout" in d:
            dd = dict(d.pop("dropout"))
            dfields = set(DropoutConfig.__dataclass_fields__)
            bad = set(dd) - dfields
            if bad:
                raise ConfigError("unknown field", f"dropout.{sorted(bad)[0]}")
            kw["dropout"] = DropoutConfig(**dd)
        if "art_process" in d:
            kw["art_process"] = tuple(float(v) for v in d.pop("art_process"))
        for name in ("n_per_arm", "seed"):
            if name in d:
                v = d.pop(name)
                if not isinstance(v, int) or isinstance(v, bool):
                    raise ConfigError("must be an integer", name)
                kw[name] = v
        for name in ("sigma_b2", "sigma_e2"):
            if name in d:
                v = d.pop(name)
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise ConfigError("must be a number", name)
                kw[name] = float(v)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrialGeneratorConfig":
        """Read a TOML (``.toml``) or JSON config file."""
        path = str(path)
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            if path.endswith(".toml"):
                try:
                    import tomllib
                except ModuleNotFoundError:  # Python < 3.11
                    import tomli as tomllib
                data = tomllib.loads(raw.decode("utf-8"))
            else:
                data = json.loads(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a table/object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class GeneratedTrial:
    full: LongitudinalDataset
    observed: LongitudinalDataset
    truth: TrialGeneratorConfig


def _art_paths(rng, p, N):
    """Monotone ART uptake with marginal probability ``p[j]`` at visit j."""
    n = len(p)
    art = np.zeros((N, n))
    art[:, 0] = rng.random(N) < p[0]
    for j in range(1, n):
        start = (p[j] - p[j - 1]) / (1.0 - p[j - 1]) if p[j - 1] < 1 else 0.0
        art[:, j] = np.maximum(art[:, j - 1], rng.random(N) < start)
    return art


def _simulate(config: TrialGeneratorConfig, rng):
    n = config.schedule.n
    N = 2 * int(config.n_per_arm)
    months = config.schedule.as_array()
    arm = np.tile([0, 1], config.n_per_arm).astype(float)
    age = rng.standard_normal(N)
    b = rng.standard_normal(N) * math.sqrt(config.sigma_b2)
    art = _art_paths(rng, config.art_process, N)
    eps = rng.standard_normal((N, n)) * math.sqrt(config.sigma_e2)
    b0, b1, b2, b3, b4, b5, b6 = config.beta
    mean = (b0 + b1 * arm[:, None] + (b2 + b3 * arm[:, None]) * months[None, :]
            + (b4 + b5 * arm[:, None]) * art + b6 * age[:, None])
    y = mean + b[:, None] + eps
    u = rng.random((N, n))  # drawn for every mechanism to keep streams aligned

    present = np.ones(N, dtype=bool)
    obs = np.ones((N, n), dtype=bool)
    dc = config.dropout.effective()
    if dc.mechanism != "none":
        for j in range(dc.start_visit, n):
            eta = (dc.intercept + dc.coef_month * months[j] + dc.coef_art * art[:, j - 1]
                   + dc.coef_delta * (y[:, j - 1] - y[:, j - 2]))
            drop = present & (u[:, j] < 1.0 / (1.0 + np.exp(-eta)))
            present &= ~drop
            obs[:, j] = present
    return arm, age, art, y, obs


def generate(config: TrialGeneratorConfig, replicate: int | None = None) -> GeneratedTrial:
    """Simulate one trial.  The stream is keyed by ``config.seed`` (and
    ``replicate`` when given), so equal inputs give bit-identical output."""
    rng = _rng.stream(config.seed) if replicate is None else _rng.stream(config.seed, replicate)
    arm, age, art, y, obs = _simulate(config, rng)
    N = y.shape[0]
    width = max(4, len(str(N)))
    ids = [f"S{i + 1:0{width}d}" for i in range(N)]
    full = LongitudinalDataset(config.schedule, ids, arm, age, y, art)
    observed = full.replace(y=np.where(obs, y, np.nan))
    return GeneratedTrial(full, observed, config)


def retention_by_month(config: TrialGeneratorConfig, n_reps: int = 200) -> np.ndarray:
    """Average fraction still observed at each visit over ``n_reps`` trials."""
    acc = np.zeros(config.schedule.n)
    for r in range(n_reps):
        rng = _rng.stream(config.seed, r)
        *_, obs = _simulate(config, rng)
        acc += obs.mean(axis=0)
    return acc / n_reps


def calibrate_intercept(config: TrialGeneratorConfig, target: float = 0.66,
                        n_reps: int = 200, lo: float = -10.0, hi: float = 2.0,
                        tol: float = 1e-3) -> float:
    """Bisect the hazard intercept so last-visit retention hits ``target``.

    Common random numbers across evaluations make retention monotone in the
    intercept.
    """
    def last(c):
        cfg = replace(config, dropout=replace(config.dropout, intercept=c))
        return retention_by_month(cfg, n_reps)[-1]

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if last(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# replicate study


@dataclass
class StudySummary:
    """Per method x coefficient bias / SE / coverage over replicates."""

    rows: list
    n_reps: int
    failures: dict
    estimates: dict = field(default_factory=dict, repr=False)  # method -> (reps, p), NaN = failed
    names: tuple = ()

    def row(self, method: str, coef: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["coef"] == coef:
                return r
        raise KeyError((method, coef))


def _one_replicate(config, bundle, r):
    trial = generate(config, replicate=r)
    res = analyze(trial.observed, bundle, seed=_rng.derive(config.seed, r, 1))
    return r, res


def replicate_study(config: TrialGeneratorConfig, n_reps: int,
                    bundle: AnalysisBundle | None = None, threads: int = 1) -> StudySummary:
    """Simulate ``n_reps`` trials and run every method on each.

    Replicate ``r`` uses streams derived from ``(config.seed, r)``; results are
    aggregated in replicate order, so the summary does not depend on
    ``threads``.  Failed fits are counted, not raised.
    """
    if int(n_reps) < 2:
        raise ConfigError("need at least two replicates", "reps")
    bundle = bundle or AnalysisBundle()
    truth = dict(zip(TERMS, config.beta))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _one_replicate(config, bundle, r), range(n_reps)))
    else:
        results = [_one_replicate(config, bundle, r) for r in range(n_reps)]
    results.sort(key=lambda t: t[0])

    rows = []
    failures = {}
    estimates = {}
    names = ()
    for m in bundle.methods:
        ok = [res[m] for _, res in results if res[m].ok]
        failures[m] = len(results) - len(ok)
        if not ok:
            continue
        names = ok[0].names
        estimates[m] = np.array([res[m].estimate if res[m].ok else np.full(len(names), np.nan)
                                 for _, res in results])
        est = np.array([o.estimate for o in ok])
        se = np.array([o.se for o in ok])
        lo = np.array([o.lower for o in ok])
        hi = np.array([o.upper for o in ok])
        for i, name in enumerate(names):
            t = truth[name]
            err = est[:, i] - t
            k = len(ok)
            emp_se = float(np.std(est[:, i], ddof=1)) if k > 1 else float("nan")
            rows.append({
                "method": m, "coef": name, "truth": t, "n_ok": k,
                "mean_estimate": float(np.mean(est[:, i])),
                "bias": float(np.mean(err)),
                "mc_se": emp_se / math.sqrt(k) if k > 1 else float("nan"),
                "emp_se": emp_se,
                "mean_model_se": float(np.mean(se[:, i])),
                "coverage": float(np.mean((lo[:, i] <= t) & (t <= hi[:, i]))),
            })
    return StudySummary(rows, int(n_reps), failures, estimates, tuple(names))
