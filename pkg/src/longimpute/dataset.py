"""Long-format longitudinal trial data: model, CSV I/O and descriptive tables.

A dataset is held as dense ``subjects x visits`` arrays with ``NaN`` marking
a missing outcome.  Records (:class:`SubjectRecord`) and patterns
(:class:`MissingnessPattern`) are views built on demand.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicationError,
    EligibilityError,
    IntermittentMissingnessError,
    ParseError,
)

ARMS = ("placebo", "prednisolone")
CSV_HEADER = ("subject_id", "arm", "age", "month", "sqrt_cd4", "art")
MISSING_TOKENS = ("", "NA")

MONOTONE = "monotone"
INTERMITTENT = "intermittent"


@dataclass(frozen=True)
class VisitSchedule:
    months: tuple = (0.0, 0.5, 1.0, 3.0, 6.0)

    def __post_init__(self):
        months = tuple(float(m) for m in self.months)
        if len(months) < 2:
            raise ValueError("a visit schedule needs at least two visits")
        if months[0] != 0.0:
            raise ValueError("the first visit must be baseline (month 0)")
        if any(b <= a for a, b in zip(months, months[1:])):
            raise ValueError("visit months must be strictly increasing")
        object.__setattr__(self, "months", months)

    @property
    def n(self) -> int:
        return len(self.months)

    def index(self, month: float) -> int:
        for j, m in enumerate(self.months):
            if math.isclose(m, month, rel_tol=0.0, abs_tol=1e-9):
                return j
        raise KeyError(month)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.months, dtype=float)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    arm: str
    age: float
    outcomes: tuple  # per visit, None when missing
    art: tuple  # per visit 0/1, None when unknown (after dropout)

    @property
    def prednisolone(self) -> int:
        return int(self.arm == "prednisolone")


@dataclass(frozen=True)
class MissingnessPattern:
    """Observation indicators for one subject.

    ``dropout_occasion`` is the 1-based visit following the last observed
    one, or ``None`` for a completer.
    """

    indicators: tuple
    dropout_occasion: int | None

    @classmethod
    def from_indicators(cls, indicators) -> "MissingnessPattern":
        ind = tuple(int(bool(v)) for v in indicators)
        last = max(j for j, v in enumerate(ind) if v) if any(ind) else -1
        dropout = None if last == len(ind) - 1 else last + 2
        return cls(ind, dropout)

    @classmethod
    def from_dropout(cls, dropout_occasion: int | None, n_visits: int) -> "MissingnessPattern":
        """Monotone pattern reconstructed from the dropout occasion."""
        n_obs = n_visits if dropout_occasion is None else dropout_occasion - 1
        return cls(tuple([1] * n_obs + [0] * (n_visits - n_obs)), dropout_occasion)

    @property
    def is_completer(self) -> bool:
        return self.dropout_occasion is None

    @property
    def is_monotone(self) -> bool:
        k = sum(self.indicators)
        return all(self.indicators[:k]) and not any(self.indicators[k:])


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def is_monotone(obj) -> str:
    """Classify missingness as ``"monotone"`` or ``"intermittent"``.

    Accepts a dataset or a raw ``(subjects, visits)`` indicator matrix with
    1 = observed.
    """
    if isinstance(obj, LongitudinalDataset):
        r = obj.observed
    else:
        r = np.asarray(obj).astype(bool)
        if r.ndim == 1:
            r = r[None, :]
    k = r.sum(axis=1)
    prefix = np.arange(r.shape[1])[None, :] < k[:, None]
    return MONOTONE if np.array_equal(r, prefix) else INTERMITTENT


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Immutable subject x visit container.

    ``y`` holds the outcome on the analysis (square-root CD4) scale with
    ``NaN`` for missing cells.  Nonnegativity is checked when reading files,
    not here, so simulated and imputed draws on the normal scale are
    accepted.  ``art`` holds 0/1 with ``NaN`` where treatment status is
    unknown; ``arm`` is 1 for prednisolone.
    """

    schedule: VisitSchedule
    ids: tuple
    arm: np.ndarray
    age: np.ndarray
    y: np.ndarray
    art: np.ndarray
    allow_intermittent: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = self.schedule.n
        ids = tuple(str(i) for i in self.ids)
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[1] != n:
            raise ValueError(f"outcome matrix must have shape (subjects, {n})")
        N = y.shape[0]
        arm = np.asarray(self.arm, dtype=np.int8).reshape(-1)
        age = np.asarray(self.age, dtype=float).reshape(-1)
        art = np.asarray(self.art, dtype=float)
        if len(ids) != N or arm.shape[0] != N or age.shape[0] != N or art.shape != y.shape:
            raise ValueError("subject-level arrays disagree in length")
        if len(set(ids)) != N:
            raise DuplicationError("subject ids must be unique")
        if not np.isin(arm, (0, 1)).all():
            raise ValueError("arm must be coded 0 (placebo) / 1 (prednisolone)")
        obs = ~np.isnan(y)
        if np.isinf(y).any():
            raise ValueError("outcomes must be finite")
        if np.isnan(art[obs]).any():
            raise ValueError("ART status missing at an observed visit")
        few = np.flatnonzero(obs.sum(axis=1) < 2)
        if few.size:
            raise EligibilityError(
                f"subject {ids[few[0]]!r} has fewer than two observed outcomes"
            )
        if not self.allow_intermittent and N and is_monotone(obs) != MONOTONE:
            bad = _first_intermittent(obs)
            raise IntermittentMissingnessError(
                f"subject {ids[bad]!r} has intermittent missingness"
            )
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "arm", _readonly(arm))
        object.__setattr__(self, "age", _readonly(age))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "art", _readonly(art))

    # -- construction -------------------------------------------------
    @classmethod
    def from_subjects(cls, schedule: VisitSchedule, subjects: Iterable[SubjectRecord],
                      allow_intermittent: bool = False) -> "LongitudinalDataset":
        subjects = list(subjects)
        n = schedule.n

        def cells(values):
            if len(values) != n:
                raise ValueError("per-visit values must match the schedule length")
            return [np.nan if v is None else float(v) for v in values]

        return cls(
            schedule=schedule,
            ids=[s.subject_id for s in subjects],
            arm=[ARMS.index(s.arm) for s in subjects],
            age=[s.age for s in subjects],
            y=np.array([cells(s.outcomes) for s in subjects], dtype=float).reshape(-1, n),
            art=np.array([cells(s.art) for s in subjects], dtype=float).reshape(-1, n),
            allow_intermittent=allow_intermittent,
        )

    def replace(self, **changes) -> "LongitudinalDataset":
        kw = dict(schedule=self.schedule, ids=self.ids, arm=self.arm, age=self.age,
                  y=self.y, art=self.art, allow_intermittent=self.allow_intermittent)
        kw.update(changes)
        return LongitudinalDataset(**kw)

    def subset(self, mask) -> "LongitudinalDataset":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return self.replace(ids=[self.ids[i] for i in idx], arm=self.arm[idx],
                            age=self.age[idx], y=self.y[idx], art=self.art[idx])

    # -- derived quantities ---------------------------------------------
    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]

    @property
    def n_visits(self) -> int:
        return self.schedule.n

    @property
    def observed(self) -> np.ndarray:
        """Boolean indicator matrix R (True = observed)."""
        if "obs" not in self._cache:
            self._cache["obs"] = _readonly(~np.isnan(self.y))
        return self._cache["obs"]

    @property
    def dropout_occasions(self) -> np.ndarray:
        """1-based occasion after the last observed visit; ``n + 1`` for completers."""
        if "drop" not in self._cache:
            obs = self.observed
            last = self.n_visits - 1 - np.argmax(obs[:, ::-1], axis=1)
            self._cache["drop"] = _readonly(last + 2)
        return self._cache["drop"]

    @property
    def is_completer(self) -> np.ndarray:
        return self.observed.all(axis=1)

    @property
    def patterns(self) -> list:
        n = self.n_visits
        return [MissingnessPattern(tuple(int(v) for v in row), None if d > n else int(d))
                for row, d in zip(self.observed, self.dropout_occasions)]

    @property
    def subjects(self) -> list:
        out = []
        for i, sid in enumerate(self.ids):
            out.append(SubjectRecord(
                subject_id=sid,
                arm=ARMS[self.arm[i]],
                age=float(self.age[i]),
                outcomes=tuple(None if np.isnan(v) else float(v) for v in self.y[i]),
                art=tuple(None if np.isnan(v) else int(v) for v in self.art[i]),
            ))
        return out

    @property
    def n_missing(self) -> int:
        return int((~self.observed).sum())

    def art_filled(self) -> np.ndarray:
        """ART matrix with unknown cells carried forward from the last known visit."""
        art = np.array(self.art, copy=True)
        for j in range(1, art.shape[1]):
            gap = np.isnan(art[:, j])
            art[gap, j] = art[gap, j - 1]
        return np.nan_to_num(art, nan=0.0)


def _first_intermittent(obs):
    k = obs.sum(axis=1)
    prefix = np.arange(obs.shape[1])[None, :] < k[:, None]
    return int(np.flatnonzero((obs != prefix).any(axis=1))[0])


# ---------------------------------------------------------------------------
# CSV I/O


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _parse_float(token, what, line):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{what}: cannot parse {token!r} as a number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what}: non-finite value {token!r}", line)
    return value


def load_csv(source, schedule: VisitSchedule | None = None, *, raw_cd4: bool = False,
             allow_intermittent: bool = False, allow_negative: bool = False) -> LongitudinalDataset:
    """Read the long format ``subject_id,arm,age,month,sqrt_cd4,art``.

    ``source`` may be a path, raw bytes, or a text/binary stream.  Empty or
    ``NA`` outcome cells are missing; with ``raw_cd4`` the outcome column holds
    raw counts and is square-root transformed.  Visits a subject has no row for
    are treated as missing.  Negative outcomes are rejected unless
    ``allow_negative`` is set (simulated Gaussian outcomes can dip below 0).
    """
    schedule = schedule or VisitSchedule()
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty input", 1) from None
        header = [h.strip() for h in header]
        extra = header[len(CSV_HEADER):]
        if tuple(header[:len(CSV_HEADER)]) != CSV_HEADER or any(
                h not in ("strategy", "imputation_index") for h in extra):
            raise ParseError(f"expected header {','.join(CSV_HEADER)}", 1)
        subjects: dict = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            sid, arm, age, month, value, art = (c.strip() for c in row[:6])
            if not sid:
                raise ParseError("empty subject_id", line)
            if arm not in ARMS:
                raise ParseError(f"arm must be one of {ARMS}, got {arm!r}", line)
            age_v = _parse_float(age, "age", line)
            month_v = _parse_float(month, "month", line)
            try:
                j = schedule.index(month_v)
            except KeyError:
                raise ParseError(f"month {month!r} is not on the visit schedule", line) from None
            if value in MISSING_TOKENS:
                y_v = np.nan
            else:
                y_v = _parse_float(value, "sqrt_cd4", line)
                if y_v < 0 and (raw_cd4 or not allow_negative):
                    raise ParseError(f"negative outcome {value!r}", line)
                if raw_cd4:
                    y_v = math.sqrt(y_v)
            if art in MISSING_TOKENS:
                if not np.isnan(y_v):
                    raise ParseError("art is required where the outcome is observed", line)
                art_v = np.nan
            elif art in ("0", "1"):
                art_v = float(art)
            else:
                raise ParseError(f"art must be 0 or 1, got {art!r}", line)
            rec = subjects.get(sid)
            if rec is None:
                rec = subjects[sid] = {
                    "arm": arm, "age": age_v,
                    "y": [np.nan] * schedule.n, "art": [np.nan] * schedule.n,
                    "seen": set(), "line": line,
                }
            elif rec["arm"] != arm or rec["age"] != age_v:
                raise ParseError(f"subject {sid!r}: arm/age differ between rows", line)
            if j in rec["seen"]:
                raise DuplicationError(f"duplicate row for subject {sid!r} at month {month}", line)
            rec["seen"].add(j)
            rec["y"][j] = y_v
            rec["art"][j] = art_v
    finally:
        if close:
            fh.close()

    ids = sorted(subjects)
    for sid in ids:
        rec = subjects[sid]
        obs = [not np.isnan(v) for v in rec["y"]]
        if sum(obs) < 2:
            raise EligibilityError(
                f"line {rec['line']}: subject {sid!r} has fewer than two observed outcomes")
        if not allow_intermittent and is_monotone(np.array(obs)) != MONOTONE:
            raise IntermittentMissingnessError(
                f"line {rec['line']}: subject {sid!r} has intermittent missingness")
    return LongitudinalDataset(
        schedule=schedule,
        ids=ids,
        arm=[ARMS.index(subjects[s]["arm"]) for s in ids],
        age=[subjects[s]["age"] for s in ids],
        y=np.array([subjects[s]["y"] for s in ids], dtype=float).reshape(-1, schedule.n),
        art=np.array([subjects[s]["art"] for s in ids], dtype=float).reshape(-1, schedule.n),
        allow_intermittent=allow_intermittent,
    )


def format_month(m: float) -> str:
    s = f"{m:.1f}"
    return s[:-2] if s.endswith(".0") else s


def _fmt(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_csv(ds: LongitudinalDataset, dest=None, *, strategy: str | None = None,
              imputation_index: int | None = None) -> str | None:
    """Write the canonical long format (one row per subject x visit).

    Returns the CSV text when ``dest`` is None.  ``strategy`` and
    ``imputation_index`` add the columns used for completed datasets.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(CSV_HEADER)
    tail = []
    if strategy is not None:
        header.append("strategy")
        tail.append(strategy)
        if imputation_index is not None:
            header.append("imputation_index")
            tail.append(str(imputation_index))
    w.writerow(header)
    order = sorted(range(ds.n_subjects), key=lambda i: ds.ids[i])
    for i in order:
        for j, m in enumerate(ds.schedule.months):
            a = ds.art[i, j]
            w.writerow([ds.ids[i], ARMS[ds.arm[i]], repr(float(ds.age[i])), format_month(m),
                        _fmt(ds.y[i, j]), "NA" if np.isnan(a) else str(int(a))] + tail)
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


# ---------------------------------------------------------------------------
# descriptive tables


@dataclass(frozen=True)
class RetentionTable:
    months: tuple
    arms: tuple
    counts: np.ndarray  # (arms, visits)
    totals: np.ndarray  # (arms,)

    @property
    def percent(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return 100.0 * self.counts / self.totals[:, None]

    def rows(self) -> list:
        pct = self.percent
        return [
            {"arm": arm, "month": self.months[j], "n": int(self.counts[a, j]),
             "percent": None if np.isnan(pct[a, j]) else float(pct[a, j])}
            for a, arm in enumerate(self.arms) for j in range(len(self.months))
        ]


def retention_table(ds: LongitudinalDataset) -> RetentionTable:
    """Per arm and visit, how many subjects still have an observed outcome."""
    obs = ds.observed
    counts = np.array([obs[ds.arm == a].sum(axis=0) for a in range(len(ARMS))], dtype=int)
    totals = np.array([(ds.arm == a).sum() for a in range(len(ARMS))], dtype=int)
    return RetentionTable(ds.schedule.months, ARMS, counts.reshape(len(ARMS), ds.n_visits), totals)


@dataclass(frozen=True)
class PatternRow:
    arm: str
    pattern: int  # number of observed visits minus one; n - 1 = completers
    n: int
    percent: float
    means: tuple  # per visit, None where the pattern has no observations


@dataclass(frozen=True)
class PatternMeans:
    months: tuple
    rows: tuple
    overall_mean: dict  # arm -> per-visit means
    overall_sd: dict
    overall_n: dict

    def as_records(self) -> list:
        out = []
        for r in self.rows:
            out.append({"arm": r.arm, "pattern": r.pattern, "n": r.n, "percent": r.percent,
                        "means": list(r.means)})
        for arm in self.overall_mean:
            out.append({"arm": arm, "pattern": "overall", "n": self.overall_n[arm],
                        "percent": 100.0 if self.overall_n[arm] else None,
                        "means": list(self.overall_mean[arm]), "sd": list(self.overall_sd[arm])})
        return out


def _nan_to_none(values):
    return tuple(None if np.isnan(v) else float(v) for v in values)


def pattern_means(ds: LongitudinalDataset) -> PatternMeans:
    """Mean observed outcome per arm, dropout pattern and visit.

    Patterns are labelled by the number of observed visits minus one, so for
    the five-visit schedule 4 = completers and 1 = seen only through week 2.
    """
    obs = ds.observed
    label = obs.sum(axis=1) - 1
    rows = []
    means, sds, ns = {}, {}, {}
    for a, arm in enumerate(ARMS):
        in_arm = ds.arm == a
        total = int(in_arm.sum())
        for p in sorted(set(label[in_arm].tolist()), reverse=True):
            sel = in_arm & (label == p)
            with np.errstate(invalid="ignore"), _quiet():
                m = np.nanmean(ds.y[sel], axis=0)
            rows.append(PatternRow(arm, int(p), int(sel.sum()), 100.0 * sel.sum() / total,
                                   _nan_to_none(m)))
        with _quiet():
            means[arm] = _nan_to_none(np.nanmean(ds.y[in_arm], axis=0) if total else
                                      np.full(ds.n_visits, np.nan))
            sds[arm] = _nan_to_none(np.nanstd(ds.y[in_arm], axis=0, ddof=1) if total else
                                    np.full(ds.n_visits, np.nan))
        ns[arm] = total
    return PatternMeans(ds.schedule.months, tuple(rows), means, sds, ns)


class _quiet:
    def __enter__(self):
        import warnings
        self._w = warnings.catch_warnings()
        self._w.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._w.__exit__(*exc)


def describe(ds: LongitudinalDataset) -> dict:
    """JSON-ready ``{retention: [...], pattern_means: [...]}`` report."""
    return {"months": list(ds.schedule.months),
            "retention": retention_table(ds).rows(),
            "pattern_means": pattern_means(ds).as_records()}


def from_pattern_counts(counts: dict, schedule: VisitSchedule | None = None,
                        value: float = 13.0) -> LongitudinalDataset:
    """Dataset with a prescribed number of subjects per (arm, #observed visits).

    ``counts`` maps arm name to a sequence indexed by the number of observed
    visits (entries for 0 and 1 must be zero).  Outcomes are the constant
    ``value``; useful for reproducing published count tables.
    """
    schedule = schedule or VisitSchedule()
    n = schedule.n
    ids, arm, y = [], [], []
    for a, name in enumerate(ARMS):
        for k, c in enumerate(counts.get(name, ())):
            for _ in range(int(c)):
                ids.append(f"{name[:2]}{len(ids):05d}")
                arm.append(a)
                y.append([value] * k + [np.nan] * (n - k))
    y = np.array(y, dtype=float).reshape(-1, n)
    art = np.where(np.isnan(y), np.nan, 0.0)
    return LongitudinalDataset(schedule, ids, arm, np.zeros(len(ids)), y, art)


def write_summary_csv(report: dict, dest) -> None:
    """Flatten a :func:`describe` report into a tidy CSV."""
    rows = []
    months = report["months"]
    for r in report["retention"]:
        rows.append(["retention", r["arm"], "", format_month(r["month"]), r["n"],
                     "" if r["percent"] is None else f"{r['percent']:.2f}", "", ""])
    for r in report["pattern_means"]:
        sd = r.get("sd")
        for j, m in enumerate(r["means"]):
            rows.append(["pattern_mean", r["arm"], r["pattern"], format_month(months[j]), r["n"],
                         "" if r["percent"] is None else f"{r['percent']:.2f}",
                         "" if m is None else repr(m),
                         "" if not sd or sd[j] is None else repr(sd[j])])
    with _sink(dest) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "arm", "pattern", "month", "n", "percent", "mean", "sd"])
        w.writerows(rows)


class _sink:
    def __init__(self, dest):
        self.dest = dest

    def __enter__(self):
        if isinstance(self.dest, (str, os.PathLike)):
            self.fh = open(self.dest, "w", newline="", encoding="utf-8")
            return self.fh
        self.fh = None
        return self.dest

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()
        return False
