"""Observed-data model for right-censored discrete-time survival cohorts.

A subject is ``(W, A, Delta, T~)`` on the integer grid ``{0, ..., K}``.  The
same information is carried by the longitudinal sequence
``(W, A, R_0, L_1, R_1, L_2, ..., R_{K-1}, L_K)`` where ``R_t`` flags censoring
at ``t`` and ``L_t`` flags the event at ``t``.  Censoring at ``t`` is ordered
after the event indicator at ``t``, so a subject censored at ``t`` was still
at risk of the event at ``t``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np


class CohortError(ValueError):
    """Invalid subject data.  ``row`` is the 1-based data row when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


class EmptyRiskSetWarning(UserWarning):
    """No subject is at risk at some time point, so the hazard is unidentified there."""


@dataclass(frozen=True)
class Subject:
    id: str
    w: tuple[float, ...]
    a: int
    delta: int
    t_tilde: int

    def validate(self, k_max: int) -> None:
        if self.a not in (0, 1):
            raise CohortError(f"arm must be 0 or 1, got {self.a!r}")
        if self.delta not in (0, 1):
            raise CohortError(f"event indicator must be 0 or 1, got {self.delta!r}")
        if not 0 <= self.t_tilde <= k_max:
            raise CohortError(f"time {self.t_tilde} outside grid 0..{k_max}")
        if self.delta == 1 and self.t_tilde < 1:
            raise CohortError("events can only occur at times 1..K")


@dataclass(frozen=True)
class LongitudinalRecord:
    """Indicator encoding of one subject.

    ``r[t]`` is R_t for t = 0..K-1, ``l[t-1]`` is L_t for t = 1..K,
    ``i_risk[m-1]`` is I_m for m = 1..K and ``j_risk[m]`` is J_m for m = 0..K-1.
    """

    r: np.ndarray
    l: np.ndarray
    i_risk: np.ndarray
    j_risk: np.ndarray

    @property
    def k_max(self) -> int:
        return len(self.r)


def encode_longitudinal(s: Subject, k_max: int) -> LongitudinalRecord:
    if s.t_tilde > k_max:
        raise CohortError(f"subject {s.id}: time {s.t_tilde} exceeds horizon {k_max}")
    s.validate(k_max)
    r = np.zeros(k_max, dtype=np.int8)
    l = np.zeros(k_max, dtype=np.int8)
    if s.delta == 1:
        l[s.t_tilde - 1] = 1
    elif s.t_tilde < k_max:
        r[s.t_tilde] = 1
    # cumulative "something already happened" flags
    i_risk = np.zeros(k_max, dtype=np.int8)
    j_risk = np.zeros(k_max, dtype=np.int8)
    for m in range(1, k_max + 1):
        i_risk[m - 1] = int(not r[:m].any() and not l[: m - 1].any())
    j_risk[0] = 1
    for m in range(1, k_max):
        j_risk[m] = int(not r[:m].any() and not l[:m].any())
    return LongitudinalRecord(r=r, l=l, i_risk=i_risk, j_risk=j_risk)


def decode_longitudinal(rec: LongitudinalRecord) -> tuple[int, int]:
    """Recover ``(delta, t_tilde)`` from the indicator encoding."""
    k_max = rec.k_max
    if int(rec.r.sum()) + int(rec.l.sum()) > 1:
        raise CohortError("at most one R/L indicator may fire")
    if rec.l.any():
        return 1, int(np.flatnonzero(rec.l)[0]) + 1
    if rec.r.any():
        return 0, int(np.flatnonzero(rec.r)[0])
    return 0, k_max


@dataclass(frozen=True)
class Cohort:
    """Immutable column store of subjects sharing horizon ``k_max`` and dimension ``p``."""

    ids: np.ndarray
    w: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    time: np.ndarray
    k_max: int
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = np.asarray([str(i) for i in self.ids], dtype=object)
        w = np.array(self.w, dtype=float, copy=True)
        if w.ndim == 1:
            w = w.reshape(len(ids), -1) if len(ids) else w.reshape(0, 0)
        a = np.asarray(self.a).astype(np.int64)
        delta = np.asarray(self.delta).astype(np.int64)
        time = np.asarray(self.time).astype(np.int64)
        n = len(ids)
        if not (w.shape[0] == len(a) == len(delta) == len(time) == n):
            raise CohortError("column lengths differ")
        if len(set(ids.tolist())) != n:
            raise CohortError("subject ids must be unique")
        if n:
            if not np.all(np.isin(a, (0, 1))):
                raise CohortError("arm must be 0/1", row=_first(~np.isin(a, (0, 1))))
            if not np.all(np.isin(delta, (0, 1))):
                raise CohortError("event indicator must be 0/1", row=_first(~np.isin(delta, (0, 1))))
            bad = (time < 0) | (time > self.k_max)
            if bad.any():
                raise CohortError(f"time outside 0..{self.k_max}", row=_first(bad))
            bad = (delta == 1) & (time < 1)
            if bad.any():
                raise CohortError("events can only occur at times 1..K", row=_first(bad))
            if not np.all(np.isfinite(w)):
                raise CohortError("covariates must be finite")
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        if len(names) != w.shape[1]:
            raise CohortError("covariate_names length does not match covariate columns")
        for arr in (ids, w, a, delta, time):
            arr.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], k_max: int, covariate_names=()) -> "Cohort":
        for i, s in enumerate(subjects):
            try:
                s.validate(k_max)
            except CohortError as exc:
                raise CohortError(f"subject {s.id}: {exc}", row=i + 1) from None
        p = len(subjects[0].w) if subjects else len(covariate_names)
        if any(len(s.w) != p for s in subjects):
            raise CohortError("all subjects must share the covariate dimension")
        w = np.array([s.w for s in subjects], dtype=float).reshape(len(subjects), p)
        return cls(
            ids=np.array([s.id for s in subjects], dtype=object),
            w=w,
            a=np.array([s.a for s in subjects], dtype=np.int64),
            delta=np.array([s.delta for s in subjects], dtype=np.int64),
            time=np.array([s.t_tilde for s in subjects], dtype=np.int64),
            k_max=k_max,
            covariate_names=tuple(covariate_names),
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def subject(self, i: int) -> Subject:
        return Subject(
            id=str(self.ids[i]),
            w=tuple(float(x) for x in self.w[i]),
            a=int(self.a[i]),
            delta=int(self.delta[i]),
            t_tilde=int(self.time[i]),
        )

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n)]

    def __iter__(self) -> Iterator[Subject]:
        return (self.subject(i) for i in range(self.n))

    def take(self, index) -> "Cohort":
        index = np.asarray(index)
        return Cohort(
            ids=self.ids[index],
            w=self.w[index],
            a=self.a[index],
            delta=self.delta[index],
            time=self.time[index],
            k_max=self.k_max,
            covariate_names=self.covariate_names,
        )

    def select_covariates(self, columns: Sequence[str] | None) -> np.ndarray:
        """Covariate matrix restricted to ``columns`` (all columns when None)."""
        if columns is None:
            return self.w
        missing = [c for c in columns if c not in self.covariate_names]
        if missing:
            raise CohortError(f"unknown covariate columns {missing}")
        idx = [self.covariate_names.index(c) for c in columns]
        return self.w[:, idx]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "arm", "event", "time", *self.covariate_names])
            for i in range(self.n):
                out.writerow(
                    [self.ids[i], int(self.a[i]), int(self.delta[i]), int(self.time[i])]
                    + [repr(float(x)) for x in self.w[i]]
                )


def _first(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0]) + 1


@dataclass(frozen=True)
class RiskSetTable:
    """Person-period rows: one per (subject, m) with the subject at risk at ``m``."""

    kind: str
    subject_index: np.ndarray
    subject_id: np.ndarray
    m: np.ndarray
    a: np.ndarray
    w: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.m)

    def subset(self, mask: np.ndarray) -> "RiskSetTable":
        return RiskSetTable(
            kind=self.kind,
            subject_index=self.subject_index[mask],
            subject_id=self.subject_id[mask],
            m=self.m[mask],
            a=self.a[mask],
            w=self.w[mask],
            y=self.y[mask],
        )

    def for_arm(self, arm: int) -> "RiskSetTable":
        return self.subset(self.a == arm)


def event_at_risk(time: np.ndarray, m: int) -> np.ndarray:
    """I_m for every subject: at risk of the event at ``m`` (m >= 1)."""
    return time >= m


def censoring_at_risk(time: np.ndarray, delta: np.ndarray, m: int) -> np.ndarray:
    """J_m for every subject (J_0 = 1)."""
    if m == 0:
        return np.ones(len(time), dtype=bool)
    return (time > m) | ((time == m) & (delta == 0))


def _expand(c: Cohort, kind: str, times: range, covariates: np.ndarray) -> RiskSetTable:
    idx_parts, m_parts, y_parts = [], [], []
    for m in times:
        if kind == "event":
            at_risk = event_at_risk(c.time, m)
            y = (c.delta == 1) & (c.time == m)
        else:
            at_risk = censoring_at_risk(c.time, c.delta, m)
            y = (c.delta == 0) & (c.time == m) & (m < c.k_max)
        idx = np.flatnonzero(at_risk)
        idx_parts.append(idx)
        m_parts.append(np.full(len(idx), m, dtype=np.int64))
        y_parts.append(y[idx].astype(np.int64))
    if idx_parts:
        idx = np.concatenate(idx_parts)
        ms = np.concatenate(m_parts)
        ys = np.concatenate(y_parts)
    else:
        idx = np.zeros(0, dtype=np.int64)
        ms = np.zeros(0, dtype=np.int64)
        ys = np.zeros(0, dtype=np.int64)
    # subject-major order keeps each subject's rows contiguous
    order = np.lexsort((ms, idx))
    idx, ms, ys = idx[order], ms[order], ys[order]
    return RiskSetTable(
        kind=kind,
        subject_index=idx,
        subject_id=c.ids[idx],
        m=ms,
        a=c.a[idx],
        w=covariates[idx],
        y=ys,
    )


def expand_risk_sets(c: Cohort, tau: int) -> tuple[RiskSetTable, RiskSetTable]:
    """Event table for m in 1..tau-1 (rows with I_m = 1, y = L_m) and censoring
    table for m in 0..tau-2 (rows with J_m = 1, y = R_m).

    Emits :class:`EmptyRiskSetWarning` when no subject is at risk of the event
    at some m <= tau - 1.
    """
    if not 1 <= tau <= c.k_max:
        raise CohortError(f"tau must lie in 1..{c.k_max}, got {tau}")
    event = _expand(c, "event", range(1, tau), c.w)
    cens = _expand(c, "censoring", range(0, tau - 1), c.w)
    empty = [m for m in range(1, tau) if not np.any(event.m == m)]
    if empty:
        warnings.warn(f"empty event risk set at times {empty}", EmptyRiskSetWarning, stacklevel=2)
    return event, cens


DEFAULT_SCHEMA = {"id": "id", "arm": "arm", "event": "event", "time": "time"}


def load_schema(path: str | Path | None) -> dict:
    if path is None:
        return dict(DEFAULT_SCHEMA)
    with open(path) as fh:
        schema = json.load(fh)
    if not isinstance(schema, dict):
        raise CohortError("schema file must hold a JSON object")
    return {**DEFAULT_SCHEMA, **schema}


def read_cohort(
    path: str | Path,
    schema: Mapping | None = None,
    k_max: int | None = None,
    discretize: str | None = None,
) -> Cohort:
    """Read a comma-separated cohort file.

    Parameters
    ----------
    path : path to a CSV file with a header row.
    schema : mapping of role to column name.  Roles ``id``, ``arm``, ``event``
        and ``time`` default to the same-named columns; ``covariates`` (a list)
        restricts the covariate columns, otherwise every remaining column is one.
        ``k_max`` may also be given here.
    k_max : time horizon; defaults to ``schema["k_max"]`` or the largest time.
    discretize : ``None`` requires integer times; ``"ceil"`` maps real times
        to the grid by ceiling.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    unknown = set(schema) - {"id", "arm", "event", "time", "covariates", "k_max"}
    if unknown:
        raise CohortError(f"unknown schema roles {sorted(unknown)}")
    if discretize not in (None, "ceil"):
        raise CohortError(f"unsupported discretization {discretize!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CohortError("file is empty") from None
        rows = list(reader)

    roles = {r: schema[r] for r in ("id", "arm", "event", "time")}
    missing = [col for col in roles.values() if col not in header]
    if schema.get("covariates") is not None:
        cov_cols = list(schema["covariates"])
        missing += [c for c in cov_cols if c not in header]
    else:
        cov_cols = [h for h in header if h not in roles.values()]
    if missing:
        raise CohortError(f"missing columns {missing}")
    pos = {h: i for i, h in enumerate(header)}

    ids, arms, events, times, ws = [], [], [], [], []
    for r, row in enumerate(rows, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CohortError(f"expected {len(header)} fields, got {len(row)}", row=r)
        get = lambda col: row[pos[col]].strip()  # noqa: E731
        ids.append(get(roles["id"]))
        arms.append(_parse_binary(get(roles["arm"]), r, roles["arm"]))
        events.append(_parse_binary(get(roles["event"]), r, roles["event"]))
        times.append(_parse_time(get(roles["time"]), r, roles["time"], discretize))
        wr = []
        for col in cov_cols:
            cell = get(col)
            if cell == "":
                raise CohortError(f"empty covariate cell in column '{col}'", row=r, column=col)
            try:
                val = float(cell)
            except ValueError:
                raise CohortError(f"non-numeric covariate {cell!r} in column '{col}'", row=r, column=col) from None
            if not math.isfinite(val):
                raise CohortError(f"non-finite covariate in column '{col}'", row=r, column=col)
            wr.append(val)
        ws.append(wr)

    horizon = k_max if k_max is not None else schema.get("k_max")
    if horizon is None:
        horizon = max(times) if times else 0
    for r, (t, d) in enumerate(zip(times, events), start=1):
        if t < 0 or t > horizon:
            raise CohortError(f"time {t} outside 0..{horizon}", row=r, column=roles["time"])
        if d == 1 and t < 1:
            raise CohortError("event at time 0", row=r, column=roles["time"])
    seen = {}
    for r, i in enumerate(ids, start=1):
        if i in seen:
            raise CohortError(f"duplicate id {i!r} (first on row {seen[i]})", row=r, column=roles["id"])
        seen[i] = r
    return Cohort(
        ids=np.array(ids, dtype=object),
        w=np.array(ws, dtype=float).reshape(len(ids), len(cov_cols)),
        a=np.array(arms, dtype=np.int64),
        delta=np.array(events, dtype=np.int64),
        time=np.array(times, dtype=np.int64),
        k_max=int(horizon),
        covariate_names=tuple(cov_cols),
    )


def _parse_binary(cell: str, row: int, column: str) -> int:
    try:
        val = float(cell)
    except ValueError:
        raise CohortError(f"column '{column}' must be 0 or 1, got {cell!r}", row=row, column=column) from None
    if val not in (0.0, 1.0):
        raise CohortError(f"column '{column}' must be 0 or 1, got {cell!r}", row=row, column=column)
    return int(val)


def _parse_time(cell: str, row: int, column: str, discretize: str | None) -> int:
    try:
        val = float(cell)
    except ValueError:
        raise CohortError(f"non-numeric time {cell!r}", row=row, column=column) from None
    if not math.isfinite(val):
        raise CohortError("non-finite time", row=row, column=column)
    if val != int(val):
        if discretize != "ceil":
            raise CohortError(f"time {cell!r} is not on the integer grid", row=row, column=column)
        val = math.ceil(val)
    return int(val)
