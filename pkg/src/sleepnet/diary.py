"""Diary data model, CSV codec, feature encoding and behaviour windows.

Flow for one user::

    CSV rows ─► DiaryRecord (per-day values, missing allowed)
             ─► UserHistory (date-ordered)
             ─► encode_record (cyclic sin/cos, miss flags)
             ─► StandardizationStats (fitted on training users only)
             ─► BehaviourWindow (10 × F z-scored matrix + miss mask)

A window holds the 10 most recent diary entries at or before the anchor
day, not 10 calendar days: sparse reporters would otherwise see mostly
empty inputs, and the calendar gaps survive in the date features. Short
histories are padded at the oldest end with fully-missing rows. Missing
values sit at 0 in z-space (the mean) with their miss flag set.

The anchor day's quality is the target and never appears in ``x``;
earlier days' quality is an ordinary input feature.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from sleepnet_core.errors import SleepnetError
from sleepnet_core.protocol import (
    CSV_ID_COLUMNS,
    CSV_QUALITY_COLUMN,
    QUALITY_LEVELS,
    WINDOW_STEPS,
)
from sleepnet.schema import (
    BY_ID,
    QUALITY_FEATURE,
    SCHEMA,
    TOTAL_SLEEP_MAX_MINUTES,
    VARIABLE_IDS,
    Kind,
    feature_names,
)

CSV_COLUMNS: tuple[str, ...] = CSV_ID_COLUMNS + VARIABLE_IDS + (CSV_QUALITY_COLUMN,)


class DiaryError(SleepnetError):
    """Diary data could not be parsed, encoded or windowed."""


class MalformedHeader(DiaryError):
    pass


class DuplicateUserDate(DiaryError):
    pass


class EmptyTrainingSet(DiaryError):
    pass


class AnchorNotFound(DiaryError):
    pass


# ── Records ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DiaryRecord:
    """One day of one user's diary. ``values`` maps variable id -> value or None."""
    user_id: str
    date: date
    values: Mapping[str, Optional[float]]
    quality: Optional[int] = None

    def get(self, variable: str) -> Optional[float]:
        return self.values.get(variable)

    def with_values(self, updates: Mapping[str, Optional[float]]) -> "DiaryRecord":
        merged = dict(self.values)
        merged.update(updates)
        return DiaryRecord(self.user_id, self.date, merged, self.quality)


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    records: tuple[DiaryRecord, ...]

    def __post_init__(self) -> None:
        if not self.records:
            raise DiaryError(f"user {self.user_id!r} has no records")
        for a, b in zip(self.records, self.records[1:]):
            if not a.date < b.date:
                raise DiaryError(
                    f"user {self.user_id!r}: dates not strictly increasing "
                    f"({a.date} then {b.date})"
                )

    @property
    def last(self) -> DiaryRecord:
        return self.records[-1]

    @property
    def anchor_date(self) -> date:
        return self.records[-1].date

    def up_to(self, anchor: date) -> tuple[DiaryRecord, ...]:
        return tuple(r for r in self.records if r.date <= anchor)

    def with_last_day(self, updates: Mapping[str, Optional[float]]) -> "UserHistory":
        """Copy with the anchor day's values overridden (counterfactual behaviour)."""
        return UserHistory(self.user_id, self.records[:-1] + (self.last.with_values(updates),))


def _valid(var_id: str, value: float) -> bool:
    v = BY_ID[var_id]
    if not math.isfinite(value):
        return False
    if v.kind is Kind.BINARY:
        return value in (0.0, 1.0)
    if v.is_minutes or v.unit == "count":
        if value < 0:
            return False
        if var_id == "total_sleep_time" and value > TOTAL_SLEEP_MAX_MINUTES:
            return False
    return True


# ── CSV codec ────────────────────────────────────────────────────────────

def parse_dataset(path: Path | str) -> list[UserHistory]:
    """Read a diary CSV into per-user, date-sorted histories.

    Cells that fail to parse, or hold values outside a variable's domain
    (a binary 3, negative minutes, a quality of 7), become missing; the
    count is reported through ``warnings``. A repeated (user_id, date)
    pair is an error, not a merge.
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    header = tuple(frame.columns)
    if header != CSV_COLUMNS:
        missing = [c for c in CSV_COLUMNS if c not in header]
        extra = [c for c in header if c not in CSV_COLUMNS]
        raise MalformedHeader(
            f"{path}: header does not match the diary column spec "
            f"(missing {missing}, unexpected {extra}"
            f"{', order differs' if not missing and not extra else ''})"
        )

    numeric = frame[list(VARIABLE_IDS) + [CSV_QUALITY_COLUMN]].apply(
        lambda col: pd.to_numeric(col.str.strip(), errors="coerce")
    )
    empty = frame[list(VARIABLE_IDS) + [CSV_QUALITY_COLUMN]].apply(
        lambda col: col.str.strip() == ""
    )
    coerced = int((numeric.isna() & ~empty).to_numpy().sum())

    by_user: dict[str, dict[date, DiaryRecord]] = {}
    out_of_domain = 0
    for i, row in enumerate(frame.itertuples(index=False)):
        user_id = str(row[0]).strip()
        try:
            day = date.fromisoformat(str(row[1]).strip())
        except ValueError:
            raise DiaryError(f"{path}: row {i + 2}: unparseable date {row[1]!r}") from None

        values: dict[str, Optional[float]] = {}
        for var_id in VARIABLE_IDS:
            v = numeric.at[i, var_id]
            if pd.isna(v):
                values[var_id] = None
            elif _valid(var_id, float(v)):
                values[var_id] = float(v)
            else:
                values[var_id] = None
                out_of_domain += 1

        q = numeric.at[i, CSV_QUALITY_COLUMN]
        quality: Optional[int] = None
        if not pd.isna(q):
            if float(q) in QUALITY_LEVELS:
                quality = int(q)
            else:
                out_of_domain += 1

        days = by_user.setdefault(user_id, {})
        if day in days:
            raise DuplicateUserDate(f"{path}: user {user_id!r} has two rows for {day}")
        days[day] = DiaryRecord(user_id, day, values, quality)

    if coerced or out_of_domain:
        warnings.warn(
            f"{path}: {coerced} unparseable and {out_of_domain} out-of-domain "
            f"cells treated as missing"
        )
    return [
        UserHistory(uid, tuple(days[d] for d in sorted(days)))
        for uid, days in sorted(by_user.items())
    ]


def write_dataset(histories: Iterable[UserHistory], path: Path | str) -> Path:
    """Write histories in the diary CSV format. Byte-stable for equal input."""
    rows = []
    for h in histories:
        for r in h.records:
            row: dict[str, object] = {"user_id": r.user_id, "date": r.date.isoformat()}
            for var_id in VARIABLE_IDS:
                v = r.values.get(var_id)
                row[var_id] = np.nan if v is None else float(v)
            row[CSV_QUALITY_COLUMN] = np.nan if r.quality is None else float(r.quality)
            rows.append(row)
    frame = pd.DataFrame(rows, columns=list(CSV_COLUMNS))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", float_format="%.10g", lineterminator="\n")
    return path


# ── Encoding ─────────────────────────────────────────────────────────────

def encode_record(record: DiaryRecord, cyclic: bool = True,
                  anchor: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Encode one day into (features, miss flags), both of length F.

    Cyclic variable v with period P becomes (sin 2πv/P, cos 2πv/P) and
    both slots inherit its miss flag. Missing slots hold 0. The quality
    slot is always missing on an anchor day.
    """
    x: list[float] = []
    miss: list[float] = []
    for v in SCHEMA:
        value = record.values.get(v.id)
        width = 2 if (v.kind is Kind.CYCLIC and cyclic) else 1
        if value is None:
            x += [0.0] * width
            miss += [1.0] * width
        elif width == 2:
            angle = 2.0 * math.pi * value / v.period
            x += [math.sin(angle), math.cos(angle)]
            miss += [0.0, 0.0]
        else:
            x.append(float(value))
            miss.append(0.0)
    if anchor or record.quality is None:
        x.append(0.0)
        miss.append(1.0)
    else:
        x.append(float(record.quality))
        miss.append(0.0)
    return np.asarray(x, dtype=np.float64), np.asarray(miss, dtype=np.float64)


# ── Standardization ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean/std pooled over non-missing entries (population std).

    Zero-variance features are flagged and map to 0 in z-space.
    """
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray
    cyclic: bool = True

    @property
    def n_features(self) -> int:
        return len(self.names)

    def apply(self, x: np.ndarray, miss: np.ndarray) -> np.ndarray:
        safe_std = np.where(self.zero_variance, 1.0, self.std)
        z = (x - self.mean) / safe_std
        return np.where((miss > 0) | self.zero_variance, 0.0, z)

    def to_value(self, feature: int, z: np.ndarray | float) -> np.ndarray | float:
        """Map a z-space value back to the feature's original units."""
        if self.zero_variance[feature]:
            return self.mean[feature] + 0.0 * np.asarray(z)
        return self.mean[feature] + self.std[feature] * z

    def to_z(self, feature: int, value: np.ndarray | float) -> np.ndarray | float:
        if self.zero_variance[feature]:
            return 0.0 * np.asarray(value)
        return (value - self.mean[feature]) / self.std[feature]

    @classmethod
    def identity(cls, cyclic: bool = True) -> "StandardizationStats":
        """Pass-through statistics (the network's 'zscore' stage removed)."""
        names = feature_names(cyclic)
        n = len(names)
        return cls(names, np.zeros(n), np.ones(n), np.zeros(n, dtype=bool), cyclic)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "zero_variance": [bool(v) for v in self.zero_variance],
            "cyclic": self.cyclic,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StandardizationStats":
        return cls(
            names=tuple(d["names"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            zero_variance=np.asarray(d["zero_variance"], dtype=bool),
            cyclic=bool(d.get("cyclic", True)),
        )


def encode_histories(histories: Iterable[UserHistory],
                     cyclic: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack every record of every history: (N_records, F) features and flags."""
    xs, ms = [], []
    for h in histories:
        for r in h.records:
            x, m = encode_record(r, cyclic=cyclic)
            xs.append(x)
            ms.append(m)
    if not xs:
        width = len(feature_names(cyclic))
        return np.zeros((0, width)), np.zeros((0, width))
    return np.vstack(xs), np.vstack(ms)


def fit_standardization(histories: Sequence[UserHistory],
                        cyclic: bool = True) -> StandardizationStats:
    """Fit z-score statistics on training histories only."""
    x, miss = encode_histories(histories, cyclic=cyclic)
    if x.shape[0] == 0:
        raise EmptyTrainingSet("cannot fit standardization on zero records")
    present = miss == 0
    counts = present.sum(axis=0)
    safe_counts = np.maximum(counts, 1)
    mean = np.where(present, x, 0.0).sum(axis=0) / safe_counts
    var = np.where(present, (x - mean) ** 2, 0.0).sum(axis=0) / safe_counts
    std = np.sqrt(var)
    zero_variance = (counts == 0) | (std <= 1e-12)
    if zero_variance.any():
        names = feature_names(cyclic)
        flagged = [names[i] for i in np.flatnonzero(zero_variance)]
        warnings.warn(f"zero-variance features excluded from z-scoring: {flagged}")
    std = np.where(zero_variance, 1.0, std)
    return StandardizationStats(feature_names(cyclic), mean, std, zero_variance, cyclic)


# ── Windows ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BehaviourWindow:
    """z-scored T × F inputs; row T-1 is the anchor (last) day."""
    user_id: str
    anchor_date: date
    x: np.ndarray
    miss: np.ndarray


def build_window(history: UserHistory, anchor: date,
                 stats: StandardizationStats) -> BehaviourWindow:
    """The 10 most recent records at or before ``anchor``, padded and z-scored."""
    records = history.up_to(anchor)
    if not records or records[-1].date != anchor:
        raise AnchorNotFound(f"user {history.user_id!r} has no record on {anchor}")
    records = records[-WINDOW_STEPS:]

    width = stats.n_features
    raw = np.zeros((WINDOW_STEPS, width))
    miss = np.ones((WINDOW_STEPS, width))
    offset = WINDOW_STEPS - len(records)
    for i, r in enumerate(records):
        x, m = encode_record(r, cyclic=stats.cyclic, anchor=(i == len(records) - 1))
        raw[offset + i] = x
        miss[offset + i] = m
    return BehaviourWindow(history.user_id, anchor, stats.apply(raw, miss), miss)


@dataclass(frozen=True)
class WindowBatch:
    """Anchor-day windows for many users, stacked for the network.

    ``y`` holds the anchor day's reported quality (NaN when unreported).
    """
    user_ids: tuple[str, ...]
    x: np.ndarray       # (N, T, F)
    miss: np.ndarray    # (N, T, F)
    y: np.ndarray       # (N,)
    anchors: tuple[date, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.user_ids)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "WindowBatch":
        idx = np.asarray(idx, dtype=int)
        return WindowBatch(
            tuple(self.user_ids[i] for i in idx),
            self.x[idx], self.miss[idx], self.y[idx],
            tuple(self.anchors[i] for i in idx) if self.anchors else (),
        )

    def window(self, i: int) -> BehaviourWindow:
        return BehaviourWindow(self.user_ids[i], self.anchors[i], self.x[i], self.miss[i])

    @classmethod
    def from_windows(cls, windows: Sequence[BehaviourWindow],
                     y: Optional[Sequence[float]] = None) -> "WindowBatch":
        targets = np.full(len(windows), np.nan) if y is None else np.asarray(y, dtype=np.float64)
        return cls(
            tuple(w.user_id for w in windows),
            np.stack([w.x for w in windows]),
            np.stack([w.miss for w in windows]),
            targets,
            tuple(w.anchor_date for w in windows),
        )


def anchor_quality(history: UserHistory) -> float:
    q = history.last.quality
    return float("nan") if q is None else float(q)


def build_batch(histories: Sequence[UserHistory], stats: StandardizationStats,
                labeled_only: bool = False) -> WindowBatch:
    """Windows anchored on each user's last record."""
    chosen = [h for h in histories if not labeled_only or h.last.quality is not None]
    windows = [build_window(h, h.anchor_date, stats) for h in chosen]
    if not windows:
        n = stats.n_features
        empty = np.zeros((0, WINDOW_STEPS, n))
        return WindowBatch((), empty, empty.copy(), np.zeros(0), ())
    return WindowBatch.from_windows(windows, [anchor_quality(h) for h in chosen])


def labeled(histories: Iterable[UserHistory]) -> list[UserHistory]:
    """Users whose anchor day carries a reported quality."""
    return [h for h in histories if h.last.quality is not None]


# ── Descriptive statistics ───────────────────────────────────────────────

@dataclass(frozen=True)
class VariableSummary:
    """Numeric: mean [P10, P90]. Binary: count [%] of present entries."""
    variable: str
    label: str
    kind: str
    present: int
    mean: Optional[float]
    p10: Optional[float]
    p90: Optional[float]
    count: Optional[int]
    percent: Optional[float]


def describe_population(histories: Sequence[UserHistory]) -> list[VariableSummary]:
    """Descriptive statistics per diary variable, quality and report count."""
    rows: list[VariableSummary] = []
    records = [r for h in histories for r in h.records]

    def _numeric(var: str, label: str, kind: str, vals: list[float]) -> VariableSummary:
        arr = np.asarray(vals, dtype=np.float64)
        if arr.size == 0:
            return VariableSummary(var, label, kind, 0, None, None, None, None, None)
        return VariableSummary(
            var, label, kind, int(arr.size), float(arr.mean()),
            float(np.percentile(arr, 10)), float(np.percentile(arr, 90)), None, None,
        )

    for v in SCHEMA:
        vals = [r.values[v.id] for r in records if r.values.get(v.id) is not None]
        if v.kind is Kind.BINARY:
            count = int(sum(1 for x in vals if x == 1.0))
            pct = 100.0 * count / len(vals) if vals else None
            rows.append(VariableSummary(v.id, v.label, v.kind.value, len(vals),
                                        None, None, None, count, pct))
        else:
            rows.append(_numeric(v.id, v.label, v.kind.value, vals))

    qualities = [float(r.quality) for r in records if r.quality is not None]
    rows.append(_numeric(QUALITY_FEATURE, "subjective sleep quality", "score", qualities))
    rows.append(_numeric("reports_per_user", "daily reports per user", "count",
                         [float(len(h.records)) for h in histories]))
    return rows
