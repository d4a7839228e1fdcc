"""Diary variable schema.

The 23 behaviour variables of the digital sleep diary, one per
descriptive-statistics row, plus the reported quality column. Three
variables are cyclic (day of month, month, hour into bed) and expand to a
sin/cos pair when encoded; the rest map one-to-one onto a feature.

Variable ids double as CSV column names.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from sleepnet_core.protocol import CSV_QUALITY_COLUMN


class Kind(Enum):
    NUMERIC = "numeric"
    BINARY = "binary"
    CYCLIC = "cyclic"


@dataclass(frozen=True)
class BehaviourVariable:
    id: str
    kind: Kind
    unit: str                      # mins / hour / count / day / month / year / flag
    label: str
    period: Optional[float] = None  # cyclic only

    @property
    def is_minutes(self) -> bool:
        return self.unit == "mins"


def _num(id: str, unit: str, label: str) -> BehaviourVariable:
    return BehaviourVariable(id, Kind.NUMERIC, unit, label)


def _bin(id: str, label: str) -> BehaviourVariable:
    return BehaviourVariable(id, Kind.BINARY, "flag", label)


def _cyc(id: str, unit: str, label: str, period: float) -> BehaviourVariable:
    return BehaviourVariable(id, Kind.CYCLIC, unit, label, period)


SCHEMA: tuple[BehaviourVariable, ...] = (
    _cyc("date_day", "day", "date (day)", 31.0),
    _cyc("date_month", "month", "date (month)", 12.0),
    _num("date_year", "year", "date (year)"),
    _cyc("bed_hour", "hour", "time into bed (hour)", 24.0),
    _num("bed_minute", "mins", "time into bed (mins)"),
    _num("bed_before_lights_out", "mins", "time into bed before lights out"),
    _num("sleep_onset_latency", "mins", "sleep onset latency"),
    _num("awake_minutes", "mins", "time awake at night"),
    _num("total_sleep_time", "mins", "total sleep time"),
    _num("total_time_in_bed", "mins", "total time in bed"),
    _num("times_awake", "count", "times awake at night"),
    _bin("no_sleep", "no sleep obtained"),
    _bin("note_written", "note written"),
    _bin("alcohol", "use of alcohol"),
    _bin("caffeine", "use of caffeine"),
    _bin("exercise", "exercise"),
    _bin("lights_on", "lights on"),
    _bin("nicotine", "use of nicotine"),
    _bin("noise", "noise"),
    _bin("pain", "pain"),
    _bin("slept_with_partner", "slept with partner"),
    _bin("sleeping_pills", "sleeping pills"),
    _bin("temperature", "temperature"),
)

BY_ID: dict[str, BehaviourVariable] = {v.id: v for v in SCHEMA}
VARIABLE_IDS: tuple[str, ...] = tuple(v.id for v in SCHEMA)
BINARY_IDS: tuple[str, ...] = tuple(v.id for v in SCHEMA if v.kind is Kind.BINARY)
DATE_IDS = ("date_day", "date_month", "date_year")

# Prior-day quality is an input feature; the anchor day's is the target only.
QUALITY_FEATURE = CSV_QUALITY_COLUMN

# Numeric advisable variables and the diary fields they land on.
LIGHTS_OFF_TO_ASLEEP = "sleep_onset_latency"
IN_BED_LIGHTS_ON = "bed_before_lights_out"
TOTAL_SLEEP_MAX_MINUTES = 24 * 60


def feature_names(cyclic: bool = True) -> tuple[str, ...]:
    """Encoded feature layout: schema order, cyclic pairs expanded, quality last."""
    names: list[str] = []
    for v in SCHEMA:
        if v.kind is Kind.CYCLIC and cyclic:
            names += [f"{v.id}_sin", f"{v.id}_cos"]
        else:
            names.append(v.id)
    names.append(QUALITY_FEATURE)
    return tuple(names)


def feature_slots(cyclic: bool = True) -> dict[str, tuple[int, ...]]:
    """variable id -> feature indices it occupies (quality included)."""
    slots: dict[str, tuple[int, ...]] = {}
    i = 0
    for v in SCHEMA:
        width = 2 if (v.kind is Kind.CYCLIC and cyclic) else 1
        slots[v.id] = tuple(range(i, i + width))
        i += width
    slots[QUALITY_FEATURE] = (i,)
    return slots
