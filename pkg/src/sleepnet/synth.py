"""Synthetic diary populations with a known ground-truth quality function.

The stand-in for proprietary diary data. Behaviour marginals follow the
published descriptive statistics (alcohol about 4.6% of days, total sleep
time around 418 min, report counts with P10/P50/P90 near 3/9/34), and
every reported quality is produced by an ``OracleModel`` we keep. That
makes the recommenders scorable counterfactually: we can ask the oracle
what a user's night would have been under any advised behaviour.

Oracle, for the anchor record d of a user u::

    q(u, d) = clamp( bias_u + Σ_{ℓ=0..9} decay^ℓ · day_score(u, d-ℓ), -2, +2 )
    day_score = Σ_v w_v(u)·s_v + Σ_(a,b) w_ab·s_a·s_b

where ``s_v`` is the scaled diary value (binary 0/1, minutes centred and
per hour, missing contributes 0) and ``w_v(u)`` is the population weight
plus the user's trait offset. Lags count diary records, the same way the
network's window does. The stored label is ``round(clamp(q + noise))``
with the noise drawn from its own seeded stream, so the labels can be
replayed exactly.

Replace this module with a real diary export; nothing downstream changes.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from functools import cached_property
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from sleepnet_core.protocol import QUALITY_MAX, QUALITY_MIN, WINDOW_STEPS
from sleepnet.diary import DiaryRecord, UserHistory
from sleepnet.schema import BINARY_IDS, BY_ID, DATE_IDS, VARIABLE_IDS, Kind

# Per-day marginal rates of the binary diary variables.
BINARY_RATES: dict[str, float] = {
    "no_sleep": 0.006,
    "note_written": 0.181,
    "alcohol": 0.046,
    "caffeine": 0.014,
    "exercise": 0.020,
    "lights_on": 0.012,
    "nicotine": 0.004,
    "noise": 0.024,
    "pain": 0.029,
    "slept_with_partner": 0.031,
    "sleeping_pills": 0.042,
    "temperature": 0.033,
}

# variable -> (reference value, units per step of the scaled value)
ORACLE_SCALING: dict[str, tuple[float, float]] = {
    **{v: (0.0, 1.0) for v in BINARY_IDS},
    "bed_before_lights_out": (15.0, 60.0),
    "sleep_onset_latency": (20.0, 60.0),
    "awake_minutes": (30.0, 60.0),
    "total_sleep_time": (420.0, 60.0),
    "total_time_in_bed": (30.0, 60.0),
    "times_awake": (2.0, 1.0),
}

# Planted effects. Nicotine is the planted null; the partner effect is
# personal (sign drawn per user) so population averages hide it.
DEFAULT_WEIGHTS: dict[str, float] = {
    "no_sleep": -1.5,
    "note_written": 0.0,
    "alcohol": -0.6,
    "caffeine": -0.5,
    "exercise": 0.5,
    "lights_on": -0.7,
    "nicotine": 0.0,
    "noise": -0.6,
    "pain": -0.8,
    "slept_with_partner": 0.0,
    "sleeping_pills": 0.5,
    "temperature": -0.3,
    "bed_before_lights_out": -0.4,
    "sleep_onset_latency": -0.6,
    "awake_minutes": -0.5,
    "total_sleep_time": 0.4,
    "total_time_in_bed": -0.2,
    "times_awake": -0.1,
}

DEFAULT_INTERACTIONS: tuple[tuple[str, str, float], ...] = (
    ("alcohol", "sleeping_pills", -1.0),
    ("noise", "lights_on", -0.5),
)

ORACLE_GRID_MINUTES: tuple[float, ...] = tuple(float(m) for m in range(0, 121, 15))


# ── Config ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 2000
    seed: int = 0
    missing_rate: float = 0.05
    # Lognormal report counts: median 9, sigma fitted to P10/P90 of 3/34.
    report_median: float = 9.0
    report_sigma: float = 0.95
    report_max: int = 100
    noise_scale: float = 0.4
    # Beta concentration of per-user habit propensities (lower = more habitual).
    propensity_concentration: float = 5.0
    start: date = date(2016, 1, 1)
    span_days: int = 900
    rate_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_users < 1:
            raise ValueError(f"n_users must be >= 1, got {self.n_users}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        unknown = set(self.rate_overrides) - set(BINARY_IDS)
        if unknown:
            raise ValueError(f"rate_overrides for non-binary variables: {sorted(unknown)}")

    def binary_rate(self, var: str) -> float:
        return float(self.rate_overrides.get(var, BINARY_RATES[var]))


# ── Oracle ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class OracleModel:
    weights: Mapping[str, float]
    interactions: tuple[tuple[str, str, float], ...]
    traits: Mapping[str, Mapping[str, float]]
    noise_scale: float = 0.4
    lag_decay: float = 0.5
    seed: int = 0
    scaling: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(ORACLE_SCALING))

    @classmethod
    def single_effect(cls, variable: str, weight: float, **kw) -> "OracleModel":
        """An oracle that only responds to one variable."""
        return cls(weights={variable: weight}, interactions=(), traits={}, **kw)

    def weight(self, user_id: str, variable: str) -> float:
        return float(self.weights.get(variable, 0.0)) + float(
            self.traits.get(user_id, {}).get(variable, 0.0)
        )

    def bias(self, user_id: str) -> float:
        return float(self.traits.get(user_id, {}).get("bias", 0.0))

    @cached_property
    def variables(self) -> tuple[str, ...]:
        used = set(self.weights) | {v for a, b, _ in self.interactions for v in (a, b)}
        for t in self.traits.values():
            used |= set(t) - {"bias"}
        return tuple(v for v in VARIABLE_IDS if v in used)

    # -- serialization --

    def to_dict(self) -> dict:
        return {
            "weights": {k: float(v) for k, v in self.weights.items()},
            "interactions": [[a, b, float(w)] for a, b, w in self.interactions],
            "traits": {u: {k: float(v) for k, v in t.items()} for u, t in self.traits.items()},
            "noise_scale": self.noise_scale,
            "lag_decay": self.lag_decay,
            "seed": self.seed,
            "scaling": {k: [float(r), float(s)] for k, (r, s) in self.scaling.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OracleModel":
        return cls(
            weights=dict(d["weights"]),
            interactions=tuple((a, b, float(w)) for a, b, w in d["interactions"]),
            traits={u: dict(t) for u, t in d["traits"].items()},
            noise_scale=float(d["noise_scale"]),
            lag_decay=float(d["lag_decay"]),
            seed=int(d["seed"]),
            scaling={k: (float(r), float(s)) for k, (r, s) in d["scaling"].items()},
        )


def save_oracle(oracle: OracleModel, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(oracle.to_dict(), sort_keys=True, indent=1) + "\n")
    return path


def load_oracle(path: Path | str) -> OracleModel:
    return OracleModel.from_dict(json.loads(Path(path).read_text()))


def _scaled(oracle: OracleModel, variable: str, value: Optional[float]) -> float:
    if value is None:
        return 0.0
    ref, per = oracle.scaling.get(variable, (0.0, 1.0))
    return (float(value) - ref) / per


def _day_scores(oracle: OracleModel, user_id: str,
                columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Vectorized day score. ``columns`` maps variable -> scaled values (K,)."""
    n = len(next(iter(columns.values())))
    score = np.zeros(n)
    for v in oracle.variables:
        w = oracle.weight(user_id, v)
        if w and v in columns:
            score += w * columns[v]
    for a, b, w in oracle.interactions:
        if a in columns and b in columns:
            score += w * columns[a] * columns[b]
    return score


def _record_columns(oracle: OracleModel,
                    records: Sequence[DiaryRecord]) -> dict[str, np.ndarray]:
    return {
        v: np.array([_scaled(oracle, v, r.values.get(v)) for r in records])
        for v in oracle.variables
    }


def _clamp(q: np.ndarray | float) -> np.ndarray | float:
    return np.clip(q, QUALITY_MIN, QUALITY_MAX)


def oracle_day_qualities(oracle: OracleModel, history: UserHistory) -> np.ndarray:
    """Pre-noise quality of every record, each taken as the anchor day."""
    scores = _day_scores(oracle, history.user_id, _record_columns(oracle, history.records))
    kernel = oracle.lag_decay ** np.arange(WINDOW_STEPS)
    # q[d] = Σ_ℓ kernel[ℓ]·scores[d-ℓ]
    q = np.convolve(scores, kernel)[: len(scores)]
    return _clamp(oracle.bias(history.user_id) + q)


def _past_contribution(oracle: OracleModel, history: UserHistory) -> float:
    """Bias plus the lagged terms of every day except the anchor."""
    past = history.records[:-1][-(WINDOW_STEPS - 1):]
    total = oracle.bias(history.user_id)
    if past:
        scores = _day_scores(oracle, history.user_id, _record_columns(oracle, past))
        lags = np.arange(len(past), 0, -1)
        total += float(np.sum(oracle.lag_decay ** lags * scores))
    return total


def oracle_quality_batch(oracle: OracleModel, history: UserHistory,
                         variables: Sequence[str], actions: np.ndarray) -> np.ndarray:
    """Oracle quality under K candidate last-day assignments.

    ``actions`` is (K, len(variables)) in diary units; NaN keeps the
    user's recorded value for that cell.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    last = history.last
    columns: dict[str, np.ndarray] = {}
    for v in oracle.variables:
        columns[v] = np.full(actions.shape[0], _scaled(oracle, v, last.values.get(v)))
    for j, v in enumerate(variables):
        if v not in columns:
            continue
        ref, per = oracle.scaling.get(v, (0.0, 1.0))
        chosen = actions[:, j]
        columns[v] = np.where(np.isnan(chosen), columns[v], (chosen - ref) / per)
    return _clamp(_past_contribution(oracle, history) + _day_scores(oracle, history.user_id, columns))


def oracle_quality(oracle: OracleModel, history: UserHistory,
                   action: Optional[Mapping[str, Optional[float]]] = None) -> float:
    """Ground-truth quality of the last day with ``action`` substituted."""
    action = dict(action or {})
    variables = tuple(action)
    row = np.array([[np.nan if action[v] is None else float(action[v]) for v in variables]])
    if not variables:
        row = np.zeros((1, 0))
    return float(oracle_quality_batch(oracle, history, variables, row)[0])


def action_grid(variables: Sequence[str]) -> np.ndarray:
    """Every assignment, lexicographic: binaries over {0,1}, minutes over a 15-min grid."""
    axes = []
    for v in variables:
        if BY_ID[v].kind is Kind.BINARY:
            axes.append((0.0, 1.0))
        else:
            axes.append(ORACLE_GRID_MINUTES)
    return np.array(list(itertools.product(*axes)), dtype=np.float64).reshape(-1, len(variables))


def oracle_best_action(oracle: OracleModel, history: UserHistory,
                       variables: Sequence[str]) -> dict[str, float]:
    """Brute-force argmax of ``oracle_quality``; ties go to the lexicographically first."""
    grid = action_grid(variables)
    q = oracle_quality_batch(oracle, history, variables, grid)
    best = grid[int(np.argmax(q))]
    return {v: float(x) for v, x in zip(variables, best)}


# ── Population ───────────────────────────────────────────────────────────

def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    behaviour, missing, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(behaviour), np.random.default_rng(missing),
            np.random.default_rng(noise))


def default_oracle(user_ids: Sequence[str], rng: np.random.Generator,
                   noise_scale: float = 0.4, seed: int = 0) -> OracleModel:
    traits = {}
    for uid in user_ids:
        traits[uid] = {
            "bias": float(rng.normal(-0.2, 0.5)),
            "slept_with_partner": float(rng.choice((-0.6, 0.6))),
            "caffeine": float(rng.normal(0.0, 0.2)),
        }
    return OracleModel(
        weights=dict(DEFAULT_WEIGHTS),
        interactions=DEFAULT_INTERACTIONS,
        traits=traits,
        noise_scale=noise_scale,
        seed=seed,
    )


def _user_days(config: GeneratorConfig, rng: np.random.Generator,
               user_id: str) -> list[dict[str, Optional[float]]]:
    n = int(np.clip(round(rng.lognormal(np.log(config.report_median), config.report_sigma)),
                    1, config.report_max))
    start = config.start + timedelta(days=int(rng.integers(0, config.span_days)))
    gaps = np.concatenate(([0], rng.geometric(0.75, size=n - 1)))
    offsets = np.cumsum(gaps)

    kappa = config.propensity_concentration
    propensity = {}
    for v in BINARY_IDS:
        r = config.binary_rate(v)
        propensity[v] = rng.beta(r * kappa, (1.0 - r) * kappa) if 0.0 < r < 1.0 else r

    binaries = {v: (rng.random(n) < propensity[v]).astype(float) for v in BINARY_IDS}
    bed_hour = np.mod(np.round(22.4 + rng.normal(0.0, 1.6, n)), 24)
    bed_minute = rng.choice((0.0, 15.0, 30.0, 45.0), size=n, p=(0.35, 0.2, 0.25, 0.2))
    before_lights = np.minimum(np.round(rng.exponential(24.1, n)), 240.0)
    latency = np.minimum(np.round(rng.exponential(27.6, n)), 300.0)
    awake = np.minimum(np.round(rng.exponential(30.5, n)), 300.0)
    tst = np.clip(np.round(rng.normal(418.0, 95.0, n)), 0.0, 720.0)
    in_bed = np.minimum(np.round(rng.exponential(31.0, n)), 300.0)
    times_awake = rng.poisson(2.0, n).astype(float)
    tst = np.where(binaries["no_sleep"] == 1.0, 0.0, tst)

    days = []
    for i in range(n):
        day = start + timedelta(days=int(offsets[i]))
        values: dict[str, Optional[float]] = {
            "date_day": float(day.day),
            "date_month": float(day.month),
            "date_year": float(day.year),
            "bed_hour": float(bed_hour[i]),
            "bed_minute": float(bed_minute[i]),
            "bed_before_lights_out": float(before_lights[i]),
            "sleep_onset_latency": float(latency[i]),
            "awake_minutes": float(awake[i]),
            "total_sleep_time": float(tst[i]),
            "total_time_in_bed": float(in_bed[i]),
            "times_awake": float(times_awake[i]),
        }
        for v in BINARY_IDS:
            values[v] = float(binaries[v][i])
        values["__date__"] = day  # type: ignore[assignment]
        days.append(values)
    return days


def _mask(values: dict, rng: np.random.Generator, rate: float) -> dict[str, Optional[float]]:
    maskable = [v for v in VARIABLE_IDS if v not in DATE_IDS]
    hits = rng.random(len(maskable)) < rate
    out = dict(values)
    for v, hit in zip(maskable, hits):
        if hit:
            out[v] = None
    return out


def replay_label_noise(config: GeneratorConfig, n_records: int) -> np.ndarray:
    """The label noise stream, one draw per record in population order."""
    _, _, noise_rng = _streams(config.seed)
    return noise_rng.normal(0.0, config.noise_scale, size=n_records)


def generate_population(config: GeneratorConfig,
                        oracle: Optional[OracleModel] = None) -> tuple[list[UserHistory], OracleModel]:
    """Seeded population and its oracle. Pure function of (config, oracle)."""
    behaviour_rng, missing_rng, _ = _streams(config.seed)
    user_ids = [f"u{i:05d}" for i in range(1, config.n_users + 1)]
    if oracle is None:
        oracle = default_oracle(user_ids, behaviour_rng, config.noise_scale, config.seed)

    unlabeled: list[list[DiaryRecord]] = []
    for uid in user_ids:
        records = []
        for raw in _user_days(config, behaviour_rng, uid):
            day = raw.pop("__date__")
            values = _mask(raw, missing_rng, config.missing_rate)
            records.append(DiaryRecord(uid, day, values, None))
        unlabeled.append(records)

    n_records = sum(len(r) for r in unlabeled)
    noise = replay_label_noise(config, n_records)
    quality_missing = missing_rng.random(n_records) < config.missing_rate

    histories = []
    k = 0
    for uid, records in zip(user_ids, unlabeled):
        q = oracle_day_qualities(oracle, UserHistory(uid, tuple(records)))
        labeled = []
        for i, r in enumerate(records):
            label = None if quality_missing[k] else int(np.rint(_clamp(q[i] + noise[k])))
            labeled.append(DiaryRecord(uid, r.date, r.values, label))
            k += 1
        histories.append(UserHistory(uid, tuple(labeled)))

    print(f"  synth: {len(histories)} users, {n_records} records, seed={config.seed}")
    return histories, oracle
