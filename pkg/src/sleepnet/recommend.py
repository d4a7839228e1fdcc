"""Behaviour recommenders for a user's last day on record.

Four ways to produce a Recommendation, i.e. a value per advisable
variable:

    network gradient   ascent of the network's predicted quality over the
                       anchor-day advisable inputs, in z-space
    linear gradient    the same walk on the stepwise model, whose gradient
                       is constant, so the step to +2 is closed-form
    best neighbourhood the anchor-day behaviour of the user whose 100
                       nearest neighbours sleep best, broadcast to everyone
    best day           the user's own behaviour on their best-rated day

Gradient walks stop once the model predicts +2: a linear model would
otherwise walk forever. Binary variables are relaxed to continuous
z-values while walking and thresholded at 0.5 (in diary units) at the
end. Numeric advice is clamped to [0, 720] minutes. Only anchor-day
advisable coordinates ever move.

``count_ignored`` is the follow rule every evaluation buckets by: a
binary mismatch, or numeric advice missed by more than 30 minutes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

from sleepnet_core.errors import SleepnetError
from sleepnet_core.protocol import (
    BINARY_THRESHOLD,
    FOLLOW_THRESHOLD_MINUTES,
    MINUTES_MAX,
    NEIGHBOURHOOD_CANDIDATES,
    NEIGHBOURHOOD_SIZE,
    QUALITY_MAX,
    Z_BOX,
)
from sleepnet import autodiff as ad
from sleepnet.diary import (
    DiaryRecord,
    StandardizationStats,
    UserHistory,
    WindowBatch,
    encode_record,
)
from sleepnet.linear import LinearBaseline
from sleepnet.qnet import QualityModel
from sleepnet.schema import (
    BY_ID,
    IN_BED_LIGHTS_ON,
    LIGHTS_OFF_TO_ASLEEP,
    QUALITY_FEATURE,
    Kind,
    feature_names,
    feature_slots,
)


class RecommendError(SleepnetError):
    """A recommender could not run on the given data."""


class PopulationTooSmall(RecommendError):
    pass


class NoQualityReported(RecommendError):
    pass


class ZeroGradient(UserWarning):
    """No advisable column survives in the model; current behaviour is returned."""


# ── Advisable variables ──────────────────────────────────────────────────

BASE_ADVISABLE: tuple[str, ...] = (
    "caffeine", "noise", "nicotine", "lights_on", "slept_with_partner", "alcohol",
    LIGHTS_OFF_TO_ASLEEP, IN_BED_LIGHTS_ON,
)

ADVISABLE_VARIANTS = ("standard", "exercise", "pills", "no-noise")


@dataclass(frozen=True)
class AdvisableSet:
    variables: tuple[str, ...] = BASE_ADVISABLE
    name: str = "standard"

    @classmethod
    def build(cls, exercise: bool = False, pills: bool = False, noise: bool = True,
              name: Optional[str] = None) -> "AdvisableSet":
        vs = [v for v in BASE_ADVISABLE if noise or v != "noise"]
        if exercise:
            vs.append("exercise")
        if pills:
            vs.append("sleeping_pills")
        return cls(tuple(vs), name or "custom")

    @classmethod
    def variant(cls, name: str) -> "AdvisableSet":
        """Named sets: standard, exercise (+exercise), pills (+sleeping pills), no-noise."""
        options = {
            "standard": {},
            "exercise": {"exercise": True},
            "pills": {"pills": True},
            "no-noise": {"noise": False},
        }
        if name not in options:
            raise ValueError(f"unknown advisable variant {name!r}; known: {list(options)}")
        return cls.build(name=name, **options[name])

    @property
    def binary(self) -> tuple[str, ...]:
        return tuple(v for v in self.variables if BY_ID[v].kind is Kind.BINARY)

    @property
    def numeric(self) -> tuple[str, ...]:
        return tuple(v for v in self.variables if BY_ID[v].kind is not Kind.BINARY)

    def is_binary(self, variable: str) -> bool:
        return BY_ID[variable].kind is Kind.BINARY


@dataclass(frozen=True)
class Recommendation:
    """Advice for one user's anchor day. A None value means no advice on that variable."""
    user_id: str
    values: Mapping[str, Optional[float]]
    kind: str
    iterations: int = 0
    predicted: Optional[float] = None
    trace: tuple[float, ...] = field(default=(), repr=False)
    zero_gradient: bool = False
    source_user: Optional[str] = None

    def for_user(self, user_id: str) -> "Recommendation":
        """The same advice addressed to another user (broadcast or shuffle)."""
        return Recommendation(user_id, dict(self.values), self.kind, self.iterations,
                              self.predicted, self.trace, self.zero_gradient,
                              self.source_user or self.user_id)


@dataclass(frozen=True)
class GradientAscentConfig:
    # z-units per accepted step of the network ascent
    step: float = 0.1
    max_iterations: int = 500
    box: float = Z_BOX
    # predictions within this distance of +2 count as having reached it
    target_tolerance: float = 1e-3
    # rejected steps are halved down to this length
    min_step: float = 1e-3

    def __post_init__(self) -> None:
        if self.step <= 0 or self.max_iterations < 1:
            raise ValueError("step must be > 0 and max_iterations >= 1")
        if not 0 < self.min_step <= self.step:
            raise ValueError(f"min_step must be in (0, step], got {self.min_step}")


def _finish(variable: str, value: float) -> float:
    if BY_ID[variable].kind is Kind.BINARY:
        return 1.0 if value >= BINARY_THRESHOLD else 0.0
    return float(np.clip(value, 0.0, MINUTES_MAX))


def current_behaviour(history: UserHistory, advisable: AdvisableSet) -> dict[str, Optional[float]]:
    return {v: history.last.values.get(v) for v in advisable.variables}


# ── Network gradient ─────────────────────────────────────────────────────

def _advisable_features(stats: StandardizationStats, advisable: AdvisableSet) -> list[int]:
    slots = feature_slots(stats.cyclic)
    return [slots[v][0] for v in advisable.variables]


def recommend_gradient_nn(model: QualityModel, batch: WindowBatch,
                          advisable: AdvisableSet = AdvisableSet(),
                          cfg: GradientAscentConfig = GradientAscentConfig(),
                          require_trained: bool = True) -> list[Recommendation]:
    """Batched gradient ascent over anchor-day advisable z-coordinates.

    A missing advisable input starts at z = 0 (the population mean) with its
    miss flag cleared. Each step moves ``cfg.step`` z-units along the
    gradient, after dropping the components that push against the z-box
    and those of zero-variance features (their value is pinned to the
    mean). A step is accepted only if predicted quality rises; a rejected
    step is halved and retried, and a user stops once the step falls below
    ``cfg.min_step`` or the projected gradient vanishes.
    """
    if require_trained:
        model.require_trained()
    n = len(batch)
    if n == 0:
        return []
    stats = model.stats
    feats = _advisable_features(stats, advisable)
    movable = ~np.asarray(stats.zero_variance, dtype=bool)[feats]
    T = batch.x.shape[1]
    last = T - 1

    x = batch.x.copy()
    miss = batch.miss.copy()
    miss[:, last, feats] = 0.0
    start = x[:, last, feats].copy()
    lo = np.minimum(-cfg.box, start)
    hi = np.maximum(cfg.box, start)

    def evaluate(rows: np.ndarray, xr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        leaf = ad.Node(xr)
        y, _, _ = model.forward_nodes(leaf, miss[rows])
        ad.backward(ad.sum_(y))
        return y.value.copy(), leaf.grad[:, last, feats]

    def direction(rows: np.ndarray, z: np.ndarray, g: np.ndarray) -> np.ndarray:
        g = np.where(movable, g, 0.0)
        g = np.where((z <= lo[rows]) & (g < 0), 0.0, g)
        g = np.where((z >= hi[rows]) & (g > 0), 0.0, g)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)

    y, g = evaluate(np.arange(n), x)
    step = np.full(n, cfg.step)
    iterations = np.zeros(n, dtype=int)
    traces: list[list[float]] = [[float(v)] for v in y]
    active = y < QUALITY_MAX - cfg.target_tolerance

    for _ in range(cfg.max_iterations):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        z_old = x[rows][:, last, feats]
        d = direction(rows, z_old, g[rows])
        z_new = np.clip(z_old + step[rows, None] * d, lo[rows], hi[rows])
        moved = np.any(z_new != z_old, axis=1)
        active[rows[~moved]] = False
        rows, z_new = rows[moved], z_new[moved]
        if rows.size == 0:
            break
        xr = x[rows].copy()
        xr[:, last, feats] = z_new
        y_new, g_new = evaluate(rows, xr)
        better = y_new > y[rows]

        worse = rows[~better]
        step[worse] *= 0.5
        active[worse[step[worse] < cfg.min_step]] = False

        acc = rows[better]
        x[acc] = xr[better]
        y[acc] = y_new[better]
        g[acc] = g_new[better]
        iterations[acc] += 1
        for i, v in zip(acc, y_new[better]):
            traces[i].append(float(v))
        active[acc[y[acc] >= QUALITY_MAX - cfg.target_tolerance]] = False

    recs = []
    for i in range(n):
        values = {}
        for v, f, z in zip(advisable.variables, feats, x[i, last, feats]):
            values[v] = _finish(v, float(stats.to_value(f, z)))
        recs.append(Recommendation(batch.user_ids[i], values, "nn", int(iterations[i]),
                                   float(y[i]), tuple(traces[i])))
    return recs


# ── Linear gradient ──────────────────────────────────────────────────────

def recommend_gradient_linear(baseline: LinearBaseline, history: UserHistory,
                              stats: StandardizationStats,
                              advisable: AdvisableSet = AdvisableSet(),
                              cfg: GradientAscentConfig = GradientAscentConfig()) -> Recommendation:
    """Closed-form walk along the linear model's constant gradient to exactly +2.

    The walk happens in z-space (``stats``). Coordinates that would leave
    the z-box are clamped and the step is re-solved over the rest.
    """
    slots = feature_slots(stats.cyclic)
    feats = [slots[v][0] for v in advisable.variables]
    mu = np.array([stats.mean[f] for f in feats])
    sd = np.array([1.0 if stats.zero_variance[f] else stats.std[f] for f in feats])

    filled = {v: (history.last.values.get(v) if history.last.values.get(v) is not None
                  else float(m)) for v, m in zip(advisable.variables, mu)}
    start_history = history.with_last_day(filled)
    p0 = float(baseline.predict_histories([start_history])[0])
    raw0 = np.array([filled[v] for v in advisable.variables])
    z0 = (raw0 - mu) / sd
    g = baseline.last_day_slopes(start_history, advisable.variables) * sd

    if not np.any(g):
        warnings.warn(
            f"user {history.user_id}: no advisable column retained by the linear model; "
            f"returning current behaviour", ZeroGradient,
        )
        return Recommendation(history.user_id, current_behaviour(history, advisable), "linear",
                              0, p0, (p0,), zero_gradient=True)

    z = z0.copy()
    need = QUALITY_MAX - p0
    if need > 0:
        lo = np.minimum(-cfg.box, z0)
        hi = np.maximum(cfg.box, z0)
        free = g != 0
        fixed_gain = 0.0
        while free.any():
            t = (need - fixed_gain) / float(np.sum(g[free] ** 2))
            z[free] = z0[free] + t * g[free]
            over = free & ((z < lo) | (z > hi))
            if not over.any():
                break
            z[over] = np.clip(z[over], lo[over], hi[over])
            free &= ~over
            fixed_gain = float(np.sum(g[~free & (g != 0)] * (z - z0)[~free & (g != 0)]))
        predicted = p0 + float(g @ (z - z0))
    else:
        predicted = p0

    values = {v: _finish(v, float(m + s * zz))
              for v, m, s, zz in zip(advisable.variables, mu, sd, z)}
    return Recommendation(history.user_id, values, "linear", int(need > 0), predicted,
                          (p0, predicted))


# ── Best neighbourhood ───────────────────────────────────────────────────

@dataclass(frozen=True)
class NeighbourhoodResult:
    recommendation: Recommendation
    best_user: str
    neighbourhood_quality: float
    candidate_qualities: Mapping[str, float]


def last_day_features(histories: Sequence[UserHistory], cyclic: bool = True) -> np.ndarray:
    """z-scored anchor-day behaviour (quality excluded); missing -> 0."""
    names = feature_names(cyclic)
    keep = [i for i, n in enumerate(names) if n != QUALITY_FEATURE]
    rows, flags = [], []
    for h in histories:
        x, m = encode_record(h.last, cyclic=cyclic, anchor=True)
        rows.append(x[keep])
        flags.append(m[keep])
    X = np.array(rows)
    present = np.array(flags) == 0
    vals = np.where(present, X, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nan_to_num(np.nanmean(vals, axis=0))
        std = np.nan_to_num(np.nanstd(vals, axis=0))
    safe = np.where(std > 1e-12, std, 1.0)
    return np.where(present & (std > 1e-12), (X - mean) / safe, 0.0)


def recommend_best_neighbourhood(histories: Sequence[UserHistory],
                                 advisable: AdvisableSet = AdvisableSet(), seed: int = 0,
                                 n_candidates: int = NEIGHBOURHOOD_CANDIDATES,
                                 n_neighbours: int = NEIGHBOURHOOD_SIZE) -> NeighbourhoodResult:
    """Broadcast the anchor-day behaviour of the best-sleeping neighbourhood's centre.

    A neighbourhood is a candidate plus its nearest users (Euclidean over
    z-scored anchor-day behaviour, the candidate itself included at
    distance 0). Its quality is the mean reported anchor-day quality.
    Ties go to the smallest user_id.
    """
    n = len(histories)
    if n < n_candidates + n_neighbours:
        raise PopulationTooSmall(
            f"{n} users; best-neighbourhood needs at least {n_candidates + n_neighbours}"
        )
    Z = last_day_features(histories)
    rng = np.random.default_rng(seed)
    candidates = np.sort(rng.choice(n, size=n_candidates, replace=False))

    knn = NearestNeighbors(n_neighbors=n_neighbours, metric="euclidean")
    knn.fit(Z)
    _, idx = knn.kneighbors(Z[candidates])

    quality = np.array([np.nan if h.last.quality is None else float(h.last.quality)
                        for h in histories])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hood = np.nanmean(quality[idx], axis=1)
    if np.all(np.isnan(hood)):
        warnings.warn("no candidate neighbourhood has any reported quality")
        hood = np.zeros_like(hood)
    hood = np.where(np.isnan(hood), -np.inf, hood)

    top = hood.max()
    tied = [histories[c].user_id for c, q in zip(candidates, hood) if q == top]
    best_id = min(tied)
    best = next(h for h in histories if h.user_id == best_id)
    rec = Recommendation(best_id, current_behaviour(best, advisable), "neighbourhood",
                         predicted=float(top), source_user=best_id)
    return NeighbourhoodResult(
        rec, best_id, float(top),
        {histories[c].user_id: float(q) for c, q in zip(candidates, hood)},
    )


# ── Best day ─────────────────────────────────────────────────────────────

def best_day(history: UserHistory) -> DiaryRecord:
    """Highest reported quality; ties go to the most recent day."""
    rated = [r for r in history.records if r.quality is not None]
    if not rated:
        raise NoQualityReported(f"user {history.user_id!r} never reported a quality")
    return max(reversed(rated), key=lambda r: r.quality)


def recommend_best_day(history: UserHistory,
                       advisable: AdvisableSet = AdvisableSet()) -> Recommendation:
    day = best_day(history)
    values = {v: day.values.get(v) for v in advisable.variables}
    return Recommendation(history.user_id, values, "best_day", predicted=float(day.quality))


# ── Following ────────────────────────────────────────────────────────────

def is_ignored(variable: str, recommended: Optional[float], actual: Optional[float]) -> bool:
    if recommended is None or actual is None:
        return False
    if BY_ID[variable].kind is Kind.BINARY:
        return float(actual) != float(recommended)
    return abs(float(actual) - float(recommended)) > FOLLOW_THRESHOLD_MINUTES


def count_ignored(recommendation: Recommendation, actual: DiaryRecord | Mapping[str, Optional[float]],
                  advisable: Optional[AdvisableSet] = None) -> int:
    """How many advisable variables the actual behaviour ignored.

    Variables without advice or without a recorded actual value are skipped.
    """
    values = actual.values if isinstance(actual, DiaryRecord) else actual
    variables = advisable.variables if advisable is not None else tuple(recommendation.values)
    return sum(
        is_ignored(v, recommendation.values.get(v), values.get(v)) for v in variables
    )


def write_recommendations(recommendations: Mapping[str, Recommendation],
                          histories: Sequence[UserHistory], advisable: AdvisableSet,
                          path: Path | str) -> Path:
    """CSV: user_id, variable, recommended_value, actual_value, ignored."""
    rows = []
    for h in histories:
        rec = recommendations.get(h.user_id)
        if rec is None:
            continue
        for v in advisable.variables:
            r, a = rec.values.get(v), h.last.values.get(v)
            rows.append({
                "user_id": h.user_id,
                "variable": v,
                "recommended_value": np.nan if r is None else r,
                "actual_value": np.nan if a is None else a,
                "ignored": int(is_ignored(v, r, a)),
            })
    frame = pd.DataFrame(rows, columns=["user_id", "variable", "recommended_value",
                                        "actual_value", "ignored"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", float_format="%.6g", lineterminator="\n")
    return path
