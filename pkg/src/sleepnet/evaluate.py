"""Evaluating recommenders and explaining the quality network.

Effectiveness curves bucket users by how many recommendations their
actual anchor-day behaviour ignored, then average a quality score per
bucket. The score comes from one of three sources:

    reported            the user's own reported anchor-day quality
    oracle_actual       ground-truth quality of what the user actually did
    oracle_recommended  ground-truth quality had the user followed the advice

The oracle sources exist only for synthetic populations. Comparisons use
a two-sided Welch t-test throughout.

Explanations are derivatives of the predicted quality with respect to
the standardized inputs: first order by one backward pass, second order
by central differences of backward-pass gradients.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats as sstats

from sleepnet_core.errors import SleepnetError
from sleepnet_core.protocol import HESSIAN_STEP, WINDOW_STEPS
from sleepnet import autodiff as ad
from sleepnet.diary import StandardizationStats, UserHistory, WindowBatch, fit_standardization, labeled
from sleepnet.linear import LinearBaseline
from sleepnet.qnet import QualityModel
from sleepnet.recommend import (
    AdvisableSet,
    GradientAscentConfig,
    Recommendation,
    count_ignored,
    recommend_best_day,
    recommend_best_neighbourhood,
    recommend_gradient_linear,
    recommend_gradient_nn,
)
from sleepnet.schema import BINARY_IDS, feature_slots
from sleepnet.synth import OracleModel, oracle_quality

SOURCES = ("reported", "oracle_actual", "oracle_recommended")
RECOMMENDERS = ("nn", "linear", "neighbourhood", "best_day")


class EvaluationError(SleepnetError):
    """An evaluation had nothing (or too little) to work with."""


class NoUsers(EvaluationError):
    pass


class InsufficientSamples(EvaluationError):
    pass


class NoFullFollowers(EvaluationError):
    pass


class NoTestUsers(EvaluationError):
    pass


def _mean_se(values: np.ndarray) -> tuple[float, Optional[float]]:
    n = values.size
    if n == 0:
        return float("nan"), None
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else None
    return float(values.mean()), se


def welch_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Welch t-test. Identical samples give 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientSamples(f"Welch test needs >= 2 values per side, got {a.size} and {b.size}")
    if a.mean() == b.mean():
        return 1.0
    if a.var() == 0 and b.var() == 0:
        return 0.0
    return float(sstats.ttest_ind(a, b, equal_var=False).pvalue)


# ── Producing recommendations ────────────────────────────────────────────

def recommend_population(kind: str, histories: Sequence[UserHistory],
                         model: Optional[QualityModel] = None,
                         baseline: Optional[LinearBaseline] = None,
                         advisable: AdvisableSet = AdvisableSet(), seed: int = 0,
                         cfg: GradientAscentConfig = GradientAscentConfig(),
                         **neighbourhood) -> dict[str, Recommendation]:
    """One recommendation per user, keyed by user_id, in population order."""
    if kind == "nn":
        if model is None:
            raise ValueError("the nn recommender needs a trained model")
        recs = recommend_gradient_nn(model, model.batch(histories), advisable, cfg)
        return {r.user_id: r for r in recs}
    if kind == "linear":
        if baseline is None:
            raise ValueError("the linear recommender needs a fitted baseline")
        stats = fit_standardization(histories, cyclic=baseline.spec.cyclic)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = {h.user_id: recommend_gradient_linear(baseline, h, stats, advisable, cfg)
                   for h in histories}
        zero = sum(r.zero_gradient for r in out.values())
        if zero:
            warnings.warn(f"{zero} of {len(out)} linear recommendations hit a zero gradient"
                          f" ({len(caught)} warnings folded)")
        return out
    if kind == "neighbourhood":
        rec = recommend_best_neighbourhood(histories, advisable, seed, **neighbourhood).recommendation
        return {h.user_id: rec.for_user(h.user_id) for h in histories}
    if kind == "best_day":
        return {h.user_id: recommend_best_day(h, advisable)
                for h in histories if any(r.quality is not None for r in h.records)}
    raise ValueError(f"unknown recommender {kind!r}; known: {list(RECOMMENDERS)}")


# ── Effectiveness curves ─────────────────────────────────────────────────

@dataclass(frozen=True)
class Bucket:
    ignored: int
    scores: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @property
    def mean(self) -> float:
        return _mean_se(self.scores)[0]

    @property
    def se(self) -> Optional[float]:
        return _mean_se(self.scores)[1]


@dataclass(frozen=True)
class EffectivenessCurve:
    recommender: str
    source: str
    user_ids: tuple[str, ...]
    ignored: np.ndarray
    scores: np.ndarray

    @property
    def buckets(self) -> tuple[Bucket, ...]:
        return tuple(Bucket(int(k), self.scores[self.ignored == k])
                     for k in np.unique(self.ignored))

    def bucket(self, ignored: int) -> Bucket:
        return Bucket(ignored, self.scores[self.ignored == ignored])

    @property
    def n_users(self) -> int:
        return int(self.scores.size)

    @property
    def mean(self) -> float:
        return float(self.scores.mean())

    def spearman(self) -> tuple[Optional[float], Optional[float]]:
        """Rank correlation of ignored count against score; None when either is constant."""
        if np.ptp(self.ignored) == 0 or np.ptp(self.scores) == 0:
            return None, None
        res = sstats.spearmanr(self.ignored, self.scores)
        return float(res.statistic), float(res.pvalue)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"recommender": self.recommender, "source": self.source,
                 "ignored": b.ignored, "n": b.n, "mean": b.mean,
                 "se": np.nan if b.se is None else b.se} for b in self.buckets]
        return pd.DataFrame(rows, columns=["recommender", "source", "ignored", "n", "mean", "se"])

    def summary(self) -> dict:
        rho, p = self.spearman()
        return {
            "recommender": self.recommender,
            "source": self.source,
            "n_users": self.n_users,
            "mean": self.mean,
            "spearman_rho": rho,
            "spearman_p": p,
            "buckets": [{"ignored": b.ignored, "n": b.n, "mean": b.mean, "se": b.se}
                        for b in self.buckets],
        }


def score_user(history: UserHistory, recommendation: Recommendation, source: str,
               oracle: Optional[OracleModel] = None) -> Optional[float]:
    if source == "reported":
        q = history.last.quality
        return None if q is None else float(q)
    if source not in SOURCES:
        raise ValueError(f"unknown score source {source!r}; known: {list(SOURCES)}")
    if oracle is None:
        raise ValueError(f"score source {source!r} needs the generator's oracle")
    if source == "oracle_actual":
        return oracle_quality(oracle, history)
    return oracle_quality(oracle, history, recommendation.values)


def effectiveness_curve(recommendations: Mapping[str, Recommendation],
                        histories: Sequence[UserHistory],
                        advisable: AdvisableSet = AdvisableSet(),
                        source: str = "reported",
                        oracle: Optional[OracleModel] = None,
                        recommender: Optional[str] = None) -> EffectivenessCurve:
    """Score every user with a recommendation and a usable score, bucketed by ignored count."""
    ids, ignored, scores = [], [], []
    for h in histories:
        rec = recommendations.get(h.user_id)
        if rec is None:
            continue
        s = score_user(h, rec, source, oracle)
        if s is None:
            continue
        ids.append(h.user_id)
        ignored.append(count_ignored(rec, h.last, advisable))
        scores.append(s)
    if not ids:
        raise NoUsers(f"no user has both a recommendation and a {source} score")
    name = recommender or next(iter(recommendations.values())).kind
    return EffectivenessCurve(name, source, tuple(ids), np.array(ignored, dtype=int),
                              np.array(scores, dtype=np.float64))


def compare_recommenders(a: EffectivenessCurve, b: EffectivenessCurve,
                         bucket: Optional[int] = 0) -> float:
    """Welch p-value between one bucket of each curve (``bucket=None``: all users)."""
    sa = a.scores if bucket is None else a.bucket(bucket).scores
    sb = b.scores if bucket is None else b.bucket(bucket).scores
    return welch_p_value(sa, sb)


# ── Shuffle test ─────────────────────────────────────────────────────────

def derangement(n: int, seed: int) -> np.ndarray:
    """Sattolo's algorithm: a uniformly random single cycle, so no index is fixed."""
    if n < 2:
        raise InsufficientSamples(f"a derangement needs at least 2 users, got {n}")
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass(frozen=True)
class ShuffleResult:
    before: EffectivenessCurve
    after: EffectivenessCurve
    permutation: np.ndarray = field(repr=False)

    def p_value(self, bucket: Optional[int] = 0) -> Optional[float]:
        try:
            return compare_recommenders(self.before, self.after, bucket)
        except InsufficientSamples:
            return None

    def summary(self) -> dict:
        return {
            "before": self.before.summary(),
            "after": self.after.summary(),
            "p_bucket0": self.p_value(0),
            "p_all": self.p_value(None),
        }


def shuffle_recommendations(recommendations: Mapping[str, Recommendation],
                            seed: int) -> tuple[dict[str, Recommendation], np.ndarray]:
    ids = list(recommendations)
    perm = derangement(len(ids), seed)
    return {uid: recommendations[ids[p]].for_user(uid) for uid, p in zip(ids, perm)}, perm


def shuffle_test(recommendations: Mapping[str, Recommendation],
                 histories: Sequence[UserHistory], seed: int = 0,
                 advisable: AdvisableSet = AdvisableSet(), source: str = "reported",
                 oracle: Optional[OracleModel] = None) -> ShuffleResult:
    """Curves before and after handing every user someone else's advice."""
    shuffled, perm = shuffle_recommendations(recommendations, seed)
    name = next(iter(recommendations.values())).kind
    before = effectiveness_curve(recommendations, histories, advisable, source, oracle, name)
    after = effectiveness_curve(shuffled, histories, advisable, source, oracle, name + "_shuffled")
    return ShuffleResult(before, after, perm)


# ── Flip test ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FlipArm:
    variable: str
    scores: np.ndarray = field(repr=False)
    p_value: Optional[float]

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @property
    def mean(self) -> float:
        return _mean_se(self.scores)[0]

    @property
    def se(self) -> Optional[float]:
        return _mean_se(self.scores)[1]


@dataclass(frozen=True)
class FlipResult:
    mode: str
    arms: tuple[FlipArm, ...]

    def arm(self, variable: str) -> FlipArm:
        for a in self.arms:
            if a.variable == variable:
                return a
        raise KeyError(variable)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"variable": a.variable, "n": a.n, "mean": a.mean,
                 "se": np.nan if a.se is None else a.se,
                 "p_value": np.nan if a.p_value is None else a.p_value} for a in self.arms]
        return pd.DataFrame(rows, columns=["variable", "n", "mean", "se", "p_value"])


def _flipped(rec: Recommendation, variable: str) -> Recommendation:
    values = dict(rec.values)
    values[variable] = 1.0 - float(values[variable])
    return Recommendation(rec.user_id, values, rec.kind, rec.iterations, rec.predicted,
                          rec.trace, rec.zero_gradient, rec.source_user)


def _safe_p(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    try:
        return welch_p_value(a, b)
    except InsufficientSamples:
        return None


def flip_test(recommendations: Mapping[str, Recommendation],
              histories: Sequence[UserHistory],
              advisable: AdvisableSet = AdvisableSet(),
              oracle: Optional[OracleModel] = None) -> FlipResult:
    """Switch one binary recommendation at a time and re-score.

    With an oracle, the full followers of the original advice are scored
    on the advice with one variable inverted (counterfactual). Without
    one, each arm is the reported quality of the users who happened to
    follow the switched advice completely (observational). The ``none``
    arm is the unswitched advice in both modes.
    """
    by_id = {h.user_id: h for h in histories}
    followers = [
        (by_id[uid], rec) for uid, rec in recommendations.items()
        if uid in by_id and count_ignored(rec, by_id[uid].last, advisable) == 0
    ]
    variables = [v for v in advisable.binary
                 if any(rec.values.get(v) is not None for rec in recommendations.values())]

    if oracle is not None:
        if not followers:
            raise NoFullFollowers("no user followed every recommendation")
        base = np.array([oracle_quality(oracle, h, r.values) for h, r in followers])
        arms = [FlipArm("none", base, 1.0 if base.size >= 2 else None)]
        for v in variables:
            scores = np.array([
                oracle_quality(oracle, h, _flipped(r, v).values if r.values.get(v) is not None
                               else r.values)
                for h, r in followers
            ])
            arms.append(FlipArm(v, scores, _safe_p(scores, base)))
        return FlipResult("oracle", tuple(arms))

    base = np.array([float(h.last.quality) for h, _ in followers if h.last.quality is not None])
    if base.size == 0:
        raise NoFullFollowers("no full follower reported a quality")
    arms = [FlipArm("none", base, 1.0 if base.size >= 2 else None)]
    for v in variables:
        scores = []
        for uid, rec in recommendations.items():
            h = by_id.get(uid)
            if h is None or h.last.quality is None or rec.values.get(v) is None:
                continue
            if count_ignored(_flipped(rec, v), h.last, advisable) == 0:
                scores.append(float(h.last.quality))
        scores = np.array(scores, dtype=np.float64)
        arms.append(FlipArm(v, scores, _safe_p(scores, base)))
    return FlipResult("reported", tuple(arms))


# ── Calibration ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CalibrationReport:
    nominal_p: tuple[float, ...]
    coverage: np.ndarray
    n_users: int
    r: Optional[float]
    p_value: Optional[float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"nominal_p": self.nominal_p, "coverage": self.coverage})

    def summary(self) -> dict:
        return {"n_users": self.n_users, "pearson_r": self.r, "p_value": self.p_value,
                "nominal_p": list(self.nominal_p), "coverage": [float(c) for c in self.coverage]}


def calibration_from_coverage(nominal_p: Sequence[float], coverage: np.ndarray,
                              n_users: int) -> CalibrationReport:
    nominal = tuple(float(p) for p in nominal_p)
    coverage = np.asarray(coverage, dtype=np.float64)
    if np.ptp(coverage) == 0:
        return CalibrationReport(nominal, coverage, n_users, None, None)
    res = sstats.pearsonr(nominal, coverage)
    return CalibrationReport(nominal, coverage, n_users, float(res.statistic), float(res.pvalue))


def calibration_report(model: QualityModel, histories: Sequence[UserHistory],
                       require_trained: bool = True) -> CalibrationReport:
    """Empirical interval coverage on the users' reported anchor-day quality."""
    if require_trained:
        model.require_trained()
    users = labeled(histories)
    if not users:
        raise NoTestUsers("no user reported a quality on their last day")
    batch = model.batch(users, labeled_only=True)
    return calibration_from_coverage(model.config.nominal_p, model.coverage(batch), len(users))


# ── First-order saliency ─────────────────────────────────────────────────

def input_gradients(model: QualityModel, x: np.ndarray, miss: np.ndarray) -> np.ndarray:
    """dy/dx for every user and input coordinate, (B, T, F)."""
    leaf = ad.Node(np.array(x, dtype=np.float64))
    y, _, _ = model.forward_nodes(leaf, miss)
    ad.backward(ad.sum_(y))
    return leaf.grad.copy()


def step_labels(steps: int = WINDOW_STEPS) -> tuple[str, ...]:
    """Window rows oldest first: t-9 ... t0."""
    return tuple(f"t{i - steps + 1}" if i < steps - 1 else "t0" for i in range(steps))


@dataclass(frozen=True)
class SaliencyMap:
    features: tuple[str, ...]
    per_user: np.ndarray = field(repr=False)

    @property
    def matrix(self) -> np.ndarray:
        """Mean over users, (T, len(features)), z-space units."""
        return self.per_user.mean(axis=0)

    def in_original_units(self, stats: StandardizationStats) -> np.ndarray:
        """Per unit of diary value; zero-variance features read 0."""
        idx = [stats.names.index(f) for f in self.features]
        std = np.array([stats.std[i] for i in idx])
        zero = np.array([stats.zero_variance[i] for i in idx])
        return np.where(zero, 0.0, self.matrix / np.where(zero, 1.0, std))

    def bootstrap_ci(self, n_boot: int = 1000, seed: int = 0,
                     alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        n = self.per_user.shape[0]
        means = np.empty((n_boot,) + self.per_user.shape[1:])
        for b in range(n_boot):
            means[b] = self.per_user[rng.integers(0, n, size=n)].mean(axis=0)
        return (np.quantile(means, alpha / 2, axis=0),
                np.quantile(means, 1 - alpha / 2, axis=0))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=pd.Index(step_labels(self.matrix.shape[0]),
                                                        name="step"),
                            columns=list(self.features))


def binary_features(stats: StandardizationStats) -> tuple[str, ...]:
    slots = feature_slots(stats.cyclic)
    return tuple(stats.names[slots[v][0]] for v in BINARY_IDS)


def first_order_saliency(model: QualityModel, batch: WindowBatch,
                         features: Optional[Sequence[str]] = None,
                         require_trained: bool = True) -> SaliencyMap:
    """Per-user input gradients restricted to ``features`` (default: the binaries)."""
    if require_trained:
        model.require_trained()
    if len(batch) == 0:
        raise NoUsers("saliency needs at least one window")
    features = tuple(features or binary_features(model.stats))
    idx = [model.stats.names.index(f) for f in features]
    g = input_gradients(model, batch.x, batch.miss)
    return SaliencyMap(features, g[:, :, idx])


# ── Second-order interactions ────────────────────────────────────────────

@dataclass(frozen=True)
class InteractionMap:
    features: tuple[str, ...]
    same_day_raw: np.ndarray
    cross_time: np.ndarray
    n_users: int

    @property
    def same_day(self) -> np.ndarray:
        """Signed anchor-day Hessian averaged over users, symmetrized."""
        return 0.5 * (self.same_day_raw + self.same_day_raw.T)

    @property
    def same_day_mean(self) -> float:
        return float(np.mean(np.diag(self.cross_time)))

    @property
    def cross_day_mean(self) -> float:
        T = self.cross_time.shape[0]
        return float(self.cross_time[~np.eye(T, dtype=bool)].mean())

    @property
    def ratio(self) -> Optional[float]:
        if self.cross_day_mean == 0:
            return None
        return self.same_day_mean / self.cross_day_mean

    def summary(self) -> dict:
        return {"n_users": self.n_users, "same_day_mean_abs": self.same_day_mean,
                "cross_day_mean_abs": self.cross_day_mean, "ratio": self.ratio}


def second_order_interactions(model: QualityModel, batch: WindowBatch,
                              features: Optional[Sequence[str]] = None,
                              h: float = HESSIAN_STEP,
                              require_trained: bool = True) -> InteractionMap:
    """Hessian blocks over ``features`` by central differences of input gradients.

    The cross-time map averages |H| over every feature pair, a feature with
    itself included, for each pair of nights. Costs two backward passes per
    perturbed coordinate (T · len(features)), spread over
    ``model.config.threads`` threads.
    """
    if require_trained:
        model.require_trained()
    B = len(batch)
    if B == 0:
        raise NoUsers("interactions need at least one window")
    features = tuple(features or binary_features(model.stats))
    idx = np.array([model.stats.names.index(f) for f in features])
    T, n = batch.x.shape[1], len(idx)

    def column(coord: tuple[int, int]) -> np.ndarray:
        t, j = coord
        up = batch.x.copy()
        down = batch.x.copy()
        up[:, t, idx[j]] += h
        down[:, t, idx[j]] -= h
        diff = input_gradients(model, up, batch.miss) - input_gradients(model, down, batch.miss)
        return diff[:, :, idx] / (2 * h)

    coords = [(t, j) for t in range(T) for j in range(n)]
    if model.config.threads > 1:
        with ThreadPoolExecutor(max_workers=model.config.threads) as pool:
            columns = list(pool.map(column, coords))
    else:
        columns = [column(c) for c in coords]

    # H[u, t1, a, t2, b] = d²y / dx(t1, a) dx(t2, b)
    H = np.empty((B, T, n, T, n))
    for (t, j), col in zip(coords, columns):
        H[:, :, :, t, j] = col

    same_day_raw = H[:, T - 1, :, T - 1, :].mean(axis=0)
    cross_time = np.abs(H).mean(axis=(0, 2, 4))
    return InteractionMap(features, same_day_raw, cross_time, B)


# ── Report files ─────────────────────────────────────────────────────────

def write_frame(frame: pd.DataFrame, path: Path | str, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, na_rep="", float_format="%.6g", lineterminator="\n")
    return path

