"""The quality network: windows in, quality and nine nested intervals out.

Stages, in order::

    zscore          fixed training-fold statistics (applied in diary.build_window)
    missing_mask    gate_t = elu(miss_t·Wm + bm) + 1, multiplied into x_t
    lstm ×2         50 then 10 units, tanh, over the 10 window steps
    dense elu       last hidden state -> scalar
    rescale_quality 2·tanh(a·q + c), learnable a (init 1) and c (init 0)
    intervals       dense -> center 2·tanh(r0), half-widths cumsum(softplus(r1..9))

The elu output is bounded below by -1, so a plain 2·tanh(q) could never
predict below 2·tanh(-1) ≈ -1.52; the learnable scale and offset give the
head the whole [-2, +2] range while keeping it bounded.

Interval nesting is structural: half-widths are cumulative sums of
positive terms, so interval i is always inside interval i+1.

Losses::

    quality  = mean_u (y_n(u) - y_s(u))²
    interval = Σ_i ( mean_u [ step(b_low(i) - y_s) + step(y_s - b_high(i)) ] - (1 - p(i)) )²

with ``step(x) = 1/(1 + e^{-10x})``. The interval term calibrates against
the *reported* quality, normalizes the soft outside-count by batch size
and squares the deviation so it is bounded below by 0.

Ablation variants swap single stages out; see ``VARIANTS``.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy import stats as sstats
from scipy.special import expit

from sleepnet_core.errors import SleepnetError
from sleepnet_core.ids import schema_hash
from sleepnet_core.protocol import (
    BATCH_SIZE,
    DEFAULT_EPOCHS,
    EARLY_STOP_PATIENCE,
    LEARNING_RATE,
    LSTM_SIZES,
    NOMINAL_P,
    SOFT_STEP_GAIN,
    VALIDATION_FRACTION,
)
from sleepnet import autodiff as ad
from sleepnet.autodiff import Node, ParamStore
from sleepnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from sleepnet.diary import (
    BehaviourWindow,
    StandardizationStats,
    UserHistory,
    WindowBatch,
    build_batch,
    fit_standardization,
    labeled,
)


class ModelError(SleepnetError):
    """Quality-network construction, training or evaluation failed."""


class EmptyBatch(ModelError, ValueError):
    pass


class NoLabeledUsers(ModelError):
    pass


class FoldTooSmall(ModelError):
    pass


class UnknownVariant(ModelError, ValueError):
    pass


class UntrainedModel(ModelError):
    pass


# ── Config ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NetworkConfig:
    lstm_sizes: tuple[int, ...] = LSTM_SIZES
    nominal_p: tuple[float, ...] = NOMINAL_P
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = 0
    patience: int = EARLY_STOP_PATIENCE
    validation_fraction: float = VALIDATION_FRACTION
    threads: int = 1
    variant: str = "baseline"
    # stage switches, normally set through ``for_variant``
    missing_mask: bool = True
    elu_on_mask: bool = True
    cyclic: bool = True
    zscore: bool = True
    lstms: bool = True
    head_elu: bool = True
    rescale_quality: bool = True
    rescale_intervals: bool = True
    interval_loss: bool = True

    def __post_init__(self) -> None:
        p = np.asarray(self.nominal_p, dtype=np.float64)
        if p.size < 1 or np.any(p <= 0) or np.any(p >= 1) or np.any(np.diff(p) <= 0):
            raise ValueError(f"nominal_p must be strictly increasing in (0, 1): {self.nominal_p}")
        if not self.lstm_sizes or min(self.lstm_sizes) < 1:
            raise ValueError(f"lstm sizes must be >= 1: {self.lstm_sizes}")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1, epochs >= 0")
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; known: {sorted(VARIANTS)}")

    @property
    def n_intervals(self) -> int:
        return len(self.nominal_p)

    def for_variant(self, variant: str) -> "NetworkConfig":
        """This config with one stage altered. Seed and budget are kept."""
        if variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
        base = {f.name: f.default for f in dataclasses.fields(NetworkConfig)
                if f.name in _STAGE_FIELDS}
        base.update(VARIANTS[variant])
        sizes = self.lstm_sizes
        if variant == "extra_lstm_layer_10":
            sizes = tuple(sizes) + (10,)
        return dataclasses.replace(self, variant=variant, lstm_sizes=sizes, **base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lstm_sizes"] = list(self.lstm_sizes)
        d["nominal_p"] = list(self.nominal_p)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkConfig":
        d = dict(d)
        d["lstm_sizes"] = tuple(d["lstm_sizes"])
        d["nominal_p"] = tuple(d["nominal_p"])
        return cls(**d)


_STAGE_FIELDS = ("missing_mask", "elu_on_mask", "cyclic", "zscore", "lstms", "head_elu",
                 "rescale_quality", "rescale_intervals", "interval_loss")

VARIANTS: dict[str, dict[str, bool]] = {
    "baseline": {},
    "no_missing_mask": {"missing_mask": False},
    "no_cyclic_encoding": {"cyclic": False},
    "no_rescale_intervals": {"rescale_intervals": False},
    "extra_lstm_layer_10": {},
    "no_elu_on_mask": {"elu_on_mask": False},
    "no_rescale_quality": {"rescale_quality": False},
    "no_lstms": {"lstms": False},
    "no_zscore": {"zscore": False},
    "quality_loss_only": {"interval_loss": False},
    # affine in its inputs end to end; second derivatives vanish exactly
    "linear_network": {"missing_mask": False, "lstms": False, "head_elu": False,
                       "rescale_quality": False},
}


# ── Parameters ───────────────────────────────────────────────────────────

def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def init_params(config: NetworkConfig, n_features: int, steps: int,
                rng: np.random.Generator) -> ParamStore:
    """Fresh parameters for ``config``'s architecture."""
    F = n_features
    p: dict[str, np.ndarray] = {}
    if config.missing_mask:
        p["mask.W"] = rng.normal(0.0, 0.01, size=(F, F))
        p["mask.b"] = np.zeros(F)
    if config.lstms:
        fan_in = F
        for i, H in enumerate(config.lstm_sizes):
            p[f"lstm{i}.W"] = _uniform(rng, fan_in, (fan_in, 4 * H))
            p[f"lstm{i}.U"] = _uniform(rng, H, (H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate open
            p[f"lstm{i}.b"] = b
            fan_in = H
        hidden = config.lstm_sizes[-1]
    else:
        hidden = config.lstm_sizes[-1]
        p["flat.W"] = _uniform(rng, steps * F, (steps * F, hidden))
        p["flat.b"] = np.zeros(hidden)
    p["dense.W"] = _uniform(rng, hidden, (hidden, 1))
    p["dense.b"] = np.zeros(1)
    if config.rescale_quality:
        p["rescale.a"] = np.ones(1)
        p["rescale.c"] = np.zeros(1)
    K = config.n_intervals
    p["intervals.W"] = _uniform(rng, hidden, (hidden, K + 1))
    b = np.full(K + 1, np.log(np.expm1(0.1)))  # initial half-width steps of 0.1
    b[0] = 0.0
    p["intervals.b"] = b
    return ParamStore(p)


# ── Forward ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QualityPrediction:
    y: np.ndarray  # (N,)


@dataclass(frozen=True)
class IntervalPrediction:
    center: np.ndarray       # (N,)
    half_widths: np.ndarray  # (N, K), strictly increasing along K

    @property
    def low(self) -> np.ndarray:
        return self.center[:, None] - self.half_widths

    @property
    def high(self) -> np.ndarray:
        return self.center[:, None] + self.half_widths

    def contains(self, targets: np.ndarray) -> np.ndarray:
        """(N, K) booleans: target inside interval i (edges count as inside)."""
        t = np.asarray(targets, dtype=np.float64)[:, None]
        return (self.low <= t) & (t <= self.high)


def forward(leaves: Mapping[str, Node], config: NetworkConfig, x, miss: np.ndarray
            ) -> tuple[Node, Node, Node]:
    """Graph for a batch. ``x`` (B, T, F), ``miss`` (B, T, F) constant.

    Returns (y (B,), center (B,), half_widths (B, K)).
    """
    x = ad.as_node(x)
    if x.value.ndim != 3 or miss.shape != x.shape:
        raise ad.ShapeMismatch(f"forward: x{x.shape} miss{miss.shape}")
    B, T, F = x.shape

    steps = []
    for t in range(T):
        xt = ad.slice_(x, (slice(None), t, slice(None)))
        if config.missing_mask:
            pre = ad.add(ad.matmul(miss[:, t, :], leaves["mask.W"]), leaves["mask.b"])
            gate = ad.add(ad.elu(pre) if config.elu_on_mask else pre, 1.0)
            xt = ad.multiply(xt, gate)
        steps.append(xt)

    if config.lstms:
        seq = steps
        for i, H in enumerate(config.lstm_sizes):
            h = Node(np.zeros((B, H)), "const")
            c = Node(np.zeros((B, H)), "const")
            outputs = []
            for xt in seq:
                hc = ad.lstm_cell(xt, h, c, leaves[f"lstm{i}.W"], leaves[f"lstm{i}.U"],
                                  leaves[f"lstm{i}.b"])
                h = ad.slice_(hc, (slice(None), slice(0, H)))
                c = ad.slice_(hc, (slice(None), slice(H, 2 * H)))
                outputs.append(h)
            seq = outputs
        hidden = seq[-1]
    else:
        flat = ad.concat(steps, axis=1)
        hidden = ad.add(ad.matmul(flat, leaves["flat.W"]), leaves["flat.b"])

    q = ad.add(ad.matmul(hidden, leaves["dense.W"]), leaves["dense.b"])
    if config.head_elu:
        q = ad.elu(q)
    if config.rescale_quality:
        q = ad.multiply(ad.tanh(ad.add(ad.multiply(q, leaves["rescale.a"]),
                                       leaves["rescale.c"])), 2.0)
    y = ad.reshape(q, (B,))

    r = ad.add(ad.matmul(hidden, leaves["intervals.W"]), leaves["intervals.b"])
    r0 = ad.slice_(r, (slice(None), 0))
    center = ad.multiply(ad.tanh(r0), 2.0) if config.rescale_intervals else r0
    half = ad.cumsum(ad.softplus(ad.slice_(r, (slice(None), slice(1, None)))), axis=1)
    return y, center, half


# ── Losses ───────────────────────────────────────────────────────────────

def soft_step(x):
    """1 / (1 + e^{-10x})."""
    return expit(SOFT_STEP_GAIN * np.asarray(x, dtype=np.float64))


def loss_quality(predictions, targets) -> Node:
    pred = ad.as_node(predictions)
    if pred.value.size == 0:
        raise EmptyBatch("quality loss over an empty batch")
    return ad.mean(ad.square(ad.subtract(pred, np.asarray(targets, dtype=np.float64))))


def loss_intervals(center, half_widths, targets, nominal_p: Sequence[float] = NOMINAL_P) -> Node:
    center, half = ad.as_node(center), ad.as_node(half_widths)
    B = center.shape[0]
    if B == 0:
        raise EmptyBatch("interval loss over an empty batch")
    t = np.asarray(targets, dtype=np.float64).reshape(B, 1)
    c = ad.reshape(center, (B, 1))
    low = ad.subtract(c, half)
    high = ad.add(c, half)
    outside = ad.add(ad.sigmoid(ad.multiply(ad.subtract(low, t), SOFT_STEP_GAIN)),
                     ad.sigmoid(ad.multiply(ad.subtract(t, high), SOFT_STEP_GAIN)))
    frac = ad.mean(outside, axis=0)
    nominal_outside = 1.0 - np.asarray(nominal_p, dtype=np.float64)
    return ad.sum_(ad.square(ad.subtract(frac, nominal_outside)))


@dataclass(frozen=True)
class LossBreakdown:
    quality_mse: float
    interval_loss: float

    @property
    def total(self) -> float:
        return self.quality_mse + self.interval_loss

    def to_dict(self) -> dict:
        return {"quality_mse": self.quality_mse, "interval_loss": self.interval_loss,
                "total": self.total}


def loss_graph(leaves: Mapping[str, Node], config: NetworkConfig, x, miss: np.ndarray,
               targets: np.ndarray) -> Node:
    """Scalar training objective for one batch."""
    y, center, half = forward(leaves, config, x, miss)
    total = loss_quality(y, targets)
    if config.interval_loss:
        total = ad.add(total, loss_intervals(center, half, targets, config.nominal_p))
    return total


# ── Model ────────────────────────────────────────────────────────────────

@dataclass
class QualityModel:
    params: ParamStore
    config: NetworkConfig
    stats: StandardizationStats
    fold: Optional[int] = None
    trained: bool = False

    def require_trained(self) -> None:
        if not self.trained:
            raise UntrainedModel("model has not been trained; run train() or load a checkpoint")

    def forward_nodes(self, x, miss: np.ndarray) -> tuple[Node, Node, Node]:
        return forward(self.params.leaves(), self.config, x, miss)

    def _predict_chunk(self, chunk: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, ...]:
        y, center, half = self.forward_nodes(*chunk)
        return y.value, center.value, half.value

    def predict(self, x: np.ndarray, miss: np.ndarray
                ) -> tuple[QualityPrediction, IntervalPrediction]:
        """Forward-only inference, chunked; chunks may run on ``config.threads`` threads."""
        n = x.shape[0]
        if n == 0:
            K = self.config.n_intervals
            return QualityPrediction(np.zeros(0)), IntervalPrediction(np.zeros(0), np.zeros((0, K)))
        size = max(self.config.batch_size, 1)
        chunks = [(x[i:i + size], miss[i:i + size]) for i in range(0, n, size)]
        if self.config.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                parts = list(pool.map(self._predict_chunk, chunks))
        else:
            parts = [self._predict_chunk(c) for c in chunks]
        y = np.concatenate([p[0] for p in parts])
        center = np.concatenate([p[1] for p in parts])
        half = np.concatenate([p[2] for p in parts])
        return QualityPrediction(y), IntervalPrediction(center, half)

    def predict_batch(self, batch: WindowBatch) -> tuple[QualityPrediction, IntervalPrediction]:
        return self.predict(batch.x, batch.miss)

    def predict_window(self, window: BehaviourWindow) -> tuple[float, IntervalPrediction]:
        q, iv = self.predict(window.x[None], window.miss[None])
        return float(q.y[0]), iv

    def losses(self, batch: WindowBatch) -> LossBreakdown:
        """Both loss terms over a whole labeled batch (no gradient)."""
        if len(batch) == 0:
            raise EmptyBatch("cannot evaluate losses on an empty batch")
        q, iv = self.predict_batch(batch)
        mse = loss_quality(q.y, batch.y).item()
        interval = loss_intervals(iv.center, iv.half_widths, batch.y, self.config.nominal_p).item()
        return LossBreakdown(mse, interval)

    def coverage(self, batch: WindowBatch) -> np.ndarray:
        """Empirical fraction of targets inside each interval, (K,)."""
        if len(batch) == 0:
            raise EmptyBatch("cannot compute coverage on an empty batch")
        _, iv = self.predict_batch(batch)
        return iv.contains(batch.y).mean(axis=0)

    def batch(self, histories: Sequence[UserHistory], labeled_only: bool = False) -> WindowBatch:
        return build_batch(histories, self.stats, labeled_only=labeled_only)

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.stats.names)

    def sidecar(self) -> dict:
        return {
            "network_config": self.config.to_dict(),
            "schema_hash": self.schema_hash,
            "standardization": self.stats.to_dict(),
            "fold": self.fold,
            "trained": self.trained,
        }


def save_model(model: QualityModel, path: Path | str) -> str:
    """Checkpoint ``model``; returns the checkpoint id."""
    return save_checkpoint(model.params, path, model.sidecar()).checkpoint_id


def load_model(path: Path | str) -> QualityModel:
    ckpt = load_checkpoint(path)
    side = ckpt.sidecar
    stats = StandardizationStats.from_dict(side["standardization"])
    if schema_hash(stats.names) != side["schema_hash"]:
        raise CheckpointError(f"{path}: feature schema hash does not match its statistics")
    return QualityModel(
        params=ckpt.store,
        config=NetworkConfig.from_dict(side["network_config"]),
        stats=stats,
        fold=side.get("fold"),
        trained=bool(side.get("trained", False)),
    )


# ── Training ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: LossBreakdown
    validation: Optional[LossBreakdown]


@dataclass
class TrainingHistory:
    """Epoch 0 is the untrained model; later entries follow each pass."""
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def train_mse(self) -> np.ndarray:
        return np.array([e.train.quality_mse for e in self.epochs])


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, split, shuffle = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(split),
            np.random.default_rng(shuffle))


def _standardization(histories: Sequence[UserHistory], config: NetworkConfig) -> StandardizationStats:
    if not config.zscore:
        return StandardizationStats.identity(config.cyclic)
    return fit_standardization(histories, cyclic=config.cyclic)


def _batch_grads(store: ParamStore, config: NetworkConfig, batch: WindowBatch) -> dict[str, np.ndarray]:
    leaves = store.leaves()
    ad.backward(loss_graph(leaves, config, batch.x, batch.miss, batch.y))
    return {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for k, n in leaves.items()}


def train(histories: Sequence[UserHistory], config: NetworkConfig = NetworkConfig(),
          fold: Optional[int] = None) -> tuple[QualityModel, TrainingHistory]:
    """Mini-batch Adam on quality + interval loss. Deterministic given ``config.seed``.

    A seeded share of users is held out for validation and early stopping
    (patience on validation quality MSE, the output the recommenders climb);
    the best epoch's parameters are restored at the end. Standardization
    is fitted on the training share.
    """
    users = labeled(histories)
    if not users:
        raise NoLabeledUsers("no user has a reported anchor-day quality")
    init_rng, split_rng, shuffle_rng = _seeds(config.seed)

    order = split_rng.permutation(len(users))
    n_val = int(round(len(users) * config.validation_fraction))
    if n_val >= len(users):
        n_val = 0
    val_users = [users[i] for i in sorted(order[:n_val])]
    train_users = [users[i] for i in sorted(order[n_val:])]

    stats = _standardization(train_users, config)
    train_batch = build_batch(train_users, stats)
    val_batch = build_batch(val_users, stats) if val_users else None
    _, steps, n_features = train_batch.x.shape

    store = init_params(config, n_features, steps, init_rng)
    model = QualityModel(store, config, stats, fold=fold, trained=False)

    history = TrainingHistory()

    def record(epoch: int) -> Optional[float]:
        tr = model.losses(train_batch)
        va = model.losses(val_batch) if val_batch is not None else None
        history.epochs.append(EpochRecord(epoch, tr, va))
        return va.quality_mse if va is not None else None

    best_loss = record(0)
    best_params = store.copy()
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(len(train_batch))
        for start in range(0, len(perm), config.batch_size):
            mb = train_batch.subset(perm[start:start + config.batch_size])
            ad.adam_step(store, _batch_grads(store, config, mb), config.learning_rate)
        val_loss = record(epoch)
        last = history.epochs[-1]
        print(f"  epoch {epoch}/{config.epochs}: train mse={last.train.quality_mse:.4f} "
              f"total={last.train.total:.4f}"
              + (f"  val mse={val_loss:.4f}" if val_loss is not None else ""))
        if val_loss is None:
            best_params, history.best_epoch = store.copy(), epoch
            continue
        if val_loss < best_loss:
            best_loss, best_params, history.best_epoch = val_loss, store.copy(), epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                print(f"  early stop at epoch {epoch}; best epoch {history.best_epoch}")
                break

    model.params = best_params
    model.trained = True
    return model, history


# ── Cross-validation ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    n_train: int
    n_test: int
    quality_mse: float
    interval_loss: float
    coverage: tuple[float, ...]
    calibration_r: Optional[float]
    linear_mse: Optional[float] = None


def _mean_se(values: Sequence[float]) -> tuple[float, Optional[float]]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def calibration_r(nominal_p: Sequence[float], coverage: Sequence[float]) -> Optional[float]:
    """Pearson r between nominal probabilities and coverage; None when coverage is constant."""
    cov = np.asarray(coverage, dtype=np.float64)
    if np.ptp(cov) == 0.0:
        return None
    return float(sstats.pearsonr(np.asarray(nominal_p, dtype=np.float64), cov)[0])


def paired_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test; identical samples give p = 1."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.size < 2 or not np.any(diff):
        return 1.0
    if np.all(diff == diff[0]):
        return 0.0  # constant nonzero shift: zero variance, infinite t
    return float(sstats.ttest_rel(a, b).pvalue)


@dataclass(frozen=True)
class CrossValidationResult:
    folds: tuple[FoldMetrics, ...]
    variant: str = "baseline"
    nominal_p: tuple[float, ...] = NOMINAL_P

    @property
    def mse(self) -> tuple[float, Optional[float]]:
        """Held-out quality MSE as (mean, standard error) over folds."""
        return _mean_se([f.quality_mse for f in self.folds])

    @property
    def linear_mse(self) -> Optional[tuple[float, Optional[float]]]:
        if any(f.linear_mse is None for f in self.folds):
            return None
        return _mean_se([f.linear_mse for f in self.folds])

    @property
    def linear_p_value(self) -> Optional[float]:
        """Paired test of network vs linear held-out MSE across folds."""
        if self.linear_mse is None:
            return None
        return paired_p_value([f.quality_mse for f in self.folds],
                              [f.linear_mse for f in self.folds])

    @property
    def mean_coverage(self) -> np.ndarray:
        return np.mean([f.coverage for f in self.folds], axis=0)


def user_folds(n_users: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of user indices into ``folds`` groups."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n_users)
    return [np.sort(part) for part in np.array_split(order, folds)]


def _run_fold(args) -> FoldMetrics:
    k, users, test_idx, config, compare_linear = args
    test_set = set(int(i) for i in test_idx)
    train_users = [u for i, u in enumerate(users) if i not in test_set]
    test_users = [users[i] for i in test_idx]
    model, _ = train(train_users, config, fold=k)
    test_batch = model.batch(test_users)
    losses = model.losses(test_batch)
    cov = model.coverage(test_batch)
    linear_mse = None
    if compare_linear:
        from sleepnet.linear import fit_linear_baseline

        baseline = fit_linear_baseline(train_users)
        pred = baseline.predict_histories(test_users)
        linear_mse = float(np.mean((pred - test_batch.y) ** 2))
    metrics = FoldMetrics(k, len(train_users), len(test_users), losses.quality_mse,
                          losses.interval_loss, tuple(float(c) for c in cov),
                          calibration_r(config.nominal_p, cov), linear_mse)
    print(f"  fold {k}: mse={metrics.quality_mse:.4f} coverage@{config.nominal_p[-1]}="
          f"{cov[-1]:.3f}" + (f" linear mse={linear_mse:.4f}" if linear_mse is not None else ""))
    return metrics


def cross_validate(histories: Sequence[UserHistory], config: NetworkConfig = NetworkConfig(),
                   folds: int = 10, compare_linear: bool = False) -> CrossValidationResult:
    """K-fold CV over users; standardization is refit inside every training fold."""
    users = labeled(histories)
    if not users:
        raise NoLabeledUsers("no user has a reported anchor-day quality")
    parts = user_folds(len(users), folds, config.seed)
    if min(len(p) for p in parts) < 2:
        raise FoldTooSmall(f"{len(users)} labeled users cannot fill {folds} folds of >= 2")
    jobs = [(k, users, idx, config, compare_linear) for k, idx in enumerate(parts)]
    if config.threads > 1:
        inner = dataclasses.replace(config, threads=1)
        jobs = [(k, users, idx, inner, compare_linear) for k, idx in enumerate(parts)]
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    return CrossValidationResult(tuple(results), config.variant, config.nominal_p)


# ── Ablations ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AblationResult:
    variant: str
    baseline: CrossValidationResult
    altered: CrossValidationResult

    @property
    def mse_differences(self) -> np.ndarray:
        """Per-fold altered minus baseline held-out MSE."""
        return np.array([a.quality_mse - b.quality_mse
                         for a, b in zip(self.altered.folds, self.baseline.folds)])

    @property
    def mean_difference(self) -> float:
        return float(self.mse_differences.mean())

    @property
    def p_value(self) -> float:
        return paired_p_value([f.quality_mse for f in self.altered.folds],
                              [f.quality_mse for f in self.baseline.folds])

    def calibration(self) -> tuple[Optional[float], Optional[float]]:
        """(baseline, altered) Pearson r of nominal p vs mean held-out coverage."""
        return (calibration_r(self.baseline.nominal_p, self.baseline.mean_coverage),
                calibration_r(self.altered.nominal_p, self.altered.mean_coverage))


def ablate(histories: Sequence[UserHistory], config: NetworkConfig, variant: str,
           folds: int = 10, baseline: Optional[CrossValidationResult] = None) -> AblationResult:
    """Cross-validate ``variant`` against the baseline with the same seed and budget."""
    altered_config = config.for_variant(variant)
    if baseline is None:
        baseline = cross_validate(histories, config.for_variant("baseline"), folds)
    if variant == "baseline":
        altered = baseline
    else:
        altered = cross_validate(histories, altered_config, folds)
    result = AblationResult(variant, baseline, altered)
    print(f"  ablation {variant}: Δmse={result.mean_difference:+.4f} p={result.p_value:.3g}")
    return result
