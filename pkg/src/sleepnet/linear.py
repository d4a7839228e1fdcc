"""Backward-stepwise AIC linear baseline.

One design row per user, built from the 10-record window ending at the
anchor day. Every encoded behaviour feature contributes three candidate
columns::

    <feature>@last     value on the anchor day
    <feature>@prev     value on the record before it
    <feature>@mean10   mean of present values over the window

Reported quality contributes only ``@prev`` and ``@mean10`` (over the
days before the anchor); the anchor-day quality is the target and never
a column. Missing cells are mean-imputed with the training means and a
``<column>?missing`` indicator is added for every base column. Constant,
duplicate and collinear columns are pruned before the full fit.

Selection starts from the full model and drops, one at a time, the column
whose removal lowers Gaussian AIC the most (ties: smallest index), until
no removal lowers it. The returned model is the minimum of the trace.
Dropping column j from a fitted OLS raises RSS by b_j² / [(XᵀX)⁻¹]_jj, so
every candidate of a step is scored from one statsmodels fit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import statsmodels.api as sm

from sleepnet_core.errors import SleepnetError
from sleepnet_core.protocol import WINDOW_STEPS
from sleepnet.diary import UserHistory, encode_record, labeled
from sleepnet.schema import QUALITY_FEATURE, feature_names


class LinearModelError(SleepnetError):
    """The linear baseline could not be built, fitted or applied."""


class NoEligibleUsers(LinearModelError):
    pass


class RankDeficient(LinearModelError):
    pass


class ColumnMismatch(LinearModelError, ValueError):
    pass


MISSING_SUFFIX = "?missing"


# ── Design matrix ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DesignMatrixSpec:
    """Base columns: three per behaviour feature, two for prior quality."""
    cyclic: bool = True

    @property
    def features(self) -> tuple[str, ...]:
        return feature_names(self.cyclic)

    @property
    def base_columns(self) -> tuple[str, ...]:
        cols = []
        for name in self.features:
            kinds = ("prev", "mean10") if name == QUALITY_FEATURE else ("last", "prev", "mean10")
            cols += [f"{name}@{k}" for k in kinds]
        return tuple(cols)

    @property
    def columns(self) -> tuple[str, ...]:
        base = self.base_columns
        return base + tuple(c + MISSING_SUFFIX for c in base)


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]
    means: np.ndarray          # imputation means of the base columns
    user_ids: tuple[str, ...]

    def select(self, columns: Sequence[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.columns)}
        try:
            return self.X[:, [index[c] for c in columns]]
        except KeyError as exc:
            raise ColumnMismatch(f"design has no column {exc.args[0]!r}") from None


def _raw_row(history: UserHistory, spec: DesignMatrixSpec) -> np.ndarray:
    """Base-column values for one user, NaN where missing."""
    records = history.records[-WINDOW_STEPS:]
    enc = [encode_record(r, cyclic=spec.cyclic, anchor=(i == len(records) - 1))
           for i, r in enumerate(records)]
    x = np.array([e[0] for e in enc])
    present = np.array([e[1] for e in enc]) == 0
    vals = np.where(present, x, np.nan)

    last = vals[-1]
    prev = vals[-2] if len(vals) > 1 else np.full(vals.shape[1], np.nan)
    counts = present.sum(axis=0)
    sums = np.where(present, x, 0.0).sum(axis=0)
    mean10 = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    row = []
    for j, name in enumerate(spec.features):
        if name == QUALITY_FEATURE:
            row += [prev[j], mean10[j]]  # anchor quality is already masked out of mean10
        else:
            row += [last[j], prev[j], mean10[j]]
    return np.asarray(row, dtype=np.float64)


def build_design_matrix(histories: Sequence[UserHistory],
                        spec: DesignMatrixSpec = DesignMatrixSpec(),
                        means: Optional[np.ndarray] = None,
                        labeled_only: bool = True) -> DesignMatrix:
    """Rows for users (with anchor-day quality unless ``labeled_only=False``).

    ``means`` are the imputation means; pass the training design's means
    when building rows for held-out users.
    """
    users = labeled(histories) if labeled_only else list(histories)
    if not users:
        raise NoEligibleUsers("no user has a reported anchor-day quality")
    raw = np.vstack([_raw_row(h, spec) for h in users])
    missing = np.isnan(raw)
    if means is None:
        with np.errstate(invalid="ignore"):
            counts = (~missing).sum(axis=0)
            means = np.where(counts > 0, np.nansum(raw, axis=0) / np.maximum(counts, 1), 0.0)
    X = np.hstack([np.where(missing, means, raw), missing.astype(np.float64)])
    y = np.array([np.nan if h.last.quality is None else float(h.last.quality) for h in users])
    return DesignMatrix(X, y, spec.columns, np.asarray(means), tuple(h.user_id for h in users))


def prune_columns(X: np.ndarray, columns: Sequence[str], tol: float = 1e-9) -> list[int]:
    """Indices of columns kept after dropping constant, duplicate and collinear ones.

    Greedy in column order: a column is kept when it raises the rank of
    [1, kept columns]. At most n - 2 columns survive so the full fit keeps
    a residual degree of freedom.
    """
    n = X.shape[0]
    kept: list[int] = []
    limit = max(n - 2, 0)
    basis = np.ones((n, 1)) / np.sqrt(n)
    for j in range(X.shape[1]):
        if len(kept) >= limit:
            break
        col = X[:, j]
        if np.ptp(col) == 0.0:
            continue
        resid = col - basis @ (basis.T @ col)
        resid = resid - basis @ (basis.T @ resid)
        norm = np.linalg.norm(resid)
        if norm <= tol * max(np.linalg.norm(col), 1.0) or norm < 1e-8:
            continue
        basis = np.hstack([basis, (resid / norm)[:, None]])
        kept.append(j)
    return kept


# ── OLS ──────────────────────────────────────────────────────────────────

def gaussian_aic(rss: float, n: int, k: int) -> float:
    """n·ln(RSS/n) + 2k; a perfect fit (RSS = 0) returns -inf."""
    if rss <= 0.0:
        return float("-inf")
    return n * float(np.log(rss / n)) + 2 * k


@dataclass(frozen=True)
class LinearModel:
    columns: tuple[str, ...]
    coef: np.ndarray           # b, original units
    intercept: float
    beta: np.ndarray           # standardized
    p_values: np.ndarray
    rss: float
    n: int
    r2: float
    aic: float
    x_std: np.ndarray
    y_std: float

    @property
    def k(self) -> int:
        """Estimated parameters: coefficients, intercept, residual variance."""
        return len(self.columns) + 2

    def coefficient(self, column: str) -> float:
        try:
            return float(self.coef[self.columns.index(column)])
        except ValueError:
            return 0.0


def aic(model: LinearModel) -> float:
    return gaussian_aic(model.rss, model.n, model.k)


def _ols_results(X: np.ndarray, y: np.ndarray):
    """statsmodels OLS with an intercept column prepended."""
    return sm.OLS(y, sm.add_constant(X, prepend=True, has_constant="add")).fit()


def ols_fit(X: np.ndarray, y: np.ndarray, columns: Sequence[str]) -> LinearModel:
    """Least squares with an intercept; t-test p-values; Gaussian AIC."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(columns) != p:
        raise ColumnMismatch(f"{p} design columns but {len(columns)} names")
    if n < p + 1 or np.linalg.matrix_rank(np.hstack([np.ones((n, 1)), X])) < p + 1:
        raise RankDeficient(f"design with {n} rows and {p} columns (+ intercept) is not full rank")

    with np.errstate(divide="ignore", invalid="ignore"):
        res = _ols_results(X, y)
        params = np.asarray(res.params, dtype=np.float64)
        rss = float(res.ssr)
        p_values = (np.asarray(res.pvalues, dtype=np.float64)[1:] if res.df_resid > 0
                    else np.full(p, np.nan))
    tss = float(res.centered_tss)
    r2 = float(res.rsquared) if tss > 0 else (1.0 if rss == 0 else 0.0)

    x_std = X.std(axis=0)
    y_std = float(y.std())
    beta = params[1:] * x_std / y_std if y_std > 0 else np.zeros(p)
    return LinearModel(
        columns=tuple(columns), coef=params[1:], intercept=float(params[0]), beta=beta,
        p_values=p_values, rss=rss, n=n, r2=r2,
        aic=gaussian_aic(rss, n, p + 2), x_std=x_std, y_std=y_std,
    )


def predict(model: LinearModel, row: Mapping[str, float] | Sequence[float] | np.ndarray) -> float:
    """Intercept + b·row. Not clamped."""
    if isinstance(row, Mapping):
        missing = [c for c in model.columns if c not in row]
        if missing:
            raise ColumnMismatch(f"row lacks model columns {missing[:5]}")
        vec = np.array([float(row[c]) for c in model.columns])
    else:
        vec = np.asarray(row, dtype=np.float64).reshape(-1)
        if vec.size != len(model.columns):
            raise ColumnMismatch(f"row has {vec.size} values, model has {len(model.columns)} columns")
    return model.intercept + float(vec @ model.coef)


# ── Backward elimination ─────────────────────────────────────────────────

@dataclass(frozen=True)
class EliminationStep:
    step: int
    dropped: Optional[str]
    n_columns: int
    aic: float


def _drop_rss(res) -> tuple[float, np.ndarray]:
    """RSS of a fitted OLS and its RSS after dropping each non-intercept column."""
    params = np.asarray(res.params, dtype=np.float64)
    diag = np.diag(np.asarray(res.normalized_cov_params, dtype=np.float64))[1:]
    rss = float(res.ssr)
    return rss, rss + params[1:] ** 2 / diag


def backward_stepwise(X: np.ndarray, y: np.ndarray, columns: Sequence[str]
                      ) -> tuple[LinearModel, list[EliminationStep]]:
    """Greedy best-drop elimination while AIC decreases."""
    full = ols_fit(X, y, columns)
    n = len(y)
    keep = list(range(len(columns)))
    current = full.aic
    trace = [EliminationStep(0, None, len(keep), current)]
    while keep:
        _, drop_rss = _drop_rss(_ols_results(X[:, keep], y))
        k_after = len(keep) - 1 + 2
        candidates = np.array([gaussian_aic(max(r, 0.0), n, k_after) for r in drop_rss])
        best = int(np.argmin(candidates))
        if not candidates[best] < current:
            break
        current = float(candidates[best])
        dropped = columns[keep.pop(best)]
        trace.append(EliminationStep(len(trace), dropped, len(keep), current))
    model = ols_fit(X[:, keep], y, [columns[j] for j in keep])
    return model, trace


def significant_columns(model: LinearModel, alpha: float = 0.01,
                        bonferroni: bool = True) -> list[str]:
    """Retained columns with p below alpha (divided by column count under Bonferroni)."""
    if not model.columns:
        return []
    threshold = alpha / len(model.columns) if bonferroni else alpha
    return [c for c, p in zip(model.columns, model.p_values) if p < threshold]


# ── Fitted baseline ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class LinearBaseline:
    """Design spec + training imputation means + the selected model."""
    spec: DesignMatrixSpec
    means: np.ndarray
    model: LinearModel
    trace: tuple[EliminationStep, ...] = field(default_factory=tuple)
    n_candidates: int = 0

    def design(self, histories: Sequence[UserHistory], labeled_only: bool = False) -> DesignMatrix:
        return build_design_matrix(histories, self.spec, self.means, labeled_only=labeled_only)

    def predict_histories(self, histories: Sequence[UserHistory]) -> np.ndarray:
        d = self.design(histories)
        return self.model.intercept + d.select(self.model.columns) @ self.model.coef

    def last_day_slopes(self, history: UserHistory, variables: Sequence[str]) -> np.ndarray:
        """d prediction / d (anchor-day value) per variable, in original units.

        Assumes the anchor-day value is present; ``@mean10`` moves by
        1/m per unit, m the number of present values in the window.
        """
        records = history.records[-WINDOW_STEPS:]
        slopes = []
        for v in variables:
            m = sum(1 for r in records if r.values.get(v) is not None)
            b_last = self.model.coefficient(f"{v}@last")
            b_mean = self.model.coefficient(f"{v}@mean10")
            slopes.append(b_last + (b_mean / m if m else 0.0))
        return np.asarray(slopes)

    def column_mean(self, column: str) -> float:
        return float(self.means[self.spec.base_columns.index(column)])

    def to_dict(self) -> dict:
        m = self.model
        return {
            "columns": list(m.columns),
            "b": [float(v) for v in m.coef],
            "beta": [float(v) for v in m.beta],
            "p_values": [float(v) for v in m.p_values],
            "intercept": m.intercept,
            "aic": m.aic,
            "r2": m.r2,
            "n": m.n,
            "n_candidates": self.n_candidates,
            "aic_trace": [{"step": s.step, "dropped": s.dropped, "n_columns": s.n_columns,
                           "aic": s.aic} for s in self.trace],
            "cyclic": self.spec.cyclic,
            "imputation_means": [float(v) for v in self.means],
        }

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path


def fit_linear_baseline(histories: Sequence[UserHistory],
                        spec: DesignMatrixSpec = DesignMatrixSpec()) -> LinearBaseline:
    """Design, prune, full fit, backward stepwise AIC."""
    design = build_design_matrix(histories, spec)
    kept = prune_columns(design.X, design.columns)
    columns = [design.columns[j] for j in kept]
    model, trace = backward_stepwise(design.X[:, kept], design.y, columns)
    print(f"  stepwise: {len(design.columns)} candidate columns, {len(columns)} after pruning, "
          f"{len(model.columns)} retained; AIC {trace[0].aic:.1f} -> {trace[-1].aic:.1f}, "
          f"R²={model.r2:.3f}")
    return LinearBaseline(spec, design.means, model, tuple(trace), len(design.columns))
