"""Stepwise AIC baseline: design rows, pruning, OLS, elimination."""
from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import stats

from sleepnet.linear import (
    MISSING_SUFFIX,
    ColumnMismatch,
    DesignMatrixSpec,
    NoEligibleUsers,
    RankDeficient,
    _drop_rss,
    _ols_results,
    backward_stepwise,
    build_design_matrix,
    gaussian_aic,
    ols_fit,
    predict,
    prune_columns,
    significant_columns,
)
from sleepnet.schema import QUALITY_FEATURE

from conftest import make_history


def _signal_data(n=200, noise_cols=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2 + noise_cols))
    y = 1.0 + 2.0 * X[:, 0] - 3.0 * X[:, 1] + rng.normal(scale=0.5, size=n)
    cols = ["a", "b"] + [f"noise{i}" for i in range(noise_cols)]
    return X, y, cols


# ── Design matrix ────────────────────────────────────────────────────────

def test_design_columns():
    spec = DesignMatrixSpec()
    base = spec.base_columns
    assert f"{QUALITY_FEATURE}@last" not in base
    assert f"{QUALITY_FEATURE}@prev" in base and f"{QUALITY_FEATURE}@mean10" in base
    assert {"total_sleep_time@last", "total_sleep_time@prev", "total_sleep_time@mean10"} <= set(base)
    assert len(spec.columns) == 2 * len(base)
    assert spec.columns[len(base)] == base[0] + MISSING_SUFFIX


def test_design_row_values():
    h = make_history("u", n_days=4, qualities=[1, -1, 2, 0], total_sleep_time=300.0)
    d = build_design_matrix([h])
    row = dict(zip(d.columns, d.X[0]))
    assert row["total_sleep_time@last"] == 300.0
    assert row["total_sleep_time@prev"] == 420.0
    assert row["total_sleep_time@mean10"] == pytest.approx((3 * 420.0 + 300.0) / 4)
    # the anchor-day quality is the target, not a predictor
    assert row[f"{QUALITY_FEATURE}@prev"] == 2.0
    assert row[f"{QUALITY_FEATURE}@mean10"] == pytest.approx(2 / 3)
    assert d.y[0] == 0.0


def test_missing_cells_are_imputed_and_flagged():
    hs = [make_history("a", total_sleep_time=None), make_history("b", total_sleep_time=360.0)]
    d = build_design_matrix(hs)
    i = d.columns.index("total_sleep_time@last")
    flag = d.columns.index("total_sleep_time@last" + MISSING_SUFFIX)
    assert d.X[0, i] == 360.0  # training mean over present values
    assert d.X[:, flag].tolist() == [1.0, 0.0]


def test_held_out_rows_use_training_means():
    train = build_design_matrix([make_history("a", total_sleep_time=100.0),
                                 make_history("b", total_sleep_time=300.0)])
    test = build_design_matrix([make_history("c", total_sleep_time=None)], means=train.means)
    assert test.select(["total_sleep_time@last"])[0, 0] == 200.0


def test_unlabeled_users_are_skipped_unless_asked():
    hs = [make_history("a", qualities=[0, 0, 0, 0, None]), make_history("b")]
    assert build_design_matrix(hs).user_ids == ("b",)
    everyone = build_design_matrix(hs, labeled_only=False)
    assert everyone.user_ids == ("a", "b") and np.isnan(everyone.y[0])
    with pytest.raises(NoEligibleUsers):
        build_design_matrix(hs[:1])


def test_select_unknown_column():
    d = build_design_matrix([make_history("a")])
    with pytest.raises(ColumnMismatch):
        d.select(["nope@last"])


# ── Pruning ──────────────────────────────────────────────────────────────

def test_prune_drops_constant_duplicate_and_collinear_columns():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(size=30)
    X = np.column_stack([a, np.ones(30), a, b, a + 2 * b, rng.normal(size=30)])
    assert prune_columns(X, list("uvwxyz")) == [0, 3, 5]


def test_prune_leaves_a_residual_degree_of_freedom():
    X = np.random.default_rng(2).normal(size=(6, 10))
    assert len(prune_columns(X, [str(i) for i in range(10)])) == 4


# ── OLS ──────────────────────────────────────────────────────────────────

def test_gaussian_aic():
    assert gaussian_aic(50.0, 100, 3) == pytest.approx(100 * np.log(0.5) + 6)
    assert gaussian_aic(0.0, 10, 2) == float("-inf")


def test_ols_recovers_coefficients():
    X, y, cols = _signal_data(noise_cols=0, n=400)
    m = ols_fit(X, y, cols)
    assert m.intercept == pytest.approx(1.0, abs=0.1)
    np.testing.assert_allclose(m.coef, [2.0, -3.0], atol=0.1)
    assert np.all(m.p_values < 1e-6)
    assert 0.9 < m.r2 < 1.0
    assert m.k == 4
    assert predict(m, {"a": 1.0, "b": 1.0}) == pytest.approx(m.intercept + m.coef.sum())


def test_ols_errors():
    X, y, cols = _signal_data(noise_cols=0, n=20)
    with pytest.raises(ColumnMismatch):
        ols_fit(X, y, ["a"])
    with pytest.raises(RankDeficient):
        ols_fit(np.column_stack([X[:, 0], X[:, 0]]), y, ["a", "a2"])
    with pytest.raises(RankDeficient):
        ols_fit(X[:2], y[:2], cols)
    m = ols_fit(X, y, cols)
    with pytest.raises(ColumnMismatch):
        predict(m, {"a": 1.0})
    with pytest.raises(ColumnMismatch):
        predict(m, [1.0, 2.0, 3.0])


def test_drop_shortcut_matches_refits():
    X, y, cols = _signal_data(n=60, noise_cols=3)
    rss, dropped = _drop_rss(_ols_results(X, y))
    assert rss == pytest.approx(ols_fit(X, y, cols).rss)
    for j in range(X.shape[1]):
        keep = [i for i in range(X.shape[1]) if i != j]
        refit = ols_fit(X[:, keep], y, [cols[i] for i in keep])
        assert dropped[j] == pytest.approx(refit.rss, rel=1e-8)


def test_single_column_fit_matches_linregress():
    rng = np.random.default_rng(5)
    x = rng.normal(size=80)
    y = 0.3 * x + rng.normal(size=80)
    m = ols_fit(x, y, ["x"])
    ref = stats.linregress(x, y)
    assert m.coef[0] == pytest.approx(ref.slope, rel=1e-10)
    assert m.intercept == pytest.approx(ref.intercept, rel=1e-10, abs=1e-12)
    assert m.p_values[0] == pytest.approx(ref.pvalue, rel=1e-8)
    assert m.r2 == pytest.approx(ref.rvalue ** 2, rel=1e-10)


def test_standardized_coefficients_rescale_raw_ones():
    X, y, cols = _signal_data(noise_cols=2, seed=2)
    X = X * np.array([1.0, 10.0, 0.1, 3.0])
    m = ols_fit(X, y, cols)
    np.testing.assert_allclose(m.beta, m.coef * X.std(axis=0) / y.std(), rtol=0, atol=1e-8)


# ── Elimination ──────────────────────────────────────────────────────────

def test_stepwise_keeps_the_signal_and_lowers_aic():
    X, y, cols = _signal_data(noise_cols=6, seed=4)
    model, trace = backward_stepwise(X, y, cols)
    assert {"a", "b"} <= set(model.columns)
    aics = [s.aic for s in trace]
    assert all(later < earlier for earlier, later in zip(aics, aics[1:]))
    assert model.aic == pytest.approx(aics[-1])
    assert trace[0].dropped is None and trace[0].n_columns == len(cols)
    assert significant_columns(model)[:2] == ["a", "b"]


def test_stepwise_on_pure_noise_drops_one_column_per_step():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    model, trace = backward_stepwise(X, y, ["w", "x", "y", "z"])
    assert all(s.n_columns == 4 - s.step for s in trace)
    assert len(model.columns) == trace[-1].n_columns
    assert set(model.columns) == {"w", "x", "y", "z"} - {s.dropped for s in trace[1:]}


@pytest.mark.slow
def test_planted_noise_column_is_usually_eliminated():
    eliminated = 0
    for seed in range(100):
        X, y, cols = _signal_data(n=200, noise_cols=1, seed=1000 + seed)
        model, trace = backward_stepwise(X, y, cols)
        aics = [s.aic for s in trace]
        assert all(later < earlier for earlier, later in zip(aics, aics[1:]))
        assert {"a", "b"} <= set(model.columns)
        eliminated += "noise0" not in model.columns
    assert eliminated >= 75


def test_baseline_on_population(baseline, histories):
    pred = baseline.predict_histories(histories)
    assert pred.shape == (len(histories),)
    assert np.all(np.isfinite(pred))
    assert baseline.model.n == sum(1 for h in histories if h.last.quality is not None)
    assert len(baseline.trace) >= 1
    assert 0 < len(baseline.model.columns) < baseline.n_candidates


def test_last_day_slopes_combine_last_and_window_mean(baseline, histories):
    h = histories[0]
    slopes = baseline.last_day_slopes(h, ["alcohol"])
    records = h.records[-10:]
    m = sum(1 for r in records if r.values.get("alcohol") is not None)
    expected = baseline.model.coefficient("alcohol@last")
    if m:
        expected += baseline.model.coefficient("alcohol@mean10") / m
    assert slopes[0] == pytest.approx(expected)
    assert baseline.model.coefficient("not_a_column") == 0.0


def test_baseline_saves_sorted_json(tmp_path, baseline):
    path = baseline.save(tmp_path / "linear_model.json")
    doc = json.loads(path.read_text())
    assert doc["columns"] == list(baseline.model.columns)
    assert doc["aic_trace"][0]["dropped"] is None
    assert len(doc["imputation_means"]) == len(baseline.spec.base_columns)
    assert path.read_text() == baseline.save(tmp_path / "again.json").read_text()
