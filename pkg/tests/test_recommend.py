"""Recommenders and the follow rule."""
from __future__ import annotations

import dataclasses
from datetime import date

import numpy as np
import pandas as pd
import pytest

from sleepnet.diary import fit_standardization
from sleepnet.linear import DesignMatrixSpec, LinearBaseline, build_design_matrix, ols_fit
from sleepnet.qnet import NetworkConfig, QualityModel, UntrainedModel, init_params, train
from sleepnet.recommend import (
    BASE_ADVISABLE,
    AdvisableSet,
    GradientAscentConfig,
    NoQualityReported,
    PopulationTooSmall,
    Recommendation,
    ZeroGradient,
    best_day,
    count_ignored,
    is_ignored,
    recommend_best_day,
    recommend_best_neighbourhood,
    recommend_gradient_linear,
    recommend_gradient_nn,
    write_recommendations,
)
from sleepnet.synth import GeneratorConfig, OracleModel, generate_population
from sleepnet_core.protocol import QUALITY_MAX, WINDOW_STEPS

from conftest import make_history, make_record


def _check_domain(rec: Recommendation, advisable: AdvisableSet) -> None:
    for v, value in rec.values.items():
        if value is None:
            assert rec.zero_gradient
        elif advisable.is_binary(v):
            assert value in (0.0, 1.0), (v, value)
        else:
            assert 0.0 <= value <= 720.0, (v, value)


# ── Advisable sets ───────────────────────────────────────────────────────

def test_advisable_variants():
    standard = AdvisableSet.variant("standard")
    assert standard.variables == BASE_ADVISABLE and len(standard.variables) == 8
    assert "exercise" in AdvisableSet.variant("exercise").variables
    assert "sleeping_pills" in AdvisableSet.variant("pills").variables
    assert "noise" not in AdvisableSet.variant("no-noise").variables
    assert set(standard.numeric) == {"sleep_onset_latency", "bed_before_lights_out"}
    assert len(standard.binary) == 6
    with pytest.raises(ValueError):
        AdvisableSet.variant("everything")


# ── Follow rule ──────────────────────────────────────────────────────────

def test_numeric_advice_is_followed_within_thirty_minutes():
    assert not is_ignored("sleep_onset_latency", 400.0, 430.0)
    assert not is_ignored("sleep_onset_latency", 400.0, 370.0)
    assert is_ignored("sleep_onset_latency", 400.0, 431.0)
    assert is_ignored("sleep_onset_latency", 400.0, 369.0)


def test_binary_advice_must_match():
    assert is_ignored("alcohol", 0.0, 1.0)
    assert not is_ignored("alcohol", 1.0, 1.0)


def test_missing_advice_or_missing_actual_is_skipped():
    assert not is_ignored("alcohol", None, 1.0)
    assert not is_ignored("alcohol", 0.0, None)


def test_count_ignored():
    rec = Recommendation("u", {"alcohol": 0.0, "caffeine": 1.0, "sleep_onset_latency": 10.0,
                               "noise": None}, "test")
    actual = make_record("u", date(2017, 3, 1), alcohol=1.0, caffeine=1.0,
                         sleep_onset_latency=60.0, noise=1.0)
    assert count_ignored(rec, actual) == 2
    assert count_ignored(rec, {"alcohol": 0.0, "caffeine": None}) == 0
    only = AdvisableSet(("alcohol",), "one")
    assert count_ignored(rec, actual, only) == 1


def test_for_user_keeps_the_source():
    rec = Recommendation("a", {"alcohol": 0.0}, "neighbourhood")
    moved = rec.for_user("b")
    assert moved.user_id == "b" and moved.source_user == "a"
    assert moved.for_user("c").source_user == "a"
    assert moved.values == rec.values


# ── Best day ─────────────────────────────────────────────────────────────

def test_best_day_prefers_the_most_recent_tie():
    h = make_history("u", n_days=4, qualities=[2, 0, 2, -1])
    assert best_day(h).date == date(2017, 3, 3)
    rec = recommend_best_day(h)
    assert rec.predicted == 2.0
    assert rec.values["alcohol"] == 0.0


def test_best_day_without_any_quality():
    h = make_history("u", n_days=2, qualities=[None, None])
    with pytest.raises(NoQualityReported):
        best_day(h)


# ── Best neighbourhood ───────────────────────────────────────────────────

def _two_clusters():
    good = [make_history(f"g{i}", alcohol=0.0, caffeine=0.0, qualities=[0, 0, 0, 0, 2])
            for i in range(6)]
    bad = [make_history(f"b{i}", alcohol=1.0, caffeine=1.0, qualities=[0, 0, 0, 0, -2])
           for i in range(6)]
    return bad + good


def test_best_neighbourhood_finds_the_good_cluster():
    hs = _two_clusters()
    result = recommend_best_neighbourhood(hs, seed=1, n_candidates=9, n_neighbours=3)
    assert result.best_user.startswith("g")
    assert result.neighbourhood_quality == 2.0
    assert result.recommendation.values["alcohol"] == 0.0
    assert result.recommendation.source_user == result.best_user
    assert len(result.candidate_qualities) == 9
    # ties go to the smallest id among good candidates
    good = sorted(u for u, q in result.candidate_qualities.items() if q == 2.0)
    assert result.best_user == good[0]


def test_best_neighbourhood_is_seeded():
    hs = _two_clusters()
    a = recommend_best_neighbourhood(hs, seed=5, n_candidates=8, n_neighbours=3)
    b = recommend_best_neighbourhood(hs, seed=5, n_candidates=8, n_neighbours=3)
    assert a.best_user == b.best_user
    assert a.candidate_qualities == b.candidate_qualities


def test_best_neighbourhood_needs_enough_users():
    with pytest.raises(PopulationTooSmall):
        recommend_best_neighbourhood(_two_clusters(), n_candidates=10, n_neighbours=3)


# ── Linear gradient ──────────────────────────────────────────────────────

def test_linear_walk_stays_in_domain(baseline, histories):
    stats = fit_standardization(histories, cyclic=baseline.spec.cyclic)
    advisable = AdvisableSet.variant("standard")
    for h in histories[:15]:
        rec = recommend_gradient_linear(baseline, h, stats, advisable)
        _check_domain(rec, advisable)
        start = rec.trace[0]
        assert rec.predicted >= start - 1e-9
        assert rec.predicted <= QUALITY_MAX + 1e-9


def test_linear_walk_without_advisable_columns_warns():
    hs = [make_history(f"u{i}", total_sleep_time=300.0 + 20 * i,
                       qualities=[0, 0, 0, 0, (i % 5) - 2]) for i in range(8)]
    spec = DesignMatrixSpec()
    design = build_design_matrix(hs, spec)
    cols = ["total_sleep_time@last"]
    model = ols_fit(design.select(cols), design.y, cols)
    baseline = LinearBaseline(spec, design.means, model)
    stats = fit_standardization(hs)
    with pytest.warns(ZeroGradient):
        rec = recommend_gradient_linear(baseline, hs[0], stats)
    assert rec.zero_gradient
    assert rec.values["alcohol"] == hs[0].last.values["alcohol"]


def test_linear_walk_reaches_the_top_when_unclamped():
    hs = [make_history(f"u{i}", alcohol=float(i % 2), qualities=[0, 0, 0, 0, -1 if i % 2 else 0])
          for i in range(10)]
    spec = DesignMatrixSpec()
    design = build_design_matrix(hs, spec)
    cols = ["alcohol@last"]
    model = ols_fit(design.select(cols), design.y, cols)
    baseline = LinearBaseline(spec, design.means, model)
    stats = fit_standardization(hs)
    # 'alcohol' lowers quality by 1; the walk needs z beyond the default box
    cfg = GradientAscentConfig(box=1e6)
    rec = recommend_gradient_linear(baseline, hs[0], stats, AdvisableSet(("alcohol",), "a"), cfg)
    assert rec.predicted == pytest.approx(QUALITY_MAX)
    assert rec.values["alcohol"] == 0.0


# ── Network gradient ─────────────────────────────────────────────────────

def test_ascent_config_validation():
    with pytest.raises(ValueError):
        GradientAscentConfig(step=0.0)
    with pytest.raises(ValueError):
        GradientAscentConfig(max_iterations=0)
    with pytest.raises(ValueError):
        GradientAscentConfig(min_step=0.0)
    with pytest.raises(ValueError):
        GradientAscentConfig(step=0.01, min_step=0.1)


def test_network_ascent_only_climbs(model, histories):
    advisable = AdvisableSet.variant("standard")
    batch = model.batch(histories[:25])
    recs = recommend_gradient_nn(model, batch, advisable, GradientAscentConfig(max_iterations=30))
    assert [r.user_id for r in recs] == list(batch.user_ids)
    for rec in recs:
        _check_domain(rec, advisable)
        assert rec.iterations == len(rec.trace) - 1
        assert all(b > a for a, b in zip(rec.trace, rec.trace[1:]))
        assert rec.predicted == rec.trace[-1]
        assert rec.predicted <= QUALITY_MAX


def test_network_ascent_stays_in_the_box(model, histories):
    batch = model.batch(histories[:10])
    tight = GradientAscentConfig(step=10.0, max_iterations=5, box=0.5)
    recs = recommend_gradient_nn(model, batch, AdvisableSet.variant("standard"), tight)
    stats = model.stats
    i = stats.names.index("sleep_onset_latency")
    for rec, start in zip(recs, batch.x[:, WINDOW_STEPS - 1, i]):
        z = stats.to_z(i, rec.values["sleep_onset_latency"])
        bound = max(0.5, abs(start))
        assert -bound - 1e-9 <= z <= bound + 1e-9


def test_network_ascent_leaves_zero_variance_features_at_their_mean(model, histories):
    stats = model.stats
    i = stats.names.index("sleep_onset_latency")
    frozen = stats.zero_variance.copy()
    frozen[i] = True
    pinned = QualityModel(model.params, model.config,
                          dataclasses.replace(stats, zero_variance=frozen), trained=True)
    batch = pinned.batch(histories[:15])
    advisable = AdvisableSet.variant("standard")
    recs = recommend_gradient_nn(pinned, batch, advisable,
                                 GradientAscentConfig(step=2.0, max_iterations=50))
    assert any(r.iterations > 0 for r in recs)
    mean = float(np.clip(stats.mean[i], 0.0, 720.0))
    for rec in recs:
        assert rec.values["sleep_onset_latency"] == pytest.approx(mean)


def test_network_ascent_requires_a_trained_model(model, histories):
    fresh = QualityModel(init_params(model.config, model.stats.n_features, WINDOW_STEPS,
                                     np.random.default_rng(1)), model.config, model.stats)
    with pytest.raises(UntrainedModel):
        recommend_gradient_nn(fresh, model.batch(histories[:3]))
    assert len(recommend_gradient_nn(fresh, model.batch(histories[:3]), require_trained=False)) == 3


@pytest.mark.slow
def test_network_advises_against_a_single_harmful_habit():
    oracle = OracleModel.single_effect("alcohol", -1.0)
    config = GeneratorConfig(n_users=1000, seed=21, rate_overrides={"alcohol": 0.3})
    histories, _ = generate_population(config, oracle)
    trained, _ = train(histories, NetworkConfig(epochs=15))
    recs = recommend_gradient_nn(trained, trained.batch(histories), AdvisableSet(("alcohol",), "a"))
    assert np.mean([r.values["alcohol"] == 0.0 for r in recs]) >= 0.99


# ── Export ───────────────────────────────────────────────────────────────

def test_write_recommendations(tmp_path):
    hs = [make_history("a", alcohol=1.0, sleep_onset_latency=None), make_history("b")]
    advisable = AdvisableSet(("alcohol", "sleep_onset_latency"), "two")
    recs = {"a": Recommendation("a", {"alcohol": 0.0, "sleep_onset_latency": 15.0}, "test")}
    path = write_recommendations(recs, hs, advisable, tmp_path / "recommendations_test.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["user_id", "variable", "recommended_value", "actual_value",
                                   "ignored"]
    assert frame["user_id"].tolist() == ["a", "a"]
    assert frame["ignored"].tolist() == [1, 0]
    assert np.isnan(frame["actual_value"][1])
