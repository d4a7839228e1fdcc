"""Effectiveness curves, shuffle and flip tests, calibration, saliency, interactions."""
from __future__ import annotations

import dataclasses

import numpy as np
import pandas as pd
import pytest

from sleepnet.evaluate import (
    InsufficientSamples,
    NoFullFollowers,
    NoUsers,
    calibration_from_coverage,
    calibration_report,
    compare_recommenders,
    derangement,
    effectiveness_curve,
    first_order_saliency,
    flip_test,
    input_gradients,
    recommend_population,
    score_user,
    second_order_interactions,
    shuffle_test,
    step_labels,
    welch_p_value,
    write_frame,
)
from sleepnet.qnet import NetworkConfig, QualityModel, init_params
from sleepnet.recommend import AdvisableSet, Recommendation
from sleepnet.synth import OracleModel
from sleepnet_core.protocol import NOMINAL_P, WINDOW_STEPS

from conftest import make_history

ALCOHOL = AdvisableSet(("alcohol",), "alcohol")
TWO = AdvisableSet(("alcohol", "caffeine"), "two")


def _advice(histories, **values):
    return {h.user_id: Recommendation(h.user_id, dict(values), "test") for h in histories}


# ── Statistics ───────────────────────────────────────────────────────────

def test_welch_edge_cases():
    assert welch_p_value([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == 1.0
    assert welch_p_value([1.0, 1.0], [2.0, 2.0]) == 0.0
    assert 0.0 < welch_p_value([1.0, 2.0, 3.0], [2.0, 3.5, 4.0]) < 1.0
    with pytest.raises(InsufficientSamples):
        welch_p_value([1.0], [1.0, 2.0])


def test_derangement_has_no_fixed_points():
    for n in (2, 3, 10, 101):
        perm = derangement(n, seed=n)
        assert sorted(perm.tolist()) == list(range(n))
        assert not np.any(perm == np.arange(n))
    np.testing.assert_array_equal(derangement(50, 4), derangement(50, 4))
    with pytest.raises(InsufficientSamples):
        derangement(1, 0)


# ── Effectiveness curves ─────────────────────────────────────────────────

def _mixed_followers():
    followed = [make_history(f"f{i}", alcohol=0.0, qualities=[0, 0, 0, 0, q])
                for i, q in enumerate([1, 1, 2])]
    ignored = [make_history(f"i{i}", alcohol=1.0, qualities=[0, 0, 0, 0, q])
               for i, q in enumerate([-1, -2, -1])]
    lone = [make_history("x0", alcohol=None, qualities=[0, 0, 0, 0, 0])]
    return followed + ignored + lone


def test_curve_buckets_partition_users():
    hs = _mixed_followers()
    curve = effectiveness_curve(_advice(hs, alcohol=0.0), hs, ALCOHOL)
    assert curve.n_users == 7
    assert sum(b.n for b in curve.buckets) == curve.n_users
    assert [b.ignored for b in curve.buckets] == [0, 1]
    # the user with no recorded alcohol counts as following
    assert curve.bucket(0).n == 4
    assert curve.bucket(0).mean == pytest.approx(1.0)
    assert curve.bucket(1).mean == pytest.approx(-4 / 3)
    rho, p = curve.spearman()
    assert rho < 0 and 0 <= p <= 1


def test_single_user_bucket_has_no_standard_error():
    hs = [make_history("a", alcohol=1.0, qualities=[0, 0, 0, 0, 1]),
          make_history("b", alcohol=0.0, qualities=[0, 0, 0, 0, 2]),
          make_history("c", alcohol=0.0, qualities=[0, 0, 0, 0, 0])]
    curve = effectiveness_curve(_advice(hs, alcohol=0.0), hs, ALCOHOL)
    assert curve.bucket(1).se is None
    assert curve.bucket(0).se == pytest.approx(1.0)
    frame = curve.to_frame()
    assert list(frame.columns) == ["recommender", "source", "ignored", "n", "mean", "se"]
    assert np.isnan(frame["se"][1])


def test_unlabeled_users_are_left_out_of_reported_curves():
    hs = [make_history("a", qualities=[0, 0, 0, 0, None]), make_history("b")]
    curve = effectiveness_curve(_advice(hs, alcohol=0.0), hs, ALCOHOL)
    assert curve.user_ids == ("b",)
    with pytest.raises(NoUsers):
        effectiveness_curve(_advice(hs[:1], alcohol=0.0), hs[:1], ALCOHOL)


def test_oracle_sources_score_actual_and_recommended_days():
    oracle = OracleModel.single_effect("alcohol", -1.0)
    h = make_history("a", alcohol=1.0)
    rec = Recommendation("a", {"alcohol": 0.0}, "test")
    assert score_user(h, rec, "oracle_actual", oracle) == pytest.approx(-1.0)
    assert score_user(h, rec, "oracle_recommended", oracle) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        score_user(h, rec, "oracle_actual")
    with pytest.raises(ValueError):
        score_user(h, rec, "guesswork", oracle)


def test_compare_recommenders():
    hs = _mixed_followers()
    a = effectiveness_curve(_advice(hs, alcohol=0.0), hs, ALCOHOL)
    assert compare_recommenders(a, a) == 1.0
    assert compare_recommenders(a, a, bucket=None) == 1.0
    b = effectiveness_curve(_advice(hs, alcohol=1.0), hs, ALCOHOL)
    assert 0.0 <= compare_recommenders(a, b) <= 1.0


# ── Shuffle test ─────────────────────────────────────────────────────────

def test_shuffling_broadcast_advice_changes_nothing():
    hs = _mixed_followers()
    result = shuffle_test(_advice(hs, alcohol=0.0), hs, seed=3, advisable=ALCOHOL)
    np.testing.assert_array_equal(result.before.scores, result.after.scores)
    np.testing.assert_array_equal(result.before.ignored, result.after.ignored)
    assert result.p_value(0) == 1.0
    assert result.after.recommender == "test_shuffled"
    assert not np.any(result.permutation == np.arange(len(hs)))


def test_shuffling_personal_advice_moves_users_between_buckets():
    hs = _mixed_followers()
    # everyone told to do exactly what they did
    recs = {h.user_id: Recommendation(h.user_id, {"alcohol": h.last.values["alcohol"]}, "own")
            for h in hs}
    result = shuffle_test(recs, hs, seed=0, advisable=ALCOHOL)
    assert result.before.bucket(1).n == 0
    assert result.after.bucket(1).n > 0
    summary = result.summary()
    assert set(summary) == {"before", "after", "p_bucket0", "p_all"}


# ── Flip test ────────────────────────────────────────────────────────────

def test_counterfactual_flip_with_oracle():
    oracle = OracleModel.single_effect("alcohol", -1.0)
    hs = [make_history(f"u{i}", alcohol=0.0, caffeine=0.0) for i in range(4)]
    result = flip_test(_advice(hs, alcohol=0.0, caffeine=0.0), hs, TWO, oracle)
    assert result.mode == "oracle"
    assert result.arm("none").p_value == 1.0
    assert result.arm("none").mean == pytest.approx(0.0)
    assert result.arm("alcohol").mean == pytest.approx(-1.0)
    assert result.arm("alcohol").p_value == 0.0
    # caffeine does nothing under this oracle
    assert result.arm("caffeine").p_value == 1.0
    with pytest.raises(KeyError):
        result.arm("noise")
    assert list(result.to_frame()["variable"]) == ["none", "alcohol", "caffeine"]


def test_observational_flip_uses_accidental_followers():
    hs = _mixed_followers()[:6]
    result = flip_test(_advice(hs, alcohol=0.0), hs, ALCOHOL)
    assert result.mode == "reported"
    assert result.arm("none").n == 3
    flipped = result.arm("alcohol")
    assert flipped.n == 3 and flipped.mean == pytest.approx(-4 / 3)
    assert flipped.p_value < 0.05


def test_flip_without_followers():
    hs = [make_history(f"u{i}", alcohol=1.0) for i in range(3)]
    with pytest.raises(NoFullFollowers):
        flip_test(_advice(hs, alcohol=0.0), hs, ALCOHOL, OracleModel.single_effect("alcohol", -1.0))
    with pytest.raises(NoFullFollowers):
        flip_test(_advice(hs, alcohol=0.0), hs, ALCOHOL)


# ── Population recommendations ───────────────────────────────────────────

def test_population_recommenders(model, baseline, histories):
    hs = histories[:40]
    nn = recommend_population("nn", hs, model=model)
    assert list(nn) == [h.user_id for h in hs]
    linear = recommend_population("linear", hs, baseline=baseline)
    assert set(linear) == set(nn)
    hood = recommend_population("neighbourhood", histories, n_candidates=50, n_neighbours=10)
    sources = {r.source_user for r in hood.values()}
    assert len(sources) == 1 and len(hood) == len(histories)
    best = recommend_population("best_day", hs)
    assert all(r.kind == "best_day" for r in best.values())
    with pytest.raises(ValueError):
        recommend_population("oracle", hs)
    with pytest.raises(ValueError):
        recommend_population("nn", hs)


def test_curves_from_every_source(model, histories, oracle):
    recs = recommend_population("best_day", histories)
    for source in ("reported", "oracle_actual", "oracle_recommended"):
        curve = effectiveness_curve(recs, histories, source=source, oracle=oracle)
        assert curve.source == source
        assert np.all(np.abs(curve.scores) <= 2.0)


# ── Calibration ──────────────────────────────────────────────────────────

def test_calibration_from_coverage():
    perfect = calibration_from_coverage(NOMINAL_P, np.array(NOMINAL_P), 50)
    assert perfect.r == pytest.approx(1.0)
    flat = calibration_from_coverage(NOMINAL_P, np.ones(9), 50)
    assert flat.r is None and flat.p_value is None
    assert list(perfect.to_frame().columns) == ["nominal_p", "coverage"]


def test_calibration_report_on_population(model, histories):
    report = calibration_report(model, histories)
    assert report.coverage.shape == (9,)
    assert np.all(np.diff(report.coverage) >= 0)
    assert report.n_users == sum(1 for h in histories if h.last.quality is not None)
    assert set(report.summary()) == {"n_users", "pearson_r", "p_value", "nominal_p", "coverage"}


# ── Saliency ─────────────────────────────────────────────────────────────

def test_step_labels():
    assert step_labels(3) == ("t-2", "t-1", "t0")
    assert len(step_labels()) == WINDOW_STEPS


def test_input_gradients_match_finite_differences(model, histories):
    batch = model.batch(histories[:3])
    g = input_gradients(model, batch.x, batch.miss)
    f = model.stats.names.index("alcohol")
    h = 1e-5
    up, down = batch.x.copy(), batch.x.copy()
    up[:, -1, f] += h
    down[:, -1, f] -= h
    numeric = (model.predict(up, batch.miss)[0].y - model.predict(down, batch.miss)[0].y) / (2 * h)
    np.testing.assert_allclose(g[:, -1, f], numeric, rtol=1e-4, atol=1e-7)


def test_saliency_of_duplicated_users_is_identical(model, histories):
    batch = model.batch([histories[0], histories[0], histories[1]])
    sal = first_order_saliency(model, batch)
    np.testing.assert_allclose(sal.per_user[0], sal.per_user[1])
    assert sal.matrix.shape == (WINDOW_STEPS, 12)
    frame = sal.to_frame()
    assert frame.index[-1] == "t0" and "alcohol" in frame.columns
    lo, hi = sal.bootstrap_ci(n_boot=200, seed=1)
    assert np.all(lo <= sal.matrix + 1e-12) and np.all(sal.matrix <= hi + 1e-12)


def test_saliency_in_original_units(model, histories):
    sal = first_order_saliency(model, model.batch(histories[:20]), features=("total_sleep_time",))
    i = model.stats.names.index("total_sleep_time")
    np.testing.assert_allclose(sal.in_original_units(model.stats),
                               sal.matrix / model.stats.std[i])


def test_saliency_needs_a_window(model, histories):
    with pytest.raises(NoUsers):
        first_order_saliency(model, model.batch(histories[:1]).subset([]))


# ── Interactions ─────────────────────────────────────────────────────────

FEATURES = ("alcohol", "caffeine", "nicotine")


def test_affine_network_has_no_interactions(model, histories):
    config = NetworkConfig(lstm_sizes=(4,), seed=2).for_variant("linear_network")
    affine = QualityModel(init_params(config, model.stats.n_features, WINDOW_STEPS,
                                      np.random.default_rng(2)), config, model.stats)
    inter = second_order_interactions(affine, affine.batch(histories[:4]), FEATURES,
                                      require_trained=False)
    np.testing.assert_allclose(inter.same_day, 0.0, atol=1e-8)
    np.testing.assert_allclose(inter.cross_time, 0.0, atol=1e-8)


def test_interactions_are_symmetric(model, histories):
    inter = second_order_interactions(model, model.batch(histories[:5]), FEATURES)
    np.testing.assert_allclose(inter.same_day_raw, inter.same_day_raw.T, atol=1e-5)
    np.testing.assert_array_equal(inter.same_day, inter.same_day.T)
    assert inter.cross_time.shape == (WINDOW_STEPS, WINDOW_STEPS)
    np.testing.assert_allclose(inter.cross_time, inter.cross_time.T, atol=1e-5)
    assert inter.same_day_mean >= 0 and inter.cross_day_mean >= 0
    assert inter.n_users == 5


def test_cross_time_map_counts_a_feature_with_itself(model, histories):
    inter = second_order_interactions(model, model.batch(histories[:1]), ("alcohol",))
    assert inter.cross_time.max() > 0
    last = WINDOW_STEPS - 1
    assert inter.cross_time[last, last] == abs(inter.same_day_raw[0, 0])


def test_threaded_interactions_match_serial(model, histories):
    batch = model.batch(histories[:3])
    threaded = dataclasses.replace(model, config=dataclasses.replace(model.config, threads=4))
    a = second_order_interactions(model, batch, FEATURES[:2])
    b = second_order_interactions(threaded, batch, FEATURES[:2])
    np.testing.assert_allclose(a.same_day_raw, b.same_day_raw, atol=1e-12)


# ── Files ────────────────────────────────────────────────────────────────

def test_write_frame_is_stable(tmp_path):
    frame = pd.DataFrame({"a": [1.0 / 3.0, 2.0], "b": ["x", "y"]})
    path = write_frame(frame, tmp_path / "sub" / "f.csv")
    assert path.read_text() == "a,b\n0.333333,x\n2,y\n"


# ── Acceptance runs ──────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def default_advice(acceptance):
    return {kind: recommend_population(kind, acceptance.histories, model=acceptance.model, seed=0)
            for kind in ("nn", "best_day", "neighbourhood")}


@pytest.fixture(scope="module")
def planted_advice(planted):
    return recommend_population("nn", planted.histories, model=planted.model)


@pytest.mark.slow
def test_network_advice_beats_best_day_and_neighbourhood(acceptance, default_advice):
    curves = {kind: effectiveness_curve(recs, acceptance.histories, source="oracle_recommended",
                                        oracle=acceptance.oracle)
              for kind, recs in default_advice.items()}
    nn = curves["nn"]
    assert nn.n_users >= 500
    for other in ("best_day", "neighbourhood"):
        assert nn.mean > curves[other].mean, other
        assert compare_recommenders(nn, curves[other], bucket=None) < 0.01, other


@pytest.mark.slow
def test_ignoring_network_advice_goes_with_worse_sleep(acceptance, default_advice):
    actual = effectiveness_curve(default_advice["nn"], acceptance.histories,
                                 source="oracle_actual", oracle=acceptance.oracle)
    rho, p = actual.spearman()
    assert rho is not None and rho < 0
    assert p < 0.05


@pytest.mark.slow
def test_shuffling_neighbourhood_advice_is_bit_identical(acceptance, default_advice):
    result = shuffle_test(default_advice["neighbourhood"], acceptance.histories, seed=3,
                          source="oracle_recommended", oracle=acceptance.oracle)
    np.testing.assert_array_equal(result.before.scores, result.after.scores)
    np.testing.assert_array_equal(result.before.ignored, result.after.ignored)


@pytest.mark.slow
def test_shuffled_personal_advice_loses_value(planted, planted_advice):
    result = shuffle_test(planted_advice, planted.histories, seed=0,
                          source="oracle_recommended", oracle=planted.oracle)
    assert result.after.mean < result.before.mean
    assert result.p_value(None) < 0.01


@pytest.mark.slow
def test_flipping_planted_habits_hurts_and_the_null_does_nothing(planted, planted_advice):
    flips = flip_test(planted_advice, planted.histories, oracle=planted.oracle)
    base = flips.arm("none")
    for v in ("alcohol", "caffeine", "noise", "lights_on"):
        arm = flips.arm(v)
        assert arm.mean < base.mean, v
        assert arm.p_value is not None and arm.p_value < 0.01, v

    rng = np.random.default_rng(0)
    ids = list(planted_advice)
    quiet = 0
    for _ in range(20):
        keep = np.sort(rng.choice(len(ids), size=int(0.8 * len(ids)), replace=False))
        subset = {ids[i]: planted_advice[ids[i]] for i in keep}
        p = flip_test(subset, planted.histories, oracle=planted.oracle).arm("nicotine").p_value
        quiet += p is not None and p > 0.05
    assert quiet >= 16


@pytest.mark.slow
def test_same_night_interactions_dominate(planted):
    features = ("slept_with_partner", "total_sleep_time", "alcohol", "noise", "lights_on")
    model = planted.model
    inter = second_order_interactions(model, model.batch(planted.histories[:100]), features)
    assert inter.same_day_mean > inter.cross_day_mean
    # the planted partner x sleep-time term is positive
    assert inter.same_day[0, 1] > 0
