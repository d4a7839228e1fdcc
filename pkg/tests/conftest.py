"""Shared fixtures: a small seeded population, a briefly trained network,
a fitted stepwise baseline, and helpers for hand-built diaries."""
from __future__ import annotations

from datetime import date, timedelta
from typing import NamedTuple, Optional

import pytest

from sleepnet.diary import DiaryRecord, UserHistory
from sleepnet.linear import fit_linear_baseline
from sleepnet.qnet import NetworkConfig, QualityModel, train
from sleepnet.schema import BINARY_IDS, VARIABLE_IDS
from sleepnet.synth import (
    DEFAULT_INTERACTIONS,
    DEFAULT_WEIGHTS,
    GeneratorConfig,
    OracleModel,
    generate_population,
)

N_USERS = 240
SEED = 3

# Quiet, middle-of-the-road night; tests override single fields.
BASE_VALUES: dict[str, float] = {
    "bed_hour": 23.0,
    "bed_minute": 0.0,
    "bed_before_lights_out": 15.0,
    "sleep_onset_latency": 20.0,
    "awake_minutes": 30.0,
    "total_sleep_time": 420.0,
    "total_time_in_bed": 30.0,
    "times_awake": 2.0,
    **{v: 0.0 for v in BINARY_IDS},
}


def make_record(user_id: str, day: date, quality: Optional[int] = 0,
                **values: Optional[float]) -> DiaryRecord:
    full: dict[str, Optional[float]] = dict(BASE_VALUES)
    full.update({"date_day": float(day.day), "date_month": float(day.month),
                 "date_year": float(day.year)})
    full.update(values)
    assert set(full) == set(VARIABLE_IDS)
    return DiaryRecord(user_id, day, full, quality)


def make_history(user_id: str, n_days: int = 5, start: date = date(2017, 3, 1),
                 qualities: Optional[list[Optional[int]]] = None,
                 **last_values: Optional[float]) -> UserHistory:
    """``n_days`` consecutive days; ``last_values`` apply to the last one only."""
    qualities = qualities or [0] * n_days
    records = []
    for i in range(n_days):
        day = start + timedelta(days=i)
        extra = last_values if i == n_days - 1 else {}
        records.append(make_record(user_id, day, qualities[i], **extra))
    return UserHistory(user_id, tuple(records))


@pytest.fixture(scope="session")
def population():
    """(histories, oracle) for a seeded 240-user population."""
    return generate_population(GeneratorConfig(n_users=N_USERS, seed=SEED))


@pytest.fixture(scope="session")
def histories(population):
    return population[0]


@pytest.fixture(scope="session")
def oracle(population):
    return population[1]


@pytest.fixture(scope="session")
def small_config() -> NetworkConfig:
    return NetworkConfig(lstm_sizes=(8, 4), epochs=3, batch_size=64, seed=0)


@pytest.fixture(scope="session")
def trained(histories, small_config):
    """(model, training history) after three epochs."""
    return train(histories, small_config)


@pytest.fixture(scope="session")
def model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def baseline(histories):
    return fit_linear_baseline(histories)


# ── Acceptance populations (slow tests only) ─────────────────────────────

class TrainedPopulation(NamedTuple):
    histories: list[UserHistory]
    oracle: OracleModel
    model: QualityModel
    n_train: int

    @property
    def held_out(self) -> list[UserHistory]:
        return self.histories[self.n_train:]


@pytest.fixture(scope="session")
def acceptance() -> TrainedPopulation:
    """Default 2000-user population; the default network sees the first 1400."""
    histories, oracle = generate_population(GeneratorConfig(n_users=2000, seed=7))
    model, _ = train(histories[:1400], NetworkConfig())
    return TrainedPopulation(histories, oracle, model, 1400)


PLANTED_RATES = {"alcohol": 0.2, "caffeine": 0.2, "noise": 0.2, "lights_on": 0.2,
                 "slept_with_partner": 0.5}


@pytest.fixture(scope="session")
def planted() -> TrainedPopulation:
    """Common advisable habits and a same-night partner x sleep-time interaction.

    The partner effect follows the night's sleep time, so good advice on it
    differs from user to user.
    """
    oracle = OracleModel(
        weights=dict(DEFAULT_WEIGHTS),
        interactions=DEFAULT_INTERACTIONS + (("slept_with_partner", "total_sleep_time", 1.0),),
        traits={},
        seed=11,
    )
    config = GeneratorConfig(n_users=2000, seed=11, rate_overrides=PLANTED_RATES)
    histories, oracle = generate_population(config, oracle)
    model, _ = train(histories, NetworkConfig())
    return TrainedPopulation(histories, oracle, model, len(histories))
