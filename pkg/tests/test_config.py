"""Run configuration: file, flag and environment precedence; resolved copies."""
from __future__ import annotations

from pathlib import Path

import pytest

from sleepnet.config import (
    RESOLVED_NAME,
    THREADS_ENV,
    ConfigError,
    RunConfig,
    resolve_run_config,
    write_resolved,
)


def _ini(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_without_file_or_flags():
    cfg = resolve_run_config(environ={})
    assert cfg.seed == 0 and cfg.threads == 1 and cfg.folds == 10
    assert cfg.out is None and cfg.data is None
    assert cfg.network.variant == "baseline"
    assert cfg.advisable_set.name == "standard"


def test_single_seed_feeds_every_stream():
    cfg = resolve_run_config(overrides={"seed": 9}, environ={})
    assert cfg.generator.seed == 9 and cfg.network.seed == 9


def test_file_values_and_flag_precedence(tmp_path):
    path = _ini(tmp_path, """
[run]
seed = 4
folds = 5
out = results

[generator]
n_users = 300
rate.alcohol = 0.5

[network]
epochs = 7
lstm_sizes = 16, 8

[recommend]
advisable = pills
step = 0.05
""")
    cfg = resolve_run_config(path, {"seed": 11, "network.epochs": 2, "folds": None}, environ={})
    assert cfg.seed == 11
    assert cfg.folds == 5
    assert cfg.out == Path("results")
    assert cfg.generator.n_users == 300
    assert cfg.generator.rate_overrides == {"alcohol": 0.5}
    assert cfg.network.epochs == 2 and cfg.network.lstm_sizes == (16, 8)
    assert cfg.advisable == "pills" and "sleeping_pills" in cfg.advisable_set.variables
    assert cfg.ascent.step == 0.05


def test_threads_environment_fallback(tmp_path):
    assert resolve_run_config(environ={THREADS_ENV: "3"}).network.threads == 3
    assert resolve_run_config(overrides={"threads": 2}, environ={THREADS_ENV: "3"}).threads == 2
    path = _ini(tmp_path, "[run]\nthreads = 5\n")
    assert resolve_run_config(path, environ={THREADS_ENV: "3"}).threads == 5
    with pytest.raises(ConfigError):
        resolve_run_config(environ={THREADS_ENV: "many"})


def test_variant_applies_its_stages():
    cfg = resolve_run_config(overrides={"network.variant": "no_lstms"}, environ={})
    assert cfg.network.variant == "no_lstms" and not cfg.network.lstms
    extra = resolve_run_config(overrides={"network.variant": "extra_lstm_layer_10",
                                          "network.lstm_sizes": (8, 4)}, environ={})
    assert extra.network.lstm_sizes == (8, 4)


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[run]\ncolour = blue\n",
    "[network]\nseed = 3\n",
    "[generator]\nthreads = 2\n",
    "[network]\nwidth = 3\n",
    "[network]\nzscore = maybe\n",
    "[network]\nepochs = many\n",
    "[network]\nvariant = no_such_variant\n",
    "[run]\nthreads = 0\n",
    "[run]\nfolds = 1\n",
    "[recommend]\nadvisable = everything\n",
    "[generator]\nmissing_rate = 1.5\n",
    "[data]\nfile = x.csv\n",
    "not an ini file",
])
def test_bad_configs_are_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        resolve_run_config(_ini(tmp_path, text), environ={})


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(advisable="everything")
    with pytest.raises(ConfigError):
        RunConfig(folds=1)


def test_resolved_copy_round_trips(tmp_path):
    cfg = resolve_run_config(overrides={"seed": 5, "out": tmp_path, "plot": True,
                                        "network.epochs": 2,
                                        "network.variant": "extra_lstm_layer_10",
                                        "generator.n_users": 50,
                                        "advisable": "no-noise"}, environ={})
    path = write_resolved(cfg, tmp_path)
    assert path.name == RESOLVED_NAME
    again = resolve_run_config(path, environ={})
    assert again == cfg
    assert again.network.lstm_sizes == (50, 10, 10)


def test_resolved_text_is_deterministic(tmp_path):
    cfg = resolve_run_config(overrides={"seed": 1, "generator.missing_rate": 0.1}, environ={})
    text = cfg.to_ini()
    assert text == resolve_run_config(overrides={"seed": 1, "generator.missing_rate": 0.1},
                                      environ={}).to_ini()
    assert text.startswith("[run]\n")
    sections = [line for line in text.splitlines() if line.startswith("[")]
    assert sections == ["[run]", "[data]", "[generator]", "[network]", "[recommend]"]
