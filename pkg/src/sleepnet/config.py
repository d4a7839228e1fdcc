"""Run configuration: an INI file, CLI flags on top, a resolved copy on disk.

Sections and keys::

    [run]        seed, threads, out, folds, plot
    [data]       path                      (diary CSV or a directory holding diary.csv)
    [generator]  GeneratorConfig fields    (rate.<variable> for per-variable binary rates)
    [network]    NetworkConfig fields      (lists comma-separated; variant applies its stages)
    [recommend]  advisable, step, max_iterations, box, target_tolerance, min_step

Precedence: explicit flag, then the file, then (for threads only) the
SLEEPNET_THREADS environment variable, then the dataclass default. The
single run seed feeds every random stream: generator, network and
recommenders. Every CLI run writes ``config.resolved`` so the run can be
repeated byte for byte.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Mapping, Optional

from sleepnet_core.errors import SleepnetError
from sleepnet.qnet import NetworkConfig
from sleepnet.recommend import ADVISABLE_VARIANTS, AdvisableSet, GradientAscentConfig
from sleepnet.synth import GeneratorConfig

RESOLVED_NAME = "config.resolved"
THREADS_ENV = "SLEEPNET_THREADS"

_SECTIONS = ("run", "data", "generator", "network", "recommend")
_RUN_KEYS = ("seed", "threads", "out", "folds", "plot")
# set once by [run] and threaded through; never per section
_SHARED = ("seed", "threads")
_STAGES = ("missing_mask", "elu_on_mask", "cyclic", "zscore", "lstms", "head_elu",
           "rescale_quality", "rescale_intervals", "interval_loss")


class ConfigError(SleepnetError):
    """The config file or a flag value is unusable."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: Optional[Path] = None
    out: Optional[Path] = None
    folds: int = 10
    plot: bool = False
    advisable: str = "standard"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    ascent: GradientAscentConfig = field(default_factory=GradientAscentConfig)

    def __post_init__(self) -> None:
        if self.advisable not in ADVISABLE_VARIANTS:
            raise ConfigError(f"unknown advisable set {self.advisable!r}; "
                              f"known: {list(ADVISABLE_VARIANTS)}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")

    @property
    def advisable_set(self) -> AdvisableSet:
        return AdvisableSet.variant(self.advisable)

    def to_ini(self) -> str:
        """Deterministic text: sections in fixed order, keys sorted."""
        sections: dict[str, dict[str, str]] = {
            "run": {k: _format(getattr(self, k)) for k in _RUN_KEYS},
            "data": {"path": _format(self.data)},
            "generator": {},
            "network": {},
            "recommend": {"advisable": self.advisable},
        }
        for f in dataclasses.fields(self.generator):
            if f.name in _SHARED:
                continue
            value = getattr(self.generator, f.name)
            if f.name == "rate_overrides":
                for var, rate in value.items():
                    sections["generator"][f"rate.{var}"] = _format(float(rate))
            else:
                sections["generator"][f.name] = _format(value)
        for f in dataclasses.fields(self.network):
            if f.name not in _SHARED:
                sections["network"][f.name] = _format(getattr(self.network, f.name))
        for f in dataclasses.fields(self.ascent):
            sections["recommend"][f.name] = _format(getattr(self.ascent, f.name))

        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in sorted(sections[name].items()))
            lines.append("")
        return "\n".join(lines)


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


_BOOLEAN = {"1": True, "yes": True, "true": True, "on": True,
            "0": False, "no": False, "false": False, "off": False}


def _coerce(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOLEAN:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOLEAN[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, date):
            return date.fromisoformat(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p.strip()) for p in raw.split(",") if p.strip())
        if default is None or isinstance(default, Path):
            return Path(raw) if raw else None
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path: Path | str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _apply(target: Any, values: Mapping[str, str], section: str) -> dict[str, Any]:
    """Coerce ``values`` against the defaults of dataclass instance ``target``."""
    names = {f.name for f in dataclasses.fields(target)}
    out: dict[str, Any] = {}
    for key, raw in values.items():
        if key in _SHARED:
            raise ConfigError(f"[{section}] {key}: set it once under [run]")
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        out[key] = _coerce(raw, getattr(target, key), f"[{section}] {key}")
    return out


def resolve_run_config(path: Optional[Path | str] = None,
                       overrides: Optional[Mapping[str, Any]] = None,
                       environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Build a RunConfig from an optional INI file and flag overrides.

    ``overrides`` keys are run keys (``seed``, ``data``, ``advisable`` ...)
    or dotted ``section.key`` names (``network.epochs``); None values mean
    the flag was not given.
    """
    environ = os.environ if environ is None else environ
    file = read_config_file(path) if path is not None else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    run_raw = dict(file.get("run", {}))
    unknown = set(run_raw) - set(_RUN_KEYS)
    if unknown:
        raise ConfigError(f"[run] unknown keys {sorted(unknown)}")
    run_defaults = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    run: dict[str, Any] = {}
    for key in _RUN_KEYS:
        default = run_defaults[key]
        if key in run_raw:
            run[key] = _coerce(run_raw[key], default, f"[run] {key}")
    data_raw = file.get("data", {})
    if set(data_raw) - {"path"}:
        raise ConfigError(f"[data] unknown keys {sorted(set(data_raw) - {'path'})}")
    if data_raw.get("path"):
        run["data"] = Path(data_raw["path"])

    rec_raw = dict(file.get("recommend", {}))
    if "advisable" in rec_raw:
        run["advisable"] = rec_raw.pop("advisable").strip()

    for key in (*_RUN_KEYS, "data", "advisable"):
        if key in overrides:
            run[key] = Path(overrides[key]) if key in ("data", "out") else overrides[key]
    if "threads" not in run and environ.get(THREADS_ENV):
        try:
            run["threads"] = int(environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, "
                              f"got {environ[THREADS_ENV]!r}") from None
    seed = int(run.get("seed", 0))
    threads = int(run.get("threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")

    def section(name: str) -> dict[str, Any]:
        return {k.split(".", 1)[1]: v for k, v in overrides.items() if k.startswith(name + ".")}

    gen_raw = dict(file.get("generator", {}))
    rates = {k[len("rate."):]: float(gen_raw.pop(k)) for k in list(gen_raw) if k.startswith("rate.")}
    gen_kwargs = _apply(GeneratorConfig(), gen_raw, "generator")
    gen_kwargs.update(section("generator"))
    if rates:
        gen_kwargs["rate_overrides"] = rates

    net_raw = dict(file.get("network", {}))
    net_kwargs = _apply(NetworkConfig(), net_raw, "network")
    net_kwargs.update(section("network"))
    variant = net_kwargs.pop("variant", "baseline")
    stages = {k: net_kwargs.pop(k) for k in _STAGES if k in net_kwargs}

    asc_kwargs = _apply(GradientAscentConfig(), rec_raw, "recommend")
    asc_kwargs.update(section("recommend"))

    try:
        generator = GeneratorConfig(seed=seed, **gen_kwargs)
        network = NetworkConfig(seed=seed, threads=threads, **net_kwargs).for_variant(variant)
        if "lstm_sizes" in net_kwargs:
            # an explicit size list already includes any extra layer
            network = dataclasses.replace(network, lstm_sizes=net_kwargs["lstm_sizes"])
        if stages:
            network = dataclasses.replace(network, **stages)
        ascent = GradientAscentConfig(**asc_kwargs)
        run["seed"], run["threads"] = seed, threads
        return RunConfig(generator=generator, network=network, ascent=ascent, **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_resolved(config: RunConfig, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(config.to_ini(), encoding="utf-8", newline="\n")
    return path
