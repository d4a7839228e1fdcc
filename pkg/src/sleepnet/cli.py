"""sleepnet: diary population to recommendations, end to end.

Typical run::

    sleepnet synth --users 2000 --seed 7 --out pop/
    sleepnet train --data pop/ --out run/
    sleepnet evaluate --data pop/ --model run/model.ckpt --recommender all --out eval/

Every subcommand writes ``config.resolved`` into its output directory
next to its CSV/JSON results; CSV is the source of truth and ``--plot``
adds SVG views. Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Optional, Sequence

import click
import numpy as np
import pandas as pd

from sleepnet_core.errors import SleepnetError
from sleepnet import evaluate as ev
from sleepnet.config import RunConfig, resolve_run_config, write_resolved
from sleepnet.diary import UserHistory, describe_population, parse_dataset, write_dataset
from sleepnet.linear import fit_linear_baseline, significant_columns
from sleepnet.qnet import VARIANTS, QualityModel, ablate, cross_validate, load_model, save_model, train
from sleepnet.recommend import ADVISABLE_VARIANTS, write_recommendations
from sleepnet.synth import OracleModel, generate_population, load_oracle, save_oracle

DIARY_NAME = "diary.csv"
ORACLE_NAME = "oracle.json"


class UnknownSubcommand(click.UsageError):
    pass


class MissingRequiredFlag(click.UsageError):
    pass


# ── Shared plumbing ──────────────────────────────────────────────────────

def run_options(func):
    """Flags every subcommand shares; all feed resolve_run_config."""
    @click.option("--config", "config_path", default=None,
                  type=click.Path(exists=True, dir_okay=False, path_type=Path),
                  help="INI run config; flags override it.")
    @click.option("--seed", default=None, type=int, help="Single seed for every random stream.")
    @click.option("--threads", default=None, type=int,
                  help="Worker threads (default 1, or $SLEEPNET_THREADS).")
    @click.option("--out", default=None, type=click.Path(file_okay=False, path_type=Path),
                  help="Output directory.")
    @click.option("--plot", is_flag=True, default=None, help="Also write SVG figures.")
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)
    return wrapper


def data_option():
    return click.option("--data", default=None,
                        type=click.Path(exists=True, path_type=Path),
                        help=f"Diary CSV, or a directory holding {DIARY_NAME} (and {ORACLE_NAME}).")


def model_option(required: bool = True):
    return click.option("--model", "model_path", required=required,
                        type=click.Path(exists=True, file_okay=False, path_type=Path),
                        help="Checkpoint directory written by `train`.")


def _resolve(config_path: Optional[Path], **overrides: Any) -> RunConfig:
    cfg = resolve_run_config(config_path, overrides)
    if cfg.out is None:
        raise MissingRequiredFlag("--out is required (flag or [run] out)")
    write_resolved(cfg, cfg.out)
    return cfg


def _need_data(cfg: RunConfig) -> Path:
    if cfg.data is None:
        raise MissingRequiredFlag("--data is required (flag or [data] path)")
    return cfg.data


def load_data(path: Path, oracle_path: Optional[Path] = None
              ) -> tuple[list[UserHistory], Optional[OracleModel]]:
    """A directory yields its diary and, when present, its oracle."""
    path = Path(path)
    if path.is_dir():
        csv = path / DIARY_NAME
        if oracle_path is None and (path / ORACLE_NAME).is_file():
            oracle_path = path / ORACLE_NAME
    else:
        csv = path
    histories = parse_dataset(csv)
    oracle = load_oracle(oracle_path) if oracle_path is not None else None
    click.echo(f"  data: {len(histories)} users from {csv}"
               + (f", oracle {oracle_path}" if oracle is not None else ""))
    return histories, oracle


def _load_model(path: Path, cfg: RunConfig) -> QualityModel:
    model = load_model(path)
    model.config = dataclasses.replace(model.config, threads=cfg.threads)
    return model


def _write_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _plot(cfg: RunConfig, draw, *args, **kwargs) -> None:
    if not cfg.plot:
        return
    from sleepnet import plot
    out = getattr(plot, draw)(*args, **kwargs)
    click.echo(f"  figure: {out}")


# ── Commands ─────────────────────────────────────────────────────────────

@click.group()
def main() -> None:
    """Sleep-quality network, baselines, recommenders and their evaluation.

    \b
    Figure-style outputs and the command producing each:
      population table          stats
      effectiveness curves      evaluate --recommender all [--variant exercise|pills|no-noise]
      prediction vs reported    train   (training_history.csv, per-epoch loss)
      saliency map              explain
      interval calibration      calibrate
      shuffle robustness        shuffle-test --recommender nn|linear|neighbourhood
      single-switch robustness  flip-test
      ablations                 ablate
      stepwise AIC + betas      train-linear
      model comparison          cv --compare-linear
      second-order structure    explain2
    """


@main.command("synth")
@run_options
@click.option("--users", default=None, type=int, help="Population size.")
@click.option("--missing-rate", default=None, type=float)
def synth_cmd(config_path, seed, threads, out, plot, users, missing_rate) -> None:
    """Generate a diary population and its ground-truth oracle."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot,
                   **{"generator.n_users": users, "generator.missing_rate": missing_rate})
    histories, oracle = generate_population(cfg.generator)
    csv = write_dataset(histories, cfg.out / DIARY_NAME)
    js = save_oracle(oracle, cfg.out / ORACLE_NAME)
    click.echo(f"PASS: {len(histories)} users -> {csv}, oracle -> {js}")


@main.command("stats")
@run_options
@data_option()
def stats_cmd(config_path, seed, threads, out, plot, data) -> None:
    """Per-variable population summary (mean [P10, P90] or count [%])."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data)
    histories, _ = load_data(_need_data(cfg))
    rows = [dataclasses.asdict(s) for s in describe_population(histories)]
    path = ev.write_frame(pd.DataFrame(rows), cfg.out / "population_stats.csv")
    click.echo(f"PASS: {len(rows)} rows -> {path}")


@main.command("train")
@run_options
@data_option()
@click.option("--epochs", default=None, type=int)
@click.option("--variant", default=None, type=click.Choice(sorted(VARIANTS)),
              help="Architecture variant (default baseline).")
def train_cmd(config_path, seed, threads, out, plot, data, epochs, variant) -> None:
    """Train the quality network on every labeled user and checkpoint it."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   **{"network.epochs": epochs, "network.variant": variant})
    histories, _ = load_data(_need_data(cfg))
    model, history = train(histories, cfg.network)
    ckpt_id = save_model(model, cfg.out / "model.ckpt")
    rows = [{"epoch": e.epoch,
             "train_mse": e.train.quality_mse, "train_interval": e.train.interval_loss,
             "val_mse": np.nan if e.validation is None else e.validation.quality_mse,
             "val_interval": np.nan if e.validation is None else e.validation.interval_loss}
            for e in history.epochs]
    ev.write_frame(pd.DataFrame(rows), cfg.out / "training_history.csv")
    _plot(cfg, "plot_series", history.train_mse(), cfg.out / "training_mse.svg",
          "epoch", "train quality mse")
    click.echo(f"  checkpoint id: {ckpt_id}")
    click.echo(f"PASS: trained {cfg.network.variant} (best epoch {history.best_epoch}) "
               f"-> {cfg.out / 'model.ckpt'}")


def _fold_frame(result) -> pd.DataFrame:
    rows = []
    for f in result.folds:
        row = {"fold": f.fold, "n_train": f.n_train, "n_test": f.n_test,
               "quality_mse": f.quality_mse, "interval_loss": f.interval_loss,
               "calibration_r": np.nan if f.calibration_r is None else f.calibration_r,
               "linear_mse": np.nan if f.linear_mse is None else f.linear_mse}
        row.update({f"coverage_{i + 1}": c for i, c in enumerate(f.coverage)})
        rows.append(row)
    return pd.DataFrame(rows)


@main.command("cv")
@run_options
@data_option()
@click.option("--folds", default=None, type=int)
@click.option("--variant", default=None, type=click.Choice(sorted(VARIANTS)))
@click.option("--compare-linear", is_flag=True, default=False,
              help="Also fit the stepwise linear model on every training fold.")
def cv_cmd(config_path, seed, threads, out, plot, data, folds, variant, compare_linear) -> None:
    """K-fold cross-validation over users."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   folds=folds, **{"network.variant": variant})
    histories, _ = load_data(_need_data(cfg))
    result = cross_validate(histories, cfg.network, cfg.folds, compare_linear=compare_linear)
    name = cfg.network.variant
    ev.write_frame(_fold_frame(result), cfg.out / f"cv_{name}.csv")
    mse, se = result.mse
    summary = {"variant": name, "folds": cfg.folds, "mse": mse, "mse_se": se,
               "mean_coverage": [float(c) for c in result.mean_coverage],
               "linear_mse": result.linear_mse, "linear_p_value": result.linear_p_value}
    _write_json(summary, cfg.out / f"cv_{name}.json")
    click.echo(f"PASS: {name} mse={mse:.4f}" + (f" ± {se:.4f}" if se is not None else ""))


@main.command("ablate")
@run_options
@data_option()
@click.option("--folds", default=None, type=int)
@click.option("--variant", "variants", multiple=True,
              type=click.Choice(sorted(v for v in VARIANTS if v != "baseline")),
              help="Repeatable; default every variant.")
def ablate_cmd(config_path, seed, threads, out, plot, data, folds, variants) -> None:
    """Cross-validate architecture variants against the baseline, same seed and budget."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   folds=folds)
    histories, _ = load_data(_need_data(cfg))
    variants = variants or tuple(v for v in VARIANTS if v != "baseline")
    base_cfg = cfg.network.for_variant("baseline")
    baseline = cross_validate(histories, base_cfg, cfg.folds)
    rows = []
    for v in variants:
        res = ablate(histories, base_cfg, v, cfg.folds, baseline=baseline)
        r_base, r_alt = res.calibration()
        rows.append({"variant": v, "mean_mse_difference": res.mean_difference,
                     "p_value": res.p_value, "baseline_mse": res.baseline.mse[0],
                     "altered_mse": res.altered.mse[0],
                     "baseline_calibration_r": np.nan if r_base is None else r_base,
                     "altered_calibration_r": np.nan if r_alt is None else r_alt})
    path = ev.write_frame(pd.DataFrame(rows), cfg.out / "ablation.csv")
    click.echo(f"PASS: {len(rows)} variants -> {path}")


@main.command("train-linear")
@run_options
@data_option()
@click.option("--alpha", default=0.01, show_default=True, type=float,
              help="Significance level for the Bonferroni count.")
def train_linear_cmd(config_path, seed, threads, out, plot, data, alpha) -> None:
    """Fit the stepwise-AIC linear baseline; write coefficients and the AIC trace."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data)
    histories, _ = load_data(_need_data(cfg))
    baseline = fit_linear_baseline(histories)
    baseline.save(cfg.out / "linear_model.json")
    m = baseline.model
    significant = set(significant_columns(m, alpha))
    ev.write_frame(pd.DataFrame({
        "column": list(m.columns), "b": m.coef, "beta": m.beta, "p_value": m.p_values,
        "significant": [int(c in significant) for c in m.columns],
    }), cfg.out / "linear_coefficients.csv")
    ev.write_frame(pd.DataFrame([dataclasses.asdict(s) for s in baseline.trace]),
                   cfg.out / "aic_trace.csv")
    _plot(cfg, "plot_series", [s.aic for s in baseline.trace], cfg.out / "aic_trace.svg",
          "elimination step", "AIC")
    click.echo(f"PASS: {len(m.columns)} columns retained, {len(significant)} significant "
               f"(Bonferroni, alpha={alpha}); AIC={m.aic:.1f} R²={m.r2:.3f}")


def _recommendations(kind: str, histories, cfg: RunConfig, model_path: Optional[Path]):
    model = _load_model(model_path, cfg) if kind == "nn" and model_path else None
    if kind == "nn" and model is None:
        raise MissingRequiredFlag("--model is required for the nn recommender")
    baseline = fit_linear_baseline(histories) if kind == "linear" else None
    return ev.recommend_population(kind, histories, model=model, baseline=baseline,
                                   advisable=cfg.advisable_set, seed=cfg.seed, cfg=cfg.ascent)


@main.command("recommend")
@run_options
@data_option()
@model_option(required=False)
@click.option("--recommender", default="nn", show_default=True,
              type=click.Choice(ev.RECOMMENDERS))
@click.option("--variant", "advisable", default=None, type=click.Choice(ADVISABLE_VARIANTS),
              help="Advisable variable set.")
def recommend_cmd(config_path, seed, threads, out, plot, data, model_path, recommender,
                  advisable) -> None:
    """Recommend last-day behaviour for every user."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   advisable=advisable)
    histories, _ = load_data(_need_data(cfg))
    recs = _recommendations(recommender, histories, cfg, model_path)
    path = write_recommendations(recs, histories, cfg.advisable_set,
                                 cfg.out / f"recommendations_{recommender}.csv")
    click.echo(f"PASS: {len(recs)} {recommender} recommendations -> {path}")


def _sources(oracle: Optional[OracleModel]) -> tuple[str, ...]:
    return ev.SOURCES if oracle is not None else ("reported",)


def _kinds(recommender: str, model_path: Optional[Path]) -> tuple[str, ...]:
    if recommender != "all":
        return (recommender,)
    return tuple(k for k in ev.RECOMMENDERS if k != "nn" or model_path is not None)


@main.command("evaluate")
@run_options
@data_option()
@model_option(required=False)
@click.option("--recommender", default="all", show_default=True,
              type=click.Choice(("all",) + ev.RECOMMENDERS))
@click.option("--variant", "advisable", default=None, type=click.Choice(ADVISABLE_VARIANTS),
              help="Advisable variable set (no-noise bars advice on background noise).")
@click.option("--oracle", "oracle_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def evaluate_cmd(config_path, seed, threads, out, plot, data, model_path, recommender,
                 advisable, oracle_path) -> None:
    """Effectiveness curves per recommender and Welch comparisons against the network."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   advisable=advisable)
    histories, oracle = load_data(_need_data(cfg), oracle_path)
    curves: dict[tuple[str, str], ev.EffectivenessCurve] = {}
    for kind in _kinds(recommender, model_path):
        try:
            recs = _recommendations(kind, histories, cfg, model_path)
        except SleepnetError as exc:
            if recommender != "all":
                raise
            click.echo(f"  skipped {kind}: {exc}")
            continue
        for source in _sources(oracle):
            curve = ev.effectiveness_curve(recs, histories, cfg.advisable_set, source, oracle, kind)
            curves[(kind, source)] = curve
            ev.write_frame(curve.to_frame(), cfg.out / f"effectiveness_{kind}_{source}.csv")

    summary: dict[str, Any] = {"advisable": cfg.advisable,
                               "curves": [c.summary() for c in curves.values()],
                               "comparisons": []}
    for (kind, source), curve in curves.items():
        if kind == "nn" or ("nn", source) not in curves:
            continue
        bucket = None if source == "oracle_recommended" else 0
        try:
            p = ev.compare_recommenders(curves[("nn", source)], curve, bucket)
        except ev.InsufficientSamples:
            p = None
        summary["comparisons"].append({"a": "nn", "b": kind, "source": source,
                                       "bucket": bucket, "p_value": p})
    _write_json(summary, cfg.out / "evaluate.json")
    for source in _sources(oracle):
        group = [c for (k, s), c in curves.items() if s == source]
        if group:
            _plot(cfg, "plot_curves", group, cfg.out / f"effectiveness_{source}.svg",
                  title=cfg.advisable)
    click.echo(f"PASS: {len(curves)} curves -> {cfg.out}")


@main.command("shuffle-test")
@run_options
@data_option()
@model_option(required=False)
@click.option("--recommender", default="nn", show_default=True,
              type=click.Choice(ev.RECOMMENDERS))
@click.option("--variant", "advisable", default=None, type=click.Choice(ADVISABLE_VARIANTS))
@click.option("--oracle", "oracle_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def shuffle_test_cmd(config_path, seed, threads, out, plot, data, model_path, recommender,
                     advisable, oracle_path) -> None:
    """Re-score after giving every user another user's advice (seeded derangement)."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   advisable=advisable)
    histories, oracle = load_data(_need_data(cfg), oracle_path)
    recs = _recommendations(recommender, histories, cfg, model_path)
    summary = {}
    for source in _sources(oracle):
        res = ev.shuffle_test(recs, histories, cfg.seed, cfg.advisable_set, source, oracle)
        frame = pd.concat([res.before.to_frame(), res.after.to_frame()], ignore_index=True)
        ev.write_frame(frame, cfg.out / f"shuffle_{recommender}_{source}.csv")
        summary[source] = res.summary()
        _plot(cfg, "plot_curves", [res.before, res.after],
              cfg.out / f"shuffle_{recommender}_{source}.svg", title=source)
    _write_json(summary, cfg.out / f"shuffle_{recommender}.json")
    click.echo(f"PASS: shuffle test for {recommender} over {len(summary)} score sources")


@main.command("flip-test")
@run_options
@data_option()
@model_option()
@click.option("--variant", "advisable", default=None, type=click.Choice(ADVISABLE_VARIANTS))
@click.option("--oracle", "oracle_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def flip_test_cmd(config_path, seed, threads, out, plot, data, model_path, advisable,
                  oracle_path) -> None:
    """Switch one binary recommendation at a time among full followers and re-score."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data,
                   advisable=advisable)
    histories, oracle = load_data(_need_data(cfg), oracle_path)
    recs = _recommendations("nn", histories, cfg, model_path)
    res = ev.flip_test(recs, histories, cfg.advisable_set, oracle)
    path = ev.write_frame(res.to_frame(), cfg.out / "flip.csv")
    click.echo(f"PASS: {len(res.arms) - 1} switched variables ({res.mode} scoring) -> {path}")


@main.command("calibrate")
@run_options
@data_option()
@model_option()
def calibrate_cmd(config_path, seed, threads, out, plot, data, model_path) -> None:
    """Empirical coverage of each nominal interval on reported quality."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data)
    histories, _ = load_data(_need_data(cfg))
    report = ev.calibration_report(_load_model(model_path, cfg), histories)
    ev.write_frame(report.to_frame(), cfg.out / "calibration.csv")
    _write_json(report.summary(), cfg.out / "calibration.json")
    _plot(cfg, "plot_calibration", report, cfg.out / "calibration.svg")
    r = "n/a" if report.r is None else f"{report.r:.3f}"
    click.echo(f"PASS: calibration over {report.n_users} users, r={r}")


@main.command("explain")
@run_options
@data_option()
@model_option()
@click.option("--bootstrap", default=1000, show_default=True, type=int)
def explain_cmd(config_path, seed, threads, out, plot, data, model_path, bootstrap) -> None:
    """Mean first derivatives over the window, binary variables."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data)
    histories, _ = load_data(_need_data(cfg))
    model = _load_model(model_path, cfg)
    sal = ev.first_order_saliency(model, model.batch(histories))
    ev.write_frame(sal.to_frame(), cfg.out / "saliency.csv", index=True)
    original = pd.DataFrame(sal.in_original_units(model.stats), index=sal.to_frame().index,
                            columns=list(sal.features))
    ev.write_frame(original, cfg.out / "saliency_original_units.csv", index=True)
    low, high = sal.bootstrap_ci(bootstrap, cfg.seed)
    labels = ev.step_labels(sal.matrix.shape[0])
    ci = pd.DataFrame([{"step": labels[t], "feature": f, "mean": sal.matrix[t, j],
                        "low": low[t, j], "high": high[t, j]}
                       for t in range(len(labels)) for j, f in enumerate(sal.features)])
    ev.write_frame(ci, cfg.out / "saliency_ci.csv")
    _plot(cfg, "plot_heatmap", sal.matrix, labels, sal.features, cfg.out / "saliency.svg",
          title="mean dy/dx")
    click.echo(f"PASS: saliency over {sal.per_user.shape[0]} users -> {cfg.out}")


@main.command("explain2")
@run_options
@data_option()
@model_option()
@click.option("--users", "max_users", default=200, show_default=True, type=int,
              help="First N users; each perturbed input costs two backward passes over them.")
@click.option("--fd-step", "fd_step", default=None, type=float, help="Central-difference step.")
def explain2_cmd(config_path, seed, threads, out, plot, data, model_path, max_users,
                 fd_step) -> None:
    """Second derivatives: same-day matrix and the time-pair map."""
    cfg = _resolve(config_path, seed=seed, threads=threads, out=out, plot=plot, data=data)
    histories, _ = load_data(_need_data(cfg))
    model = _load_model(model_path, cfg)
    batch = model.batch(histories[:max_users])
    kwargs = {} if fd_step is None else {"h": fd_step}
    im = ev.second_order_interactions(model, batch, **kwargs)
    labels = ev.step_labels(im.cross_time.shape[0])
    ev.write_frame(pd.DataFrame(im.same_day, index=pd.Index(im.features, name="feature"),
                                columns=list(im.features)),
                   cfg.out / "interactions_same_day.csv", index=True)
    ev.write_frame(pd.DataFrame(im.cross_time, index=pd.Index(labels, name="step"),
                                columns=list(labels)),
                   cfg.out / "interactions_cross_time.csv", index=True)
    _write_json(im.summary(), cfg.out / "interactions.json")
    _plot(cfg, "plot_heatmap", im.same_day, im.features, im.features,
          cfg.out / "interactions_same_day.svg", title="d²y/dx₁dx₂, last day")
    _plot(cfg, "plot_heatmap", im.cross_time, labels, labels,
          cfg.out / "interactions_cross_time.svg", title="mean |d²y|", diverging=False)
    ratio = "n/a" if im.ratio is None else f"{im.ratio:.2f}"
    click.echo(f"PASS: interactions over {im.n_users} users, same/cross-day ratio {ratio}")


# ── Entry points ─────────────────────────────────────────────────────────

def cli_dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand; 0 success, 1 usage error, 2 data error."""
    argv = list(argv)
    if argv and not argv[0].startswith("-") and argv[0] not in main.commands:
        click.echo(f"Error: {UnknownSubcommand(f'no such subcommand {argv[0]!r}').format_message()}",
                   err=True)
        return 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            rv = main.main(args=argv, prog_name="sleepnet", standalone_mode=False)
    except click.MissingParameter as exc:
        click.echo(f"Error: {MissingRequiredFlag(exc.format_message()).format_message()}", err=True)
        return 1
    except click.UsageError as exc:
        click.echo(f"Error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"Error: {exc.format_message()}", err=True)
        return 1
    except click.Abort:
        return 1
    except SleepnetError as exc:
        click.echo(f"FATAL: {exc}", err=True)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    return rv if isinstance(rv, int) else 0


def run() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    run()
