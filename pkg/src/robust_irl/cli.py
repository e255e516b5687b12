"""Command-line entry point: ``robust-irl <study> [options]``.

Exit codes: 0 success, 1 invalid configuration or input, 2 some cells failed.
"""
from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import harness
from .errors import ConfigurationError, PreconditionError, ValidationError
from .harness import ExperimentConfig, Study

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _load(config_path, out, seed_range, study=None) -> ExperimentConfig:
    if config_path:
        cfg = harness.load_experiment_config(config_path)
    else:
        cfg = harness.parse_experiment_config("")
    if out:
        cfg = replace(cfg, out_dir=str(out))
    if seed_range:
        seeds = harness.parse_seed_range(seed_range)
        cfg = replace(cfg, attack_seeds=seeds) if study is Study.ATTACK else replace(cfg, seeds=seeds)
    return cfg


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_INVALID)


def _run(study: Study, config_path, out, workers, seed_range, plots) -> None:
    try:
        cfg = _load(config_path, out, seed_range, study)
        world = cfg.load_world()
    except (ConfigurationError, ValidationError, OSError) as exc:
        _fail(exc)
    click.echo(f"{study.value}: world={world.config.name} config_hash={cfg.hash()} out={cfg.out_dir}")

    def progress(row):
        tail = f" outcome={row.outcome}" if row.outcome else ""
        click.echo(f"  {row.method} sigma={row.sigma:g} seed={row.seed} ile={row.ile:.4g} "
                   f"status={row.status}{tail}")

    try:
        rows = harness.run_study(cfg, study, workers=workers, progress=progress)
    except (ConfigurationError, ValidationError) as exc:
        _fail(exc)
    if plots and any(r.status == "ok" for r in rows):
        for path in harness.emit_plots(rows, cfg.out_dir):
            click.echo(f"wrote {path}")
    if study is Study.ATTACK:
        for (method, sigma), rate in harness.success_rates(rows).items():
            click.echo(f"{method} sigma={sigma:g} success_rate={rate:.3f}")
    else:
        key = (lambda r: (r.method, r.threshold)) if study is Study.CONVERGENCE else (lambda r: (r.method, r.sigma))
        for (method, x), value in harness.mean_by(rows, key, lambda r: r.ile).items():
            click.echo(f"{method} {'threshold' if study is Study.CONVERGENCE else 'sigma'}={x:g} mean_ile={value:.4g}")
    log_path = Path(cfg.out_dir)
    errors = [r for r in rows if r.status != "ok"]
    if errors:
        click.echo(f"{len(errors)} cell(s) failed; see the status column under {log_path}", err=True)
        sys.exit(EXIT_PARTIAL)


_common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config file."),
    click.option("--out", type=click.Path(file_okay=False), help="Output directory (overrides the config)."),
    click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
                 help="Parallel worker processes."),
    click.option("--seed-range", help="Seeds as a..b (inclusive) or a comma list."),
    click.option("--plots/--no-plots", default=True, show_default=True, help="Write SVG charts."),
]


def common_options(fn):
    for option in reversed(_common):
        fn = option(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress details.")
def main(verbose):
    """Reward learning from noisy sound and vision observations."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@common_options
def sweep(config_path, out, workers, seed_range, plots):
    """ILE against observation noise for each method."""
    _run(Study.SWEEP, config_path, out, workers, seed_range, plots)


@main.command()
@common_options
def attack(config_path, out, workers, seed_range, plots):
    """Penetration success rate for each method (patrol worlds)."""
    _run(Study.ATTACK, config_path, out, workers, seed_range, plots)


@main.command()
@common_options
def convergence(config_path, out, workers, seed_range, plots):
    """ILE and wall time against the Gibbs E-step threshold."""
    _run(Study.CONVERGENCE, config_path, out, workers, seed_range, plots)


@main.command()
@click.argument("csv_files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True)
def plot(csv_files, out):
    """Redraw charts from result CSV files."""
    if not csv_files:
        _fail(PreconditionError("give at least one result CSV"))
    rows = []
    try:
        for path in csv_files:
            rows.extend(harness.read_results(path)[1])
        written = harness.emit_plots(rows, out)
    except (PreconditionError, ValidationError, KeyError, ValueError) as exc:
        _fail(exc)
    for path in written:
        click.echo(f"wrote {path}")


@main.command("validate-config")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config file.")
def validate_config(config_path):
    """Check an experiment config and its world; print the config hash."""
    try:
        cfg = _load(config_path, None, None)
        world = cfg.load_world()
    except (ConfigurationError, ValidationError, OSError) as exc:
        _fail(exc)
    click.echo(f"ok world={world.config.name} states={world.mdp.n_states} config_hash={cfg.hash()}")


if __name__ == "__main__":
    main()
