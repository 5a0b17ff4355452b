"""Command-line entry point (``tdlab``)."""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from tdlab import experiment as ex
from tdlab.errors import TDLabError
from tdlab.eval_protocol import EVAL_MODES

config_opt = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                          help="Experiment TOML file.")
out_opt = click.option("--out", default=None, type=click.Path(file_okay=False),
                       help="Run directory (overrides TDLAB_OUT and the config's `out`).")
seed_opt = click.option("--seed", type=int, default=None, help="Seed (defaults to every seed in the config).")
regime_opt = click.option("--regime", default=None, help="Regime name (defaults to every regime in the config).")


def _fail(e: Exception) -> None:
    click.echo(f"error: {e}", err=True)
    sys.exit(2)


def _prepare(config_path: str, out: str | None) -> tuple[ex.ExperimentConfig, ex.RunDir]:
    cfg = ex.load_config(config_path)
    rd = ex.RunDir(ex.resolve_out(cfg, out)).ensure()
    return cfg, rd


def _selection(cfg: ex.ExperimentConfig, regime: str | None, seed: int | None, extra: tuple[str, ...] = ()):
    names = list(cfg.regimes) + list(extra)
    if regime is not None and regime not in names:
        raise click.BadParameter(f"unknown regime {regime!r}; defined: {', '.join(names)}", param_hint="--regime")
    regimes = [regime] if regime else list(cfg.regimes)
    seeds = [seed] if seed is not None else list(cfg.seeds)
    return [(r, s) for s in seeds for r in regimes]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Token-selective, confidence-weighted distillation lab."""
    handler = logging.StreamHandler()
    handler.setLevel(logging.INFO if verbose else logging.WARNING)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.INFO, handlers=[handler])


@main.command()
@config_opt
@out_opt
def generate(config_path: str, out: str | None) -> None:
    """Generate the synthetic dataset into <run>/data."""
    try:
        cfg, rd = _prepare(config_path, out)
        ds = ex.stage_generate(cfg, rd)
    except TDLabError as e:
        _fail(e)
    click.echo(f"{rd.data}: {len(ds.train)} train / {len(ds.val)} val / {len(ds.test)} test")


@main.command("pretrain-teacher")
@config_opt
@out_opt
def pretrain_teacher(config_path: str, out: str | None) -> None:
    """Contrastively pretrain (or reuse) the teacher checkpoint."""
    try:
        cfg, rd = _prepare(config_path, out)
        ex.stage_pretrain_teacher(cfg, rd)
    except TDLabError as e:
        _fail(e)
    click.echo(str(rd.teacher))


@main.command()
@config_opt
@out_opt
@regime_opt
@seed_opt
def train(config_path: str, out: str | None, regime: str | None, seed: int | None) -> None:
    """Train student(s); needs `generate` (and `pretrain-teacher` for distilled regimes)."""
    try:
        cfg, rd = _prepare(config_path, out)
        for r, s in _selection(cfg, regime, seed, (ex.TEXT_ONLY,)):
            ex.stage_train(cfg, rd, r, s)
            click.echo(str(rd.model(r, s)))
    except TDLabError as e:
        _fail(e)


@main.command()
@config_opt
@out_opt
@regime_opt
@seed_opt
@click.option("--eval", "modes", multiple=True, type=click.Choice(EVAL_MODES),
              help="Evaluation mode (repeatable; defaults to the config's eval_modes).")
def evaluate(config_path: str, out: str | None, regime: str | None, seed: int | None, modes: tuple[str, ...]) -> None:
    """Evaluate trained checkpoints; writes reports/metrics/<regime>/seed<k>.json."""
    try:
        cfg, rd = _prepare(config_path, out)
        for r, s in _selection(cfg, regime, seed, (ex.TEACHER_ROW,)):
            reps = ex.stage_evaluate(cfg, rd, r, s, modes or None)
            click.echo(f"{r} seed{s}: " + "  ".join(f"{m}={rep.accuracy:.4f}" for m, rep in reps.items()))
    except TDLabError as e:
        _fail(e)


@main.command()
@config_opt
@out_opt
@regime_opt
@seed_opt
def analyze(config_path: str, out: str | None, regime: str | None, seed: int | None) -> None:
    """Modality-importance tables/plots and attention traces for trained students."""
    try:
        cfg, rd = _prepare(config_path, out)
        for r, s in _selection(cfg, regime, seed):
            table = ex.stage_analyze(cfg, rd, r, s)
            if table is not None:
                click.echo(f"{r} seed{s}: MI gap {table.gap():.4f}")
    except TDLabError as e:
        _fail(e)


@main.command()
@config_opt
@out_opt
def run(config_path: str, out: str | None) -> None:
    """Run the whole matrix and write reports/results.{csv,md}."""
    try:
        code = ex.run(config_path, out)
    except TDLabError as e:
        _fail(e)
    cfg = ex.load_config(config_path)
    click.echo((ex.resolve_out(cfg, out) / "reports" / "results.md").read_text())
    if code:
        click.echo("some runs FAILED; see reports/metrics/*/*.FAILED.json", err=True)
    sys.exit(code)


@main.command()
@config_opt
@out_opt
def validate(config_path: str, out: str | None) -> None:
    """Check a config without running anything."""
    try:
        for line in ex.validate(config_path, out):
            click.echo(line)
    except TDLabError as e:
        _fail(e)


@main.command()
@click.argument("run_dir", required=False, type=click.Path(file_okay=False))
@out_opt
def report(run_dir: str | None, out: str | None) -> None:
    """Aggregate a run directory into reports/results.{csv,md}."""
    import os

    root = run_dir or out or os.environ.get("TDLAB_OUT")
    if root is None:
        raise click.UsageError("give a run directory (argument, --out, or TDLAB_OUT)")
    s = ex.report(Path(root))
    click.echo((Path(root) / "reports" / "results.md").read_text())
    if s.missing:
        click.echo(f"{len(s.missing)} missing run(s)", err=True)


if __name__ == "__main__":  # pragma: no cover
    main()
