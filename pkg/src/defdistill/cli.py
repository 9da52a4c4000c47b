"""Command-line entry point: ``defdistill {train,distill,attack,evaluate,sweep}``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import experiments
from .config import ConfigError, ExperimentConfig, load_config

OVERRIDE_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False),
                 help="YAML config file; flags below override its keys."),
    click.option("--train-images"), click.option("--train-labels"),
    click.option("--test-images"), click.option("--test-labels"),
    click.option("--train-count", type=int), click.option("--test-count", type=int),
    click.option("--architecture", type=click.Choice(["mnist-small", "mlp-tiny"])),
    click.option("--epochs", type=int), click.option("--batch-size", type=int),
    click.option("--learning-rate", type=float), click.option("--momentum", type=float),
    click.option("--temperature", type=float, help="Training/distillation temperature."),
    click.option("--temperatures", help="Sweep temperatures, e.g. '1,10,20,100'."),
    click.option("--attack-samples", type=int), click.option("--gradient-samples", type=int),
    click.option("--max-features", type=int),
    click.option("--seed", type=int), click.option("--output-dir"),
    click.option("--workers", type=int, help="Parallel sweep rows (processes)."),
    click.option("--set", "extra", multiple=True, metavar="KEY=VALUE",
                 help="Override any other config key."),
]


def config_options(fn):
    for option in reversed(OVERRIDE_OPTIONS):
        fn = option(fn)
    return fn


def build_config(config_path, extra, **flags) -> ExperimentConfig:
    base = load_config(config_path) if config_path else ExperimentConfig()
    overrides = dict(flags)
    for item in extra:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(key, f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip().replace("-", "_")] = value.strip()
    return base.with_overrides(**overrides)


def run(command, *args, **kwargs):
    try:
        result = command(*args, **kwargs)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    except Exception as exc:
        logging.getLogger("defdistill").debug("internal error", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(result, indent=2, sort_keys=True, default=str))


def _config_or_usage(kwargs) -> ExperimentConfig:
    try:
        return build_config(**kwargs)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Defensive distillation experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("train")
@config_options
def train_cmd(**kwargs):
    """Train an undistilled model at --temperature (default 1)."""
    run(experiments.cmd_train, _config_or_usage(kwargs))


@main.command("distill")
@config_options
def distill_cmd(**kwargs):
    """Train a teacher and its distilled student at --temperature."""
    run(experiments.cmd_distill, _config_or_usage(kwargs))


@main.command("attack")
@click.argument("model", type=click.Path())
@config_options
def attack_cmd(model, **kwargs):
    """Run the JSMA campaign against MODEL at test temperature 1."""
    run(experiments.cmd_attack, _config_or_usage(kwargs), model)


@main.command("evaluate")
@click.argument("model", type=click.Path())
@config_options
def evaluate_cmd(model, **kwargs):
    """Accuracy, confidence and adversarial-gradient histogram of MODEL."""
    run(experiments.cmd_evaluate, _config_or_usage(kwargs), model)


@main.command("sweep")
@config_options
def sweep_cmd(**kwargs):
    """Baseline plus one distilled model per temperature, fully evaluated."""
    run(experiments.cmd_sweep, _config_or_usage(kwargs))


if __name__ == "__main__":
    main()
