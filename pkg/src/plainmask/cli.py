# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import logging
import os
from contextlib import contextmanager
from typing import Iterator

import click

from .config import ConfigurationError, config_schema, load_config, save_config
from .container import CheckpointError, ContainerError, load_checkpoint, save_encoder
from .data import Split, SyntheticDataset, write_dataset
from .decoder import ScheduleError
from .diagnostics import GradientCheckError, assert_gradients, bench, run_gradient_suite
from .experiments import (
    render_ablation,
    render_eval_report,
    run_ablation,
    save_eval_report,
)
from .matching import InfeasibleMatchError
from .model import MODEL_VARIANTS
from .numerics import DimensionError
from .segmenter import PlainMaskTransformer
from .training import (
    NonFiniteLossError,
    Trainer,
    eval_threads,
    evaluate,
    pretrain_encoder,
    train_loop,
)

DOMAIN_ERRORS = (
    ConfigurationError,
    ContainerError,
    CheckpointError,
    DimensionError,
    ScheduleError,
    InfeasibleMatchError,
    NonFiniteLossError,
    GradientCheckError,
)


@contextmanager
def domain_errors() -> Iterator[None]:
    """Turns any PlainMask error into a one-line click error."""
    try:
        yield
    except DOMAIN_ERRORS as e:
        raise click.ClickException(str(e))


def config_option(required: bool = True):
    return click.option(
        "-C",
        "--config",
        type=click.Path(exists=True),
        required=required,
        help="The PlainMask configuration file.",
    )


model_option = click.option(
    "-m",
    "--model",
    type=click.Choice(MODEL_VARIANTS),
    default="pmt",
    show_default=True,
    help="The model variant.",
)

mode_option = click.option(
    "--mode",
    type=click.Choice(["image", "video"]),
    default="image",
    show_default=True,
    help="Train or evaluate on images or on clips.",
)


@click.group()
@click.option("-v", "--verbose", count=True, help="Enables debug messages.")
def main(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose > 0 else logging.INFO)


@main.command(name="gen-data")
@config_option()
@mode_option
@click.option(
    "-o",
    "--out",
    required=True,
    type=click.Path(file_okay=False, dir_okay=True),
    help="The directory where to write the dataset.",
)
def gen_data(config, mode, out):
    """Generates the synthetic dataset described by the configuration."""
    with domain_errors():
        cfg = load_config(config)
        splits = write_dataset(cfg.data, out, mode == "video", eval_threads())
    for name, files in splits.items():
        print(f"{name}: {len(files)} samples")


@main.command(name="pretrain-encoder")
@config_option()
@click.option("--steps", type=int, help="Overrides the number of pretext steps.")
@click.option("--seed", type=int, help="Overrides the seed of the configuration.")
@click.option(
    "-o",
    "--out",
    required=True,
    type=click.Path(dir_okay=False),
    help="Where to save the encoder checkpoint.",
)
def pretrain_encoder_command(config, steps, seed, out):
    """Pretrains the encoder on a dominant-class pretext task."""
    with domain_errors():
        cfg = load_config(config, seed=seed)
        result = pretrain_encoder(cfg, steps)
        save_encoder(out, result.encoder)
    print(f"Probe accuracy: {result.accuracy:.3f}")


@main.command()
@config_option()
@model_option
@mode_option
@click.option("--steps", type=int, help="Overrides the number of training steps.")
@click.option("--seed", type=int, help="Overrides the seed of the configuration.")
@click.option(
    "-o",
    "--out",
    required=True,
    type=click.Path(dir_okay=False),
    help="Where to save the final checkpoint.",
)
@click.option(
    "-e",
    "--encoder",
    type=click.Path(dir_okay=False),
    help="A pretrained encoder checkpoint to start from.",
)
@click.option(
    "-r",
    "--resume",
    type=click.Path(dir_okay=False),
    help="A checkpoint to resume training from.",
)
@click.option(
    "-l",
    "--log",
    type=click.File("w"),
    help="Write JSON training records to the specified file.",
)
def train(config, model, mode, steps, seed, out, encoder, resume, log):
    """Trains a segmentation model."""
    with domain_errors():
        cfg = load_config(config, seed=seed, steps=steps)
        trainer = Trainer(cfg, model, mode == "video", encoder)
        if resume is not None:
            if not os.path.exists(resume):
                raise CheckpointError(f"Checkpoint {resume} does not exist")
            trainer.resume(resume)
        train_loop(trainer, log, threads=eval_threads())
        trainer.save(out)
    print(f"Trained {model} for {trainer.step} steps, saved to {out}")


@main.command(name="eval")
@config_option()
@model_option
@mode_option
@click.option(
    "-s",
    "--split",
    type=click.Choice([s.value for s in Split]),
    default=Split.VAL.value,
    show_default=True,
    help="The split to evaluate on.",
)
@click.option(
    "-k",
    "--checkpoint",
    required=True,
    type=click.Path(dir_okay=False),
    help="The checkpoint to evaluate.",
)
@click.option("-n", "--limit", type=int, help="Evaluate on the first N samples only.")
@click.option(
    "-o",
    "--output",
    type=click.File("w"),
    help="Also write the report, in YAML, to the specified file.",
)
def evaluate_command(config, model, mode, split, checkpoint, limit, output):
    """Evaluates a checkpoint on one split of the dataset."""
    with domain_errors():
        cfg = load_config(config)
        if not os.path.exists(checkpoint):
            raise CheckpointError(f"Checkpoint {checkpoint} does not exist")
        net = PlainMaskTransformer(cfg.model, model, cfg.seed, cfg.schedule.total_steps)
        step, _ = load_checkpoint(checkpoint, net)
        dataset = SyntheticDataset(cfg.data, Split(split), mode == "video")
        metrics = evaluate(net, dataset, cfg, limit, eval_threads())
    click.echo(render_eval_report(metrics, split, model, step), nl=False)
    if output is not None:
        save_eval_report(metrics, split, model, step, output)


@main.command()
@click.option(
    "-n",
    "--instances",
    type=int,
    default=10,
    show_default=True,
    help="Random instances checked per op.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--only",
    multiple=True,
    metavar="CASE",
    help="Restricts the suite to the named case (repeatable).",
)
def gradcheck(instances, seed, only):
    """Checks every gradient against finite differences, in 64-bit precision."""
    with domain_errors():
        reports = run_gradient_suite(instances, seed, list(only) if only else None)
        for r in reports:
            status = "ok" if r.passed() else "FAILED"
            print(f"{r.name:<22} {r.max_rel_error:.2e} ({r.checked} entries) {status}")
        assert_gradients(reports)


@main.command(name="bench")
@config_option()
@model_option
@click.option("--runs", type=int, default=100, show_default=True)
@click.option("--warmup", type=int, default=10, show_default=True)
def bench_command(config, model, runs, warmup):
    """Measures the forward latency of a freshly initialised model."""
    with domain_errors():
        cfg = load_config(config)
        result = bench(cfg.model, model, runs, warmup, cfg.seed)
    print(
        f"{result.variant}: {result.mean_ms:.2f} ± {result.std_ms:.2f} ms "
        f"over {result.runs} runs"
    )


@main.command()
@config_option()
@click.option(
    "-m",
    "--model",
    "variants",
    type=click.Choice(MODEL_VARIANTS),
    multiple=True,
    help="A variant to include (repeatable). Default is the full grid.",
)
@click.option("--seed", "seeds", type=int, multiple=True, help="A seed (repeatable).")
@click.option(
    "-d",
    "--depth",
    "depths",
    type=int,
    multiple=True,
    help="Also train pmt with this many decoder layers (repeatable).",
)
@click.option("--steps", type=int, help="Overrides the number of training steps.")
@click.option(
    "-e",
    "--encoder",
    type=click.Path(exists=True, dir_okay=False),
    help="A pretrained encoder checkpoint shared by every run.",
)
@click.option("-n", "--limit", type=int, help="Validation samples used per run.")
@click.option(
    "-o",
    "--output",
    type=click.File("w"),
    default="-",
    help="Write to the specified file. Default is to write to standard output.",
)
def ablate(config, variants, seeds, depths, steps, encoder, limit, output):
    """Trains and compares model variants with the same number of training steps."""
    with domain_errors():
        cfg = load_config(config, steps=steps)
        report = run_ablation(
            cfg,
            list(variants) if variants else None,
            list(seeds) if seeds else [cfg.seed],
            list(depths) if depths else None,
            encoder,
            limit,
            eval_threads(),
        )
    output.write(render_ablation(report))


@main.command(name="export-config")
@config_option(required=False)
@click.option(
    "--schema",
    default=False,
    is_flag=True,
    help="Writes the JSON schema of the configuration instead.",
)
@click.option(
    "-o",
    "--output",
    type=click.File("w"),
    default="-",
    help="Write to the specified file. Default is to write to standard output.",
)
def export_config(config, schema, output):
    """Exports the full configuration, including default values."""
    if schema:
        output.write(config_schema() + "\n")
        return
    with domain_errors():
        cfg = load_config(config)
    save_config(cfg, output)


if __name__ == "__main__":
    main()
