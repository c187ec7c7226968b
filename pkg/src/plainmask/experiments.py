# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Ablation grid and report rendering."""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import yaml
from dataclasses_json import dataclass_json
from jinja2 import Template

from .config import ConfigurationError, validate_config
from .model import MODEL_VARIANTS, RunConfig, Variant
from .training import Trainer, train_loop

TEMPLATE_SUFFIX = ".jinja2"
DEFAULT_TEMPLATE_DIR = Path(__file__).parent.resolve() / "templates"

# The model-variant grid, from the encoder-only baseline to the full
# model, one component added at each step.
ABLATION_STEPS: List[Tuple[Variant, str]] = [
    ("eomt-finetuned", "Encoder-only, fine-tuned encoder"),
    ("eomt-frozen", "Encoder-only, frozen encoder"),
    ("pmd-plain", "w/ Transformer decoder"),
    ("pmt-nolateral", "w/ RoPE"),
    ("pmt-norope", "w/ lateral connections, no RoPE"),
    ("pmt", "w/ lateral connections and RoPE"),
]


@dataclass_json
@dataclass
class AblationRow:
    """Outcome of one cell of the ablation grid, over several seeds."""

    variant: Variant
    label: str
    decoder_layers: Optional[int]
    """Decoder depth, or None for the encoder-only variants."""

    seeds: List[int] = field(default_factory=list)
    pq: List[Optional[float]] = field(default_factory=list)
    """PQ of each seed, in the order of ``seeds``."""

    median_pq: Optional[float] = None


@dataclass_json
@dataclass
class AblationReport:
    steps: int
    eval_samples: int
    rows: List[AblationRow] = field(default_factory=list)

    def row(self, variant: Variant, decoder_layers: Optional[int] = None) -> AblationRow:
        for r in self.rows:
            if r.variant == variant and (
                decoder_layers is None or r.decoder_layers == decoder_layers
            ):
                return r
        raise KeyError(f"No ablation row for {variant} ({decoder_layers} decoder layers)")


def median(values: Sequence[Optional[float]]) -> Optional[float]:
    """Median of the defined values, or None if there is none."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.median(defined))


def _label(variant: Variant) -> str:
    for v, label in ABLATION_STEPS:
        if v == variant:
            return label
    return variant


def run_cell(
    cfg: RunConfig,
    variant: Variant,
    seed: int,
    decoder_layers: Optional[int] = None,
    encoder_path: Optional[str] = None,
    eval_samples: Optional[int] = None,
    threads: int = 1,
) -> Dict[str, Optional[float]]:
    """Trains one variant from scratch and evaluates it on the validation split."""
    run = copy.deepcopy(cfg)
    run.seed = seed
    if decoder_layers is not None:
        run.model.decoder_layers = decoder_layers
    validate_config(run)
    trainer = Trainer(run, variant, encoder_path=encoder_path)
    train_loop(trainer, threads=threads)
    return trainer.evaluate(eval_samples, threads)


def run_ablation(
    cfg: RunConfig,
    variants: Optional[Sequence[Variant]] = None,
    seeds: Sequence[int] = (0,),
    depths: Optional[Sequence[int]] = None,
    encoder_path: Optional[str] = None,
    eval_samples: Optional[int] = None,
    threads: int = 1,
) -> AblationReport:
    """Runs the model-variant grid, then the decoder-depth grid.

    :param cfg: The base configuration; every run uses its schedule.
    :param variants: The variants to compare, in report order. Defaults
        to every step of ``ABLATION_STEPS``.
    :param seeds: Each cell is trained once per seed.
    :param depths: If set, ``pmt`` is also trained with each of these
        decoder depths.
    :param encoder_path: Pretrained encoder shared by every run.
    :param eval_samples: Validation samples used to score each run.

    :raises ConfigurationError: On an unknown variant.
    """
    if variants is None:
        variants = [v for v, _ in ABLATION_STEPS]
    for v in variants:
        if v not in MODEL_VARIANTS:
            raise ConfigurationError(f"Unknown model variant {v!r}")
    n_eval = cfg.data.val_size if eval_samples is None else eval_samples
    report = AblationReport(cfg.schedule.total_steps, n_eval)

    cells: List[Tuple[Variant, Optional[int]]] = []
    for v in variants:
        cells.append((v, None if v.startswith("eomt") else cfg.model.decoder_layers))
    for d in depths or []:
        if ("pmt", d) not in cells:
            cells.append(("pmt", d))

    for variant, depth in cells:
        row = AblationRow(variant, _label(variant), depth)
        for seed in seeds:
            logging.info(f"Ablation: {variant}, {depth} decoder layers, seed {seed}")
            metrics = run_cell(cfg, variant, seed, depth, encoder_path, n_eval, threads)
            row.seeds.append(seed)
            row.pq.append(metrics.get("PQ"))
        row.median_pq = median(row.pq)
        logging.info(f"Ablation: {variant} median PQ {row.median_pq}")
        report.rows.append(row)
    return report


# Reports


def render(name: str, templatedir: Optional[Path] = None, **context) -> str:
    """Renders one of the bundled report templates.

    :param name: The template name, without the ``.jinja2`` suffix.
    :param templatedir: Where to look up the template; defaults to the
        templates bundled with the package.
    """
    directory = DEFAULT_TEMPLATE_DIR if templatedir is None else templatedir
    with open(directory / (name + TEMPLATE_SUFFIX)) as file_:
        template = Template(file_.read(), trim_blocks=True, lstrip_blocks=True)
        return template.render(**context)


def render_ablation(report: AblationReport) -> str:
    return render("ablation.md", report=report)


def render_eval_report(
    metrics: Dict[str, Optional[float]], split: str, variant: Variant, step: int
) -> str:
    return render("eval.txt", metrics=metrics, split=split, variant=variant, step=step)


def save_eval_report(
    metrics: Dict[str, Optional[float]],
    split: str,
    variant: Variant,
    step: int,
    output: TextIO,
) -> None:
    """Writes an evaluation report as a YAML mapping keyed by split."""
    entry = {
        "model": variant,
        "step": step,
        "metrics": {k: (None if v is None else float(v)) for k, v in metrics.items()},
    }
    output.write(yaml.dump({split: entry}, default_flow_style=False, sort_keys=False))
