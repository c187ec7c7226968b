# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Self-checks: the 64-bit gradient suite and the latency bench."""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .decoder import SequenceLayout, expand_bias, masked_attention_bias
from .encoder import RopeTable, TransformerLayer
from .lateral import LateralFusion
from .layers import BNState, LayerNorm, Parameter
from .losses import segmentation_loss
from .matching import hungarian_match, match_cost
from .model import LossWeights, ModelConfig, Variant
from .numerics import (
    GradCheckReport,
    Tensor,
    batch_norm,
    bce_with_logits,
    bilinear_upsample2x,
    concat,
    cross_entropy,
    div,
    exp,
    gelu,
    grad_check,
    layer_norm,
    log,
    log_softmax,
    matmul,
    precision,
    reshape,
    rotate_pairs,
    sigmoid,
    softmax,
    transpose,
)
from .segmenter import PlainMaskTransformer


class GradientCheckError(Exception):
    """Error thrown when the gradient suite finds a wrong derivative."""

    op: str

    def __init__(self, op: str, msg: str):
        super().__init__(msg)
        self.op = op


# A case builds, from a generator, the scalar function to check and the
# tensors to check it against.
Case = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Dict[str, Tensor]]]


def _param(
    rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0
) -> Parameter:
    return Parameter(rng.uniform(low, high, size=shape))


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda t: (t * weights).sum()


def _unary(op: Callable[[Tensor], Tensor], low: float = -2.0, high: float = 2.0) -> Case:
    def case(rng: np.random.Generator):
        x = _param(rng, 3, 4, low=low, high=high)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), {"x": x}

    return case


def _binary(op: Callable[[Tensor, Tensor], Tensor], b_shape: Tuple[int, ...] = (3, 4)) -> Case:
    def case(rng: np.random.Generator):
        a = _param(rng, 3, 4)
        b = _param(rng, *b_shape, low=0.5, high=2.0)
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), {"a": a, "b": b}

    return case


def _matmul_case(rng: np.random.Generator):
    a = _param(rng, 2, 3, 4)
    b = _param(rng, 4, 5)
    proj = _project(matmul(a, b), rng)
    return (lambda: proj(matmul(a, b))), {"a": a, "b": b}


def _shape_case(rng: np.random.Generator):
    a = _param(rng, 2, 3, 4)
    b = _param(rng, 2, 3, 4)

    def f() -> Tensor:
        x = concat([transpose(a, (1, 0, 2)), transpose(b, (1, 0, 2))], axis=1)
        y = reshape(x, (3, 16))[:, 2:11]
        return y

    proj = _project(f(), rng)
    return (lambda: proj(f()) + a.mean() + b.sum(axis=1).mean()), {"a": a, "b": b}


def _softmax_case(rng: np.random.Generator):
    x = _param(rng, 4, 6, low=-3.0, high=3.0)
    proj = _project(softmax(x), rng)
    return (lambda: proj(softmax(x, axis=-1)) + proj(log_softmax(x, axis=-1))), {"x": x}


def _layer_norm_case(rng: np.random.Generator):
    x = _param(rng, 5, 6)
    gamma = _param(rng, 6, low=0.5, high=1.5)
    beta = _param(rng, 6)
    proj = _project(x, rng)
    return (lambda: proj(layer_norm(x, gamma, beta))), {"x": x, "gamma": gamma, "beta": beta}


def _batch_norm_case(rng: np.random.Generator):
    x = _param(rng, 7, 4)
    train, frozen = BNState(4), BNState(4)
    train.gamma.data = rng.uniform(0.5, 1.5, size=4)
    train.beta.data = rng.uniform(-1, 1, size=4)
    # Running statistics of the training state change on every call, so
    # evaluation mode is checked on a separate state.
    frozen.running_mean.data = rng.uniform(-1, 1, size=4)
    frozen.running_var.data = rng.uniform(0.5, 2.0, size=4)
    proj = _project(x, rng)
    return (
        lambda: proj(batch_norm(x, train, True)) + proj(batch_norm(x, frozen, False))
    ), {"x": x, "gamma": train.gamma, "beta": train.beta, "frozen.gamma": frozen.gamma}


def _upsample_case(rng: np.random.Generator):
    x = _param(rng, 2, 3, 4)
    proj = _project(bilinear_upsample2x(x), rng)
    return (lambda: proj(bilinear_upsample2x(x))), {"x": x}


def _rope_case(rng: np.random.Generator):
    x = _param(rng, 2, 5, 8)
    table = RopeTable.for_sequence((2, 2), 8, 100.0, leading=1)
    proj = _project(x, rng)
    return (lambda: proj(rotate_pairs(x, table.cos, table.sin))), {"x": x}


def _loss_terms_case(rng: np.random.Generator):
    x = _param(rng, 4, 6, low=-3.0, high=3.0)
    target = (rng.random((4, 6)) > 0.5).astype(np.float64)
    labels = rng.integers(0, 6, size=4)
    weights = rng.uniform(0.1, 1.0, size=6)
    return (
        lambda: bce_with_logits(x, target).mean() + cross_entropy(x, labels, weights)
    ), {"x": x}


def _attention_case(rng: np.random.Generator):
    layer = TransformerLayer(8, 2, 2, rng, std=0.3)
    x = _param(rng, 8, 8)
    table = RopeTable.for_sequence((2, 3), 4, 100.0, leading=2)
    proj = _project(x, rng)
    params = {"x": x}
    params.update({f"layer.{n}": p for n, p in layer.named_parameters()})
    return (lambda: proj(layer(x, table))), params


def _masked_layer_case(rng: np.random.Generator):
    layout = SequenceLayout(num_queries=2, num_prefix=1, num_patches=4)
    layer = TransformerLayer(8, 2, 1, rng, std=0.3)
    x = _param(rng, layout.length, 8)
    logits = np.array([[1.0, -1.0, 1.0, -1.0], [-1.0, -1.0, -1.0, -1.0]])
    bias = expand_bias(masked_attention_bias(logits, layout), layout)
    table = RopeTable.for_sequence((2, 2), 4, 100.0, leading=3)
    proj = _project(x, rng)
    params = {"x": x}
    params.update({f"layer.{n}": p for n, p in layer.named_parameters()})
    return (lambda: proj(layer(x, table, bias))), params


def _lateral_case(rng: np.random.Generator):
    cfg = _tiny_config()
    fusion = LateralFusion(cfg, rng)
    for branch in fusion.branches:
        branch.mlp.layers[-1].weight.data = rng.normal(0.0, 0.3, size=(16, 16))
    norm = LayerNorm(16)
    taps = {1: _param(rng, 4, 16), 2: _param(rng, 4, 16)}
    proj = _project(taps[1], rng)
    params: Dict[str, Tensor] = {"tap1": taps[1], "tap2": taps[2]}
    params.update({f"fusion.{n}": p for n, p in fusion.named_parameters()})
    return (lambda: proj(fusion.fuse_features(taps, norm, True))), params


def _tiny_config() -> ModelConfig:
    return ModelConfig(
        image_size=[16, 16],
        patch_size=8,
        embed_dim=16,
        num_layers=2,
        num_heads=2,
        num_register_tokens=1,
        tap_layers=[1, 2],
        num_queries=4,
        decoder_layers=1,
        eomt_split=[1, 1],
        num_classes=3,
        thing_classes=[0, 1],
        init_std=0.2,
    )


def _composition_case(rng: np.random.Generator):
    cfg = _tiny_config()
    model = PlainMaskTransformer(cfg, "pmt", seed=int(rng.integers(1 << 30)), total_steps=10)
    image = Tensor(rng.uniform(0.0, 1.0, size=(3, 16, 16)))
    classes = np.array([0, 2])
    masks = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
    weights = LossWeights()
    first = model(image, True, 0, mask_draws=[False])
    match = hungarian_match(match_cost(first.final, classes, masks, weights))

    def f() -> Tensor:
        out = model(image, True, 0, mask_draws=[False])
        return segmentation_loss(out.predictions, classes, masks, match, weights, 3).total

    return f, model.trainable_parameters()


GRADIENT_CASES: Dict[str, Case] = {
    "add": _binary(lambda a, b: a + b, (4,)),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b, (4,)),
    "div": _binary(div),
    "exp": _unary(exp),
    "log": _unary(log, 0.5, 2.0),
    "sigmoid": _unary(sigmoid),
    "gelu": _unary(gelu, -3.0, 3.0),
    "matmul": _matmul_case,
    "shape": _shape_case,
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "batch_norm": _batch_norm_case,
    "bilinear_upsample2x": _upsample_case,
    "rope": _rope_case,
    "losses": _loss_terms_case,
    "transformer_layer": _attention_case,
    "masked_layer": _masked_layer_case,
    "lateral_fusion": _lateral_case,
    "forward_loss": _composition_case,
}


def run_gradient_suite(
    instances: int = 10,
    seed: int = 0,
    names: Optional[List[str]] = None,
    max_entries: int = 24,
) -> List[GradCheckReport]:
    """Checks every differentiable op against central differences.

    Each case is checked on ``instances`` random instances, in 64-bit
    precision; the report of a case carries its worst relative error.
    """
    reports = []
    selected = list(GRADIENT_CASES) if names is None else names
    for i, name in enumerate(selected):
        case = GRADIENT_CASES[name]
        worst = GradCheckReport(name, 0.0, 0)
        for k in range(instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, k]))
            with precision(np.float64):
                f, params = case(rng)
                report = grad_check(f, params, name, max_entries=max_entries, seed=k)
            worst.checked += report.checked
            if report.failed_op is not None:
                worst.failed_op = report.failed_op
                worst.max_rel_error = report.max_rel_error
                break
            if report.max_rel_error > worst.max_rel_error:
                worst.max_rel_error = report.max_rel_error
                worst.worst_parameter = report.worst_parameter
        logging.info(
            f"gradcheck {name}: max relative error {worst.max_rel_error:.2e} "
            f"over {worst.checked} entries"
        )
        reports.append(worst)
    return reports


def assert_gradients(reports: List[GradCheckReport], tolerance: float = 1e-4) -> None:
    """:raises GradientCheckError: On the first failed report."""
    for r in reports:
        if not r.passed(tolerance):
            where = r.failed_op or r.worst_parameter or "?"
            raise GradientCheckError(
                where,
                f"Gradient check {r.name} failed: relative error {r.max_rel_error:.3g} at {where}",
            )


@dataclass
class BenchResult:
    variant: str
    runs: int
    mean_ms: float
    std_ms: float


def bench(
    cfg: ModelConfig,
    variant: Variant = "pmt",
    runs: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> BenchResult:
    """Measures the wall-clock latency of one evaluation forward pass."""
    if runs < 1:
        raise ValueError("bench needs at least one run")
    model = PlainMaskTransformer(cfg, variant, seed)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.uniform(0.0, 1.0, size=(3,) + tuple(cfg.image_size)))
    for _ in range(warmup):
        model(image)
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        model(image)
        times.append((time.perf_counter() - start) * 1000.0)
    return BenchResult(variant, runs, float(np.mean(times)), float(np.std(times)))
