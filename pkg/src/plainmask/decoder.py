# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""The Plain Mask Decoder and the query-injection baseline.

The decoder runs standard Transformer layers over the joint sequence
``[queries | class | registers | patches]``. During training each layer
may restrict query-to-patch attention to the query's current mask
prediction; the probability of doing so is annealed to zero so that
inference never uses masks.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import ConfigurationError
from .encoder import RopeTable, TransformerLayer, VisionTransformer
from .layers import MLP, LayerNorm, Linear, Module, Parameter
from .model import ModelConfig
from .numerics import (
    DimensionError,
    Tensor,
    bilinear_upsample2x,
    concat,
    gelu,
    matmul,
    reshape,
    transpose,
)


class ScheduleError(Exception):
    """Error thrown when a training step lies outside of the schedule."""

    pass


@dataclass
class SequenceLayout:
    """Positions of the token groups within a decoder sequence."""

    num_queries: int
    num_prefix: int
    num_patches: int

    @property
    def length(self) -> int:
        return self.num_queries + self.num_prefix + self.num_patches

    @property
    def patch_start(self) -> int:
        return self.num_queries + self.num_prefix


@dataclass
class AnnealSchedule:
    """Per-layer probability of masked attention over training.

    The window ``[start_frac * T, end_frac * T]`` is cut into one equal
    sub-window per layer. Layer ``l`` masks with probability 1 before its
    sub-window, decays linearly to 0 inside it, and never masks after it.
    """

    num_layers: int
    total_steps: int
    start_frac: float = 0.2
    end_frac: float = 0.9

    def check_step(self, step: int) -> None:
        if step < 0 or step > self.total_steps:
            raise ScheduleError(
                f"Step {step} is outside of the training schedule [0, {self.total_steps}]"
            )

    def probability(self, layer: int, step: int) -> float:
        """Gets the masking probability of a layer at a training step.

        :raises ScheduleError: If ``step`` is not within [0, T].
        """
        self.check_step(step)
        t_total = float(self.total_steps)
        start = self.start_frac * t_total
        width = (self.end_frac - self.start_frac) * t_total / self.num_layers
        a = start + layer * width
        b = a + width
        if b <= a:
            return 1.0 if step < a else 0.0
        return float(min(1.0, max(0.0, (b - step) / (b - a))))

    def draw(self, step: int, rng: np.random.Generator) -> List[bool]:
        """Draws, for every layer, whether masked attention applies.

        One uniform number is consumed per layer regardless of the
        probability, so the RNG stream does not depend on the schedule.
        """
        draws = []
        for layer in range(self.num_layers):
            p = self.probability(layer, step)
            draws.append(bool(rng.random() < p))
        return draws


def anneal_probability(schedule: AnnealSchedule, layer: int, step: int) -> float:
    return schedule.probability(layer, step)


def masked_attention_bias(grid_logits: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    """Builds the additive attention bias of the query rows.

    :param grid_logits: Mask logits of the K queries at token-grid
        resolution, [K, h, w] or [K, N].
    :param layout: The layout of the attended sequence.

    :returns: Bias [K, T]: ``-inf`` on the patch columns whose mask
        probability is at most 0.5, zero elsewhere. A query whose mask
        is empty keeps a zero row.
    """
    k = layout.num_queries
    logits = np.asarray(grid_logits).reshape(k, -1)
    if logits.shape[1] != layout.num_patches:
        raise DimensionError(
            f"Mask logits cover {logits.shape[1]} tokens, "
            f"the sequence has {layout.num_patches} patches"
        )
    blocked = logits <= 0.0
    blocked[np.all(blocked, axis=1)] = False
    bias = np.zeros((k, layout.length))
    bias[:, layout.patch_start :][blocked] = -np.inf
    return bias


def expand_bias(query_bias: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    """Pads a query-row bias [K, T] to a full attention bias [T, T]."""
    full = np.zeros((layout.length, layout.length))
    full[: layout.num_queries] = query_bias
    return full


@dataclass
class Prediction:
    """Class and mask predictions of every query."""

    class_logits: Tensor
    """Logits [K, C + 1]; column C is the no-object class."""

    mask_logits: Tensor
    """Mask logits [K, H/4, W/4]."""

    grid_logits: Optional[np.ndarray] = None
    """Mask logits [K, N] at token-grid resolution (no gradient)."""


class MaskModule(Module):
    """Class head, mask MLP and patch-token upscaler.

    Patch tokens are upscaled from the token grid to a quarter of the
    image resolution by stages of pointwise projection, GELU and bilinear
    2x upsampling. Mask logits are the dot products between the embedded
    queries and the upscaled tokens.
    """

    upscale: List[Linear]

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.class_head = Linear(d, cfg.num_classes + 1, rng, cfg.init_std)
        self.mask_mlp = MLP([d, d, d, d], rng, cfg.init_std)
        num_stages = int(round(math.log2(cfg.patch_size // 4)))
        self.upscale = [Linear(d, d, rng, cfg.init_std) for _ in range(num_stages)]
        self.grid = cfg.grid_size

    def upscale_tokens(self, patches: Tensor) -> Tensor:
        """Maps patch tokens [N, D] to upscaled features [D, H/4 * W/4]."""
        h, w = self.grid
        d = patches.shape[1]
        x = patches
        for stage in self.upscale:
            y = transpose(gelu(stage(x)))
            y = bilinear_upsample2x(reshape(y, (d, h, w)))
            h, w = 2 * h, 2 * w
            x = transpose(reshape(y, (d, h * w)))
        return transpose(x)

    def __call__(self, queries: Tensor, patches: Tensor, with_grid: bool = False) -> Prediction:
        """Predicts classes and masks.

        :param queries: Decoded queries [K, D].
        :param patches: Decoded patch tokens [N, D].
        :param with_grid: Also compute token-grid mask logits.
        """
        k = queries.shape[0]
        class_logits = self.class_head(queries)
        embed = self.mask_mlp(queries)
        up = self.upscale_tokens(patches)
        h4 = self.grid[0] * 2 ** len(self.upscale)
        w4 = self.grid[1] * 2 ** len(self.upscale)
        mask_logits = reshape(matmul(embed, up), (k, h4, w4))
        grid = embed.data @ patches.data.T if with_grid else None
        return Prediction(class_logits, mask_logits, grid)


@dataclass
class DecoderOutput:
    queries: Tensor
    """Output queries [K, D], before the final normalisation."""

    patches: Tensor
    """Output patch tokens [N, D], before the final normalisation."""

    predictions: List[Prediction] = field(default_factory=list)
    """Deep-supervision predictions (one per layer, training only), then
    the final prediction."""

    draws: List[bool] = field(default_factory=list)
    """Which layers used masked attention."""

    @property
    def final(self) -> Prediction:
        return self.predictions[-1]


Predictor = Callable[[Tensor, bool], Prediction]


def _run_masked_stack(
    layers: Sequence[TransformerLayer],
    tokens: Tensor,
    layout: SequenceLayout,
    rope: Optional[RopeTable],
    draws: Optional[Sequence[bool]],
    predict: Predictor,
) -> tuple:
    """Runs a stack of layers with optional per-layer masked attention.

    :param draws: Per-layer masking decisions; None selects evaluation,
        where no intermediate prediction is made and no bias is built.

    :returns: The output sequence and the intermediate predictions.
    """
    intermediate: List[Prediction] = []
    for i, layer in enumerate(layers):
        bias = None
        if draws is not None:
            pred = predict(tokens, True)
            intermediate.append(pred)
            if draws[i]:
                assert pred.grid_logits is not None
                bias = expand_bias(masked_attention_bias(pred.grid_logits, layout), layout)
        tokens = layer(tokens, rope, bias)
    return tokens, intermediate


def _resolve_draws(
    schedule: AnnealSchedule,
    training: bool,
    step: int,
    rng: Optional[np.random.Generator],
    mask_draws: Optional[Sequence[bool]],
) -> Optional[List[bool]]:
    if not training:
        return None
    schedule.check_step(step)
    if mask_draws is not None:
        if len(mask_draws) != schedule.num_layers:
            raise ConfigurationError(
                f"Got {len(mask_draws)} mask draws for {schedule.num_layers} layers"
            )
        return [bool(d) for d in mask_draws]
    if rng is None:
        raise ValueError("Training mode needs a random generator for the mask draws")
    return schedule.draw(step, rng)


class PlainMaskDecoder(Module):
    """Transformer layers over queries and patch tokens, plus the heads."""

    layers: List[TransformerLayer]

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator,
        total_steps: int,
        use_rope: bool = True,
    ):
        d = cfg.embed_dim
        self.queries = Parameter(rng.normal(0.0, cfg.init_std, size=(cfg.num_queries, d)))
        self.layers = [
            TransformerLayer(
                d,
                cfg.num_heads,
                cfg.decoder_ffn_expansion,
                rng,
                cfg.init_std,
                cfg.layer_norm_eps,
            )
            for _ in range(cfg.decoder_layers)
        ]
        self.norm = LayerNorm(d, cfg.layer_norm_eps)
        self.mask_module = MaskModule(cfg, rng)
        self.layout = SequenceLayout(cfg.num_queries, cfg.num_prefix_tokens, cfg.num_patches)
        self.schedule = AnnealSchedule(
            cfg.decoder_layers, total_steps, cfg.anneal_start_frac, cfg.anneal_end_frac
        )
        self.rope: Optional[RopeTable] = None
        if use_rope:
            self.rope = RopeTable.for_sequence(
                cfg.grid_size,
                cfg.head_dim,
                cfg.rope_base,
                leading=cfg.num_queries + cfg.num_prefix_tokens,
            )

    def predict(self, tokens: Tensor, with_grid: bool = False) -> Prediction:
        """Runs the heads on a joint sequence, through the final norm."""
        k, start = self.layout.num_queries, self.layout.patch_start
        return self.mask_module(
            self.norm(tokens[:k]), self.norm(tokens[start:]), with_grid
        )

    def __call__(
        self,
        fused: Tensor,
        prefix: Tensor,
        queries_in: Optional[Tensor] = None,
        training: bool = False,
        step: int = 0,
        rng: Optional[np.random.Generator] = None,
        mask_draws: Optional[Sequence[bool]] = None,
    ) -> DecoderOutput:
        """Decodes one image.

        :param fused: Multi-depth patch tokens [N, D].
        :param prefix: Class and register tokens [1 + R, D].
        :param queries_in: Input queries [K, D]; the learned queries if
            unset.
        :param training: Enables masked attention and deep supervision.
        :param step: Current training step, for the annealing schedule.
        :param rng: Source of the per-layer masking draws.
        :param mask_draws: Explicit per-layer masking decisions,
            superseding the schedule.

        :raises ScheduleError: If ``step`` is outside the schedule in
            training mode.
        """
        lay = self.layout
        expected = (lay.num_patches, self.queries.shape[1])
        if fused.shape != expected:
            raise DimensionError(
                f"Decoder expects patch tokens of shape {expected}, got {fused.shape}"
            )
        if queries_in is None:
            queries_in = self.queries
        draws = _resolve_draws(self.schedule, training, step, rng, mask_draws)
        tokens = concat([queries_in, prefix, fused], axis=0)
        tokens, preds = _run_masked_stack(
            self.layers, tokens, lay, self.rope, draws, self.predict
        )
        preds.append(self.predict(tokens))
        return DecoderOutput(
            queries=tokens[: lay.num_queries],
            patches=tokens[lay.patch_start :],
            predictions=preds,
            draws=draws or [],
        )


class EoMTInjection(Module):
    """Encoder-only baseline: queries are injected into the last encoder layers.

    The first L1 encoder layers run on the image tokens; the learned
    queries are then prepended and the last L2 layers process the joint
    sequence. The encoder's final LayerNorm feeds the mask module.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        encoder: VisionTransformer,
        rng: np.random.Generator,
        total_steps: int,
    ):
        self.encoder = encoder
        self.split = int(cfg.eomt_split[0])
        num_late = int(cfg.eomt_split[1])
        self.queries = Parameter(
            rng.normal(0.0, cfg.init_std, size=(cfg.num_queries, cfg.embed_dim))
        )
        self.mask_module = MaskModule(cfg, rng)
        self.layout = SequenceLayout(cfg.num_queries, cfg.num_prefix_tokens, cfg.num_patches)
        self.schedule = AnnealSchedule(
            num_late, total_steps, cfg.anneal_start_frac, cfg.anneal_end_frac
        )
        self.rope = RopeTable.for_sequence(
            cfg.grid_size,
            cfg.head_dim,
            cfg.rope_base,
            leading=cfg.num_queries + cfg.num_prefix_tokens,
        )
        logging.debug(f"Query injection after encoder layer {self.split}")

    def predict(self, tokens: Tensor, with_grid: bool = False) -> Prediction:
        k, start = self.layout.num_queries, self.layout.patch_start
        norm = self.encoder.norm
        return self.mask_module(norm(tokens[:k]), norm(tokens[start:]), with_grid)

    def __call__(
        self,
        image: Tensor,
        training: bool = False,
        step: int = 0,
        rng: Optional[np.random.Generator] = None,
        mask_draws: Optional[Sequence[bool]] = None,
        queries_in: Optional[Tensor] = None,
    ) -> DecoderOutput:
        lay = self.layout
        draws = _resolve_draws(self.schedule, training, step, rng, mask_draws)
        tokens = self.encoder.run_layers(self.encoder.embed(image), 0, self.split)
        if queries_in is None:
            queries_in = self.queries
        tokens = concat([queries_in, tokens], axis=0)
        late = self.encoder.layers[self.split :]
        tokens, preds = _run_masked_stack(late, tokens, lay, self.rope, draws, self.predict)
        preds.append(self.predict(tokens))
        return DecoderOutput(
            queries=tokens[: lay.num_queries],
            patches=tokens[lay.patch_start :],
            predictions=preds,
            draws=draws or [],
        )
