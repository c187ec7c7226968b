# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from dataclasses_json import dataclass_json
from dataclasses_jsonschema import JsonSchemaMixin

# Primitive Types
ClassName = str  ## E.g. disk, square, background-a
Variant = str  ## One of MODEL_VARIANTS

MODEL_VARIANTS = (
    "pmt",
    "pmt-nolateral",
    "pmt-norope",
    "pmd-plain",
    "eomt-frozen",
    "eomt-finetuned",
)


@dataclass_json
@dataclass
class ModelConfig(JsonSchemaMixin):
    """All architectural hyperparameters of a Plain Mask Transformer.

    The defaults describe the desk-scale model: a 64x64 input cut into
    8x8 patches (an 8x8 token grid), an 8-layer encoder of width 128
    and a 6-layer decoder.
    """

    image_size: List[int] = field(default_factory=lambda: [64, 64])
    """Input height and width in pixels."""

    patch_size: int = 8
    """Side of the square patches, in pixels."""

    embed_dim: int = 128
    """Token width D, shared by the encoder and the decoder."""

    num_layers: int = 8
    """Number of encoder layers L."""

    num_heads: int = 4
    """Attention heads, in both the encoder and the decoder."""

    num_register_tokens: int = 2
    """Register tokens appended after the class token."""

    ffn_expansion: int = 4
    """Hidden-width multiplier of the encoder feed-forward networks."""

    rope_base: float = 100.0
    """Base frequency of the rotary position embeddings.

    Scaled down from the usual 10000 so that the low frequencies remain
    distinguishable on small token grids.
    """

    tap_layers: List[int] = field(default_factory=lambda: [2, 4, 6, 8])
    """Encoder layers (1-based) whose patch tokens feed the lateral branches.

    Must be sorted, unique, and end with ``num_layers``.
    """

    freeze_encoder: bool = True
    """If true, no encoder parameter is ever updated."""

    num_queries: int = 20
    """Number of object queries K."""

    decoder_layers: int = 6
    """Number of decoder layers L_d."""

    decoder_ffn_expansion: int = 1
    """Hidden-width multiplier of the decoder feed-forward networks."""

    eomt_split: List[int] = field(default_factory=lambda: [4, 4])
    """Layer split (L1, L2) used by the query-injection baseline.

    Queries are concatenated to the patch tokens after the first L1
    encoder layers; the last L2 layers process both jointly.
    """

    num_classes: int = 5
    """Number of real classes C; class index C is the no-object class."""

    thing_classes: List[int] = field(default_factory=lambda: [0, 1, 2])
    """Class indices that are countable things; all others are stuff."""

    anneal_start_frac: float = 0.2
    """Fraction of training at which mask annealing starts."""

    anneal_end_frac: float = 0.9
    """Fraction of training at which every layer is mask-free."""

    layer_norm_eps: float = 1e-6
    """Epsilon of every LayerNorm."""

    init_std: float = 0.02
    """Standard deviation of the Gaussian weight and query initialisation."""

    @property
    def grid_size(self) -> Tuple[int, int]:
        """The token grid (H/p, W/p)."""
        return (
            self.image_size[0] // self.patch_size,
            self.image_size[1] // self.patch_size,
        )

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_size
        return gh * gw

    @property
    def num_prefix_tokens(self) -> int:
        """Class token plus register tokens."""
        return 1 + self.num_register_tokens

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mask_size(self) -> Tuple[int, int]:
        """Resolution (H/4, W/4) of the predicted masks."""
        return (self.image_size[0] // 4, self.image_size[1] // 4)


@dataclass_json
@dataclass
class LossWeights(JsonSchemaMixin):
    """Weights of the segmentation loss terms (also used by matching)."""

    class_weight: float = 2.0
    """Weight of the classification cross-entropy."""

    bce_weight: float = 5.0
    """Weight of the binary cross-entropy on matched masks."""

    dice_weight: float = 5.0
    """Weight of the Dice loss on matched masks."""

    no_object_weight: float = 0.1
    """Cross-entropy weight of the no-object class."""

    dice_smooth: float = 1.0
    """Smoothing added to the Dice numerator and denominator."""


@dataclass_json
@dataclass
class SyntheticSpec(JsonSchemaMixin):
    """Description of the synthetic shapes dataset.

    Images contain one to four thing instances (disks, squares and
    triangles) drawn over a background split into two stuff regions.
    Clips animate the same scenes with constant-velocity objects.
    """

    image_size: List[int] = field(default_factory=lambda: [64, 64])
    """Height and width of the generated images."""

    thing_names: List[ClassName] = field(
        default_factory=lambda: ["disk", "square", "triangle"]
    )
    """Names of the thing classes, in class-index order."""

    stuff_names: List[ClassName] = field(
        default_factory=lambda: ["background-a", "background-b"]
    )
    """Names of the stuff classes, following the thing classes."""

    min_instances: int = 1
    """Minimum number of shapes drawn per image."""

    max_instances: int = 4
    """Maximum number of shapes drawn per image."""

    min_radius: int = 6
    """Smallest shape half-extent, in pixels."""

    max_radius: int = 14
    """Largest shape half-extent, in pixels."""

    min_area: int = 16
    """Visible pixels below which an instance is discarded."""

    color_jitter: float = 0.1
    """Per-instance uniform jitter applied to the class base colour."""

    noise_std: float = 0.02
    """Standard deviation of the additive Gaussian pixel noise."""

    frames_per_clip: int = 5
    """Number of frames of a generated clip."""

    max_speed: float = 3.0
    """Largest per-axis object velocity, in pixels per frame."""

    spawn_prob: float = 0.1
    """Probability that a new object enters at each frame."""

    despawn_prob: float = 0.05
    """Probability that each visible object leaves at each frame."""

    train_size: int = 512
    """Number of training samples (images or clips)."""

    val_size: int = 64
    """Number of validation samples."""

    seed: int = 0
    """Base seed; sample i uses a seed derived from (seed, split, i)."""

    root: Optional[str] = None
    """Directory written by ``pmt gen-data``.

    If unset, samples are generated on the fly.
    """

    @property
    def num_classes(self) -> int:
        return len(self.thing_names) + len(self.stuff_names)

    @property
    def thing_classes(self) -> List[int]:
        return list(range(len(self.thing_names)))

    @property
    def stuff_classes(self) -> List[int]:
        n = len(self.thing_names)
        return list(range(n, n + len(self.stuff_names)))


@dataclass_json
@dataclass
class ScheduleConfig(JsonSchemaMixin):
    """Optimisation schedule of the segmentation training."""

    total_steps: int = 3000
    """Total number of optimiser steps T."""

    warmup_steps: int = 100
    """Length of the linear learning-rate warmup."""

    lr: float = 2e-4
    """Peak learning rate."""

    final_lr: float = 0.0
    """Learning rate reached at the last step."""

    lr_policy: str = "auto"
    """Decay after warmup: cosine, poly, or auto.

    ``auto`` selects cosine for images and poly for videos.
    """

    poly_power: float = 0.9
    """Power of the polynomial decay."""

    weight_decay: float = 0.05
    """Decoupled AdamW weight decay."""

    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    """AdamW moment coefficients."""

    eps: float = 1e-8
    """AdamW denominator epsilon."""

    batch_size: int = 8
    """Images per optimiser step (image mode)."""

    clips_per_batch: int = 2
    """Clips per optimiser step (video mode)."""

    eval_every: int = 500
    """Evaluate on the validation split every N steps (0 disables)."""

    eval_samples: int = 32
    """Validation samples used by periodic evaluation."""

    log_every: int = 10
    """Write a training record every N steps."""


@dataclass_json
@dataclass
class PretrainConfig(JsonSchemaMixin):
    """Schedule of the encoder classification pretext."""

    steps: int = 1000
    """Optimiser steps of the pretext."""

    lr: float = 1e-3
    """Peak learning rate of the pretext."""

    warmup_steps: int = 50
    """Linear warmup of the pretext."""

    batch_size: int = 16
    """Images per pretext step."""

    weight_decay: float = 0.05
    """Decoupled weight decay of the pretext."""


@dataclass_json
@dataclass
class PostProcessConfig(JsonSchemaMixin):
    """Thresholds of the panoptic post-processing."""

    object_threshold: float = 0.5
    """Minimal class score for a query to produce a segment."""

    mask_threshold: float = 0.5
    """Mask probability threshold used to binarise masks."""

    overlap_threshold: float = 0.8
    """Minimal fraction of its own mask a query must keep after argmax."""

    min_area: int = 16
    """Segments with fewer pixels are dropped."""


@dataclass_json
@dataclass
class RunConfig(JsonSchemaMixin):
    """The top-level configuration of a PlainMask run."""

    seed: int = 0
    """Seed of the parameter initialisation and of the training stream."""

    config_hash: Optional[str] = None
    """SHA-256 of the configuration file.

    This is set automatically when the configuration is loaded and must
    not be set by the user.
    """

    model: ModelConfig = field(default_factory=lambda: ModelConfig())
    """Architecture."""

    loss: LossWeights = field(default_factory=lambda: LossWeights())
    """Loss and matching weights."""

    data: SyntheticSpec = field(default_factory=lambda: SyntheticSpec())
    """Synthetic dataset."""

    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig())
    """Segmentation training schedule."""

    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig())
    """Encoder pretext schedule."""

    postprocess: PostProcessConfig = field(
        default_factory=lambda: PostProcessConfig()
    )
    """Panoptic post-processing."""
