# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Full segmentation models, assembled per variant.

======================  ======================================
Variant                 Architecture
======================  ======================================
``pmt``                 frozen ViT, lateral fusion, RoPE decoder
``pmt-nolateral``       decoder fed the last encoder layer only
``pmt-norope``          no positions in the decoder
``pmd-plain``           neither lateral fusion nor RoPE
``eomt-frozen``         queries injected into a frozen encoder
``eomt-finetuned``      queries injected into a trainable encoder
======================  ======================================
"""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np

from .config import ConfigurationError
from .decoder import AnnealSchedule, DecoderOutput, EoMTInjection, PlainMaskDecoder
from .encoder import VisionTransformer
from .lateral import LateralFusion
from .layers import Module, Parameter
from .model import MODEL_VARIANTS, ModelConfig, Variant
from .numerics import Tensor
from .temporal import QueryPropagation, TrackState


class PlainMaskTransformer(Module):
    """Encoder, optional lateral fusion, decoder and query propagation."""

    head: Union[PlainMaskDecoder, EoMTInjection]
    lateral: Optional[LateralFusion]

    def __init__(
        self,
        cfg: ModelConfig,
        variant: Variant = "pmt",
        seed: int = 0,
        total_steps: int = 0,
    ):
        """Creates a freshly initialised model.

        :param cfg: The architecture.
        :param variant: One of ``MODEL_VARIANTS``.
        :param seed: Seed of the parameter initialisation. The encoder is
            always initialised first, so that its initial weights do not
            depend on the variant.
        :param total_steps: Length of training, for mask annealing.
        """
        if variant not in MODEL_VARIANTS:
            raise ConfigurationError(
                f"Unknown model variant {variant!r} (expected one of {', '.join(MODEL_VARIANTS)})"
            )
        self.cfg = cfg
        self.variant = variant
        rng = np.random.default_rng(seed)
        self.encoder = VisionTransformer(cfg, rng)
        self.lateral = None
        if variant.startswith("eomt"):
            self.head = EoMTInjection(cfg, self.encoder, rng, total_steps)
        else:
            if variant in ("pmt", "pmt-norope"):
                self.lateral = LateralFusion(cfg, rng)
            use_rope = variant in ("pmt", "pmt-nolateral")
            self.head = PlainMaskDecoder(cfg, rng, total_steps, use_rope=use_rope)
        self.propagation = QueryPropagation(cfg.embed_dim, rng)

        if variant == "eomt-finetuned":
            frozen = False
        elif variant == "eomt-frozen":
            frozen = True
        else:
            frozen = cfg.freeze_encoder
        if frozen:
            self.encoder.freeze()
        self.encoder_frozen = frozen
        logging.debug(
            f"Built {variant} with {self.num_parameters()} parameters, "
            f"{sum(p.data.size for p in self.trainable_parameters().values())} trainable"
        )

    @property
    def schedule(self) -> AnnealSchedule:
        return self.head.schedule

    @property
    def learned_queries(self) -> Parameter:
        return self.head.queries

    def encoder_parameters(self) -> List[Parameter]:
        return self.encoder.parameters()

    def __call__(
        self,
        image: Tensor,
        training: bool = False,
        step: int = 0,
        rng: Optional[np.random.Generator] = None,
        mask_draws: Optional[Sequence[bool]] = None,
        queries_in: Optional[Tensor] = None,
    ) -> DecoderOutput:
        """Segments one image [3, H, W].

        :param queries_in: Queries to decode instead of the learned ones
            (used by query propagation).
        """
        if isinstance(self.head, EoMTInjection):
            return self.head(image, training, step, rng, mask_draws, queries_in)
        enc = self.encoder(image)
        norm = self.encoder.norm
        if self.lateral is not None:
            fused = self.lateral.fuse_features(enc.taps, norm, training)
        else:
            fused = norm(enc.final)
        return self.head(
            fused, norm(enc.prefix), queries_in, training, step, rng, mask_draws
        )

    def forward_clip(
        self,
        frames: Sequence[Tensor],
        training: bool = False,
        step: int = 0,
        rng: Optional[np.random.Generator] = None,
        mask_draws: Optional[Sequence[bool]] = None,
    ) -> List[DecoderOutput]:
        """Segments the frames of a clip in order, propagating queries.

        In training mode, the masking decisions are drawn once and shared
        by every frame of the clip.
        """
        if training and mask_draws is None:
            if rng is None:
                raise ValueError("Training mode needs a random generator for the mask draws")
            mask_draws = self.schedule.draw(step, rng)
        state = TrackState(self.cfg.num_queries)
        outputs = []
        for frame in frames:
            queries = self.propagation(state, self.learned_queries)
            out = self(frame, training, step, rng, mask_draws, queries)
            outputs.append(out)
            state = state.advance(out.queries)
        return outputs


def build_model(
    cfg: ModelConfig, variant: Variant = "pmt", seed: int = 0, total_steps: int = 0
) -> PlainMaskTransformer:
    return PlainMaskTransformer(cfg, variant, seed, total_steps)
