# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

from typing import Dict, List, Optional

import numpy as np

from .config import ConfigurationError
from .layers import MLP, BNState, LayerNorm, Module
from .model import ModelConfig
from .numerics import Tensor


class LateralBranch(Module):
    """One lateral connection: ``y = BN(x)`` then ``y + MLP(y)``.

    The input is expected to be already normalised by the encoder's final
    LayerNorm. The second MLP layer starts at zero, so a fresh branch
    reduces to its batch normalisation.
    """

    def __init__(self, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.bn = BNState(dim)
        self.mlp = MLP([dim, dim, dim], rng, std, zero_last=True)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.bn(x, training)
        return y + self.mlp(y)


class LateralFusion(Module):
    """Sums the lateral branches of every tapped encoder layer."""

    branches: List[LateralBranch]

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.tap_layers = list(cfg.tap_layers)
        self.branches = [
            LateralBranch(cfg.embed_dim, rng, cfg.init_std) for _ in self.tap_layers
        ]

    def fuse_features(
        self,
        taps: Dict[int, Tensor],
        final_norm: LayerNorm,
        training: bool,
    ) -> Tensor:
        """Builds the multi-depth decoder input.

        :param taps: Patch tokens [N, D] keyed by 1-based encoder layer.
        :param final_norm: The encoder's own final LayerNorm; it is used
            as is, so its parameters stay tied to the encoder.
        :param training: Selects batch or running statistics in the
            batch normalisations.

        :returns: The fused patch tokens [N, D].
        """
        fused: Optional[Tensor] = None
        for layer, branch in zip(self.tap_layers, self.branches):
            if layer not in taps:
                raise ConfigurationError(f"Missing encoder tap for layer {layer}")
            out = branch(final_norm(taps[layer]), training)
            fused = out if fused is None else fused + out
        assert fused is not None
        return fused
