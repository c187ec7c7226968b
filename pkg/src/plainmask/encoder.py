# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Plain ViT encoder with 2-D rotary positions and multi-depth taps.

Token sequences are stored token-major, one row per token: a sequence
of ``T`` tokens of width ``D`` is a ``[T, D]`` tensor. The encoder
sequence is laid out as ``[class | registers | patches]``, with patches
in row-major grid order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from hashlib import sha256
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigurationError
from .layers import MLP, LayerNorm, Linear, Module, Parameter
from .model import ModelConfig
from .numerics import Tensor, concat, matmul, reshape, rotate_pairs, softmax, transpose


def grid_positions(grid_h: int, grid_w: int) -> np.ndarray:
    """Gets the (row, col) coordinates of a grid in row-major order."""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.float64)


@dataclass
class RopeTable:
    """Per-token rotation factors of the 2-D rotary position embedding.

    Feature pairs ``(2i, 2i+1)`` of every head are rotated; the first
    half of the pairs encode the row coordinate, the second half the
    column coordinate. Tokens without a grid coordinate get the identity
    rotation.
    """

    cos: np.ndarray
    """Cosines, shape [T, head_dim / 2]."""

    sin: np.ndarray
    """Sines, shape [T, head_dim / 2]."""

    @classmethod
    def build(
        cls,
        positions: np.ndarray,
        head_dim: int,
        base: float,
        has_position: Optional[np.ndarray] = None,
    ) -> "RopeTable":
        """Computes the factors for explicit token coordinates.

        :param positions: Array [T, 2] of (row, col) coordinates.
        :param head_dim: Width of one attention head; must be even.
        :param base: Base frequency.
        :param has_position: Optional boolean mask [T]; tokens marked
            false receive the identity rotation.
        """
        if head_dim % 2 != 0:
            raise ConfigurationError(f"RoPE needs an even head dimension, got {head_dim}")
        n_pairs = head_dim // 2
        n_row = n_pairs // 2
        n_col = n_pairs - n_row
        freq_row = base ** (-np.arange(n_row) / max(n_row, 1))
        freq_col = base ** (-np.arange(n_col) / max(n_col, 1))
        pos = np.asarray(positions, dtype=np.float64)
        angles = np.concatenate(
            [pos[:, 0:1] * freq_row[None, :], pos[:, 1:2] * freq_col[None, :]], axis=1
        )
        if has_position is not None:
            angles[~np.asarray(has_position, dtype=bool)] = 0.0
        return cls(np.cos(angles), np.sin(angles))

    @classmethod
    def for_sequence(
        cls,
        grid: Tuple[int, int],
        head_dim: int,
        base: float,
        leading: int,
        shift: Tuple[int, int] = (0, 0),
    ) -> "RopeTable":
        """Factors for ``leading`` position-free tokens followed by a grid.

        :param grid: Token grid (rows, cols).
        :param head_dim: Width of one attention head.
        :param base: Base frequency.
        :param leading: Number of tokens without grid coordinate.
        :param shift: Offset added to every grid coordinate.
        """
        grid_pos = grid_positions(*grid) + np.asarray(shift, dtype=np.float64)
        positions = np.concatenate([np.zeros((leading, 2)), grid_pos], axis=0)
        has_position = np.concatenate(
            [np.zeros(leading, dtype=bool), np.ones(len(grid_pos), dtype=bool)]
        )
        return cls.build(positions, head_dim, base, has_position)

    def permuted(self, order: np.ndarray) -> "RopeTable":
        """Gets the factors with tokens reordered."""
        return RopeTable(self.cos[order], self.sin[order])


def rope_rotate(x: Tensor, table: RopeTable) -> Tensor:
    """Applies the rotary position embedding to queries or keys [..., T, d]."""
    return rotate_pairs(x, table.cos, table.sin)


class MultiHeadAttention(Module):
    """Multi-head self-attention with optional RoPE and additive bias."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, std: float):
        self.qkv = Linear(dim, 3 * dim, rng, std)
        self.proj = Linear(dim, dim, rng, std)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads

    def __call__(
        self,
        x: Tensor,
        rope: Optional[RopeTable] = None,
        bias: Optional[np.ndarray] = None,
        weights_out: Optional[list] = None,
    ) -> Tensor:
        """Attends over the rows of ``x[T, D]``.

        :param x: The token sequence.
        :param rope: Rotation factors for the T tokens, or None.
        :param bias: Additive attention bias [T, T] (rows are queries
            of the attention, columns are keys), or None.
        :param weights_out: If given, the attention weights [H, T, T]
            are appended to this list.
        """
        t, d = x.shape
        qkv = reshape(self.qkv(x), (t, 3, self.num_heads, self.head_dim))
        qkv = transpose(qkv, (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        if rope is not None:
            q = rope_rotate(q, rope)
            k = rope_rotate(k, rope)
        logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            logits = logits + Tensor(bias, dtype=logits.dtype)
        weights = softmax(logits, axis=-1)
        if weights_out is not None:
            weights_out.append(weights.data)
        out = transpose(matmul(weights, v), (1, 0, 2))
        return self.proj(reshape(out, (t, d)))


class TransformerLayer(Module):
    """Pre-norm Transformer layer.

    ``Z = X + MHSA(Norm(X))`` followed by ``X' = Z + FFN(Norm(Z))``.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        ffn_expansion: int,
        rng: np.random.Generator,
        std: float = 0.02,
        eps: float = 1e-6,
    ):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = MultiHeadAttention(dim, num_heads, rng, std)
        self.norm2 = LayerNorm(dim, eps)
        self.ffn = MLP([dim, dim * ffn_expansion, dim], rng, std)

    def __call__(
        self,
        x: Tensor,
        rope: Optional[RopeTable] = None,
        bias: Optional[np.ndarray] = None,
        weights_out: Optional[list] = None,
    ) -> Tensor:
        z = x + self.attn(self.norm1(x), rope, bias, weights_out)
        return z + self.ffn(self.norm2(z))


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Cuts an image [3, H, W] into flattened patches [N, 3*p*p].

    Patches are listed in row-major grid order; each patch is flattened
    channel first, then row, then column.
    """
    c, h, w = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ConfigurationError(f"Image size {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = reshape(image, (c, gh, p, gw, p))
    x = transpose(x, (1, 3, 0, 2, 4))
    return reshape(x, (gh * gw, c * p * p))


class PatchEmbedding(Module):
    """Linear patch projection, prefixed by class and register tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        p, d = cfg.patch_size, cfg.embed_dim
        self.proj = Linear(3 * p * p, d, rng, cfg.init_std)
        self.cls_token = Parameter(rng.normal(0.0, cfg.init_std, size=(1, d)))
        self.register_tokens = Parameter(
            rng.normal(0.0, cfg.init_std, size=(cfg.num_register_tokens, d))
        )
        self.image_size = tuple(cfg.image_size)
        self.patch_size = p

    def __call__(self, image: Tensor) -> Tensor:
        if image.shape != (3,) + self.image_size:
            raise ConfigurationError(
                f"Expected an image of shape {(3,) + self.image_size}, got {image.shape}"
            )
        patches = self.proj(patchify(image, self.patch_size))
        return concat([self.cls_token, self.register_tokens, patches], axis=0)


@dataclass
class EncoderOutput:
    """Patch tokens collected by the encoder."""

    taps: Dict[int, Tensor]
    """Patch tokens [N, D] after each tapped layer (1-based)."""

    final: Tensor
    """Patch tokens [N, D] after the last layer."""

    prefix: Tensor
    """Class and register tokens [1 + R, D] after the last layer."""


class VisionTransformer(Module):
    """The plain ViT encoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = PatchEmbedding(cfg, rng)
        self.layers = [
            TransformerLayer(
                cfg.embed_dim,
                cfg.num_heads,
                cfg.ffn_expansion,
                rng,
                cfg.init_std,
                cfg.layer_norm_eps,
            )
            for _ in range(cfg.num_layers)
        ]
        self.norm = LayerNorm(cfg.embed_dim, cfg.layer_norm_eps)
        self.tap_layers = list(cfg.tap_layers)
        self.num_prefix = cfg.num_prefix_tokens
        self.rope = RopeTable.for_sequence(
            cfg.grid_size, cfg.head_dim, cfg.rope_base, leading=self.num_prefix
        )

    def run_layers(
        self,
        tokens: Tensor,
        start: int,
        stop: int,
        rope: Optional[RopeTable] = None,
        taps: Optional[Dict[int, Tensor]] = None,
    ) -> Tensor:
        """Runs layers ``start`` to ``stop - 1`` (0-based) over a sequence.

        :param tokens: Encoder sequence [1 + R + N, D].
        :param start: First layer to run.
        :param stop: Layer to stop before.
        :param rope: Rotation factors; defaults to the encoder table.
        :param taps: If given, receives the patch tokens after every
            tapped layer that is run, keyed by 1-based layer index.
        """
        if rope is None:
            rope = self.rope
        for i in range(start, stop):
            tokens = self.layers[i](tokens, rope)
            if taps is not None and (i + 1) in self.tap_layers:
                taps[i + 1] = tokens[self.num_prefix :]
        return tokens

    def forward_tokens(self, tokens: Tensor, rope: Optional[RopeTable] = None) -> EncoderOutput:
        """Runs every layer over an already embedded sequence."""
        taps: Dict[int, Tensor] = {}
        tokens = self.run_layers(tokens, 0, len(self.layers), rope, taps)
        return EncoderOutput(
            taps=taps,
            final=tokens[self.num_prefix :],
            prefix=tokens[: self.num_prefix],
        )

    def __call__(self, image: Tensor) -> EncoderOutput:
        return self.forward_tokens(self.embed(image))


def parameter_checksum(params: Sequence[Parameter]) -> str:
    """SHA-256 over the raw bytes of a list of parameters."""
    h = sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()
