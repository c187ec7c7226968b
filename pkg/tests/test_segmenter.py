# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import unittest
from pathlib import Path

import numpy as np

from plainmask.config import ConfigurationError, load_config
from plainmask.decoder import EoMTInjection, PlainMaskDecoder
from plainmask.encoder import parameter_checksum
from plainmask.layers import Linear
from plainmask.model import MODEL_VARIANTS
from plainmask.numerics import Tensor
from plainmask.segmenter import PlainMaskTransformer, build_model
from plainmask.temporal import QueryPropagation, TrackState, propagate_queries

TINY = str(Path(__file__).parent / "configs" / "tiny.yaml")


def random_image(seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).uniform(size=(3, 32, 32)))


class TestVariants(unittest.TestCase):
    """Tests for the assembly of the model variants."""

    def setUp(self) -> None:
        self.cfg = load_config(TINY).model

    def test_components(self) -> None:
        expected = {
            "pmt": (True, True),
            "pmt-nolateral": (False, True),
            "pmt-norope": (True, False),
            "pmd-plain": (False, False),
        }
        for variant, (lateral, rope) in expected.items():
            model = PlainMaskTransformer(self.cfg, variant)
            assert isinstance(model.head, PlainMaskDecoder)
            self.assertEqual(lateral, model.lateral is not None, variant)
            self.assertEqual(rope, model.head.rope is not None, variant)
            self.assertTrue(model.encoder_frozen)

    def test_injection_variants(self) -> None:
        frozen = PlainMaskTransformer(self.cfg, "eomt-frozen")
        tuned = PlainMaskTransformer(self.cfg, "eomt-finetuned")
        self.assertIsInstance(frozen.head, EoMTInjection)
        self.assertTrue(frozen.encoder_frozen)
        self.assertFalse(tuned.encoder_frozen)
        names = tuned.trainable_parameters()
        self.assertTrue(any(n.startswith("encoder.") for n in names))

    def test_frozen_encoder_not_trainable(self) -> None:
        model = PlainMaskTransformer(self.cfg, "pmt")
        names = model.trainable_parameters()
        self.assertFalse(any(n.startswith("encoder.") for n in names))
        self.assertIn("head.queries", names)

    def test_encoder_init_independent_of_variant(self) -> None:
        sums = {
            parameter_checksum(build_model(self.cfg, v, seed=7).encoder_parameters())
            for v in MODEL_VARIANTS
        }
        self.assertEqual(1, len(sums))

    def test_unknown_variant(self) -> None:
        with self.assertRaises(ConfigurationError):
            PlainMaskTransformer(self.cfg, "mask2former")

    def test_every_variant_predicts(self) -> None:
        image = random_image()
        for variant in MODEL_VARIANTS:
            out = PlainMaskTransformer(self.cfg, variant)(image)
            self.assertEqual(
                (self.cfg.num_queries,) + self.cfg.mask_size,
                out.final.mask_logits.shape,
                variant,
            )

    def test_injection_deep_supervision(self) -> None:
        model = PlainMaskTransformer(self.cfg, "eomt-frozen", total_steps=10)
        out = model(random_image(), training=True, rng=np.random.default_rng(0))
        self.assertEqual(self.cfg.eomt_split[1] + 1, len(out.predictions))


class TestQueryPropagation(unittest.TestCase):
    """Tests for the temporal query fusion."""

    def setUp(self) -> None:
        self.cfg = load_config(TINY).model

    def test_first_frame_uses_learned_queries(self) -> None:
        learned = Tensor(np.ones((4, 8)))
        state = TrackState(4)
        self.assertTrue(state.is_first_frame)
        prop = QueryPropagation(8, np.random.default_rng(0))
        self.assertIs(learned, prop(state, learned))

    def test_fusion(self) -> None:
        rng = np.random.default_rng(0)
        proj = Linear(8, 8, rng, std=1.0)
        learned = Tensor(rng.normal(size=(4, 8)))
        prev = Tensor(rng.normal(size=(4, 8)))
        state = TrackState(4).advance(prev)
        self.assertEqual(1, state.frame_index)
        out = propagate_queries(state, learned, proj).data
        np.testing.assert_allclose(out, proj(prev).data + learned.data, rtol=1e-6)

    def test_track_ids_are_positional(self) -> None:
        state = TrackState(5).advance(Tensor(np.zeros((5, 2))))
        self.assertEqual([0, 1, 2, 3, 4], state.track_ids.tolist())

    def test_query_count_mismatch(self) -> None:
        with self.assertRaises(ConfigurationError):
            TrackState(4).advance(Tensor(np.zeros((3, 8))))
        state = TrackState(3).advance(Tensor(np.zeros((3, 8))))
        proj = Linear(8, 8, np.random.default_rng(0))
        with self.assertRaises(ConfigurationError):
            propagate_queries(state, Tensor(np.zeros((4, 8))), proj)

    def test_first_frame_matches_image_model(self) -> None:
        model = PlainMaskTransformer(self.cfg, "pmt", seed=1)
        frames = [random_image(i) for i in range(3)]
        clip = model.forward_clip(frames)
        single = model(frames[0])
        np.testing.assert_array_equal(
            single.final.mask_logits.data, clip[0].final.mask_logits.data
        )
        np.testing.assert_array_equal(
            single.final.class_logits.data, clip[0].final.class_logits.data
        )

    def test_clip_shares_mask_draws(self) -> None:
        model = PlainMaskTransformer(self.cfg, "pmt", seed=1, total_steps=100)
        frames = [random_image(i) for i in range(3)]
        # step 40 lies inside the annealing window of the first layer
        clip = model.forward_clip(frames, training=True, step=40, rng=np.random.default_rng(4))
        self.assertEqual(1, len({tuple(o.draws) for o in clip}))

    def test_clip_training_needs_generator(self) -> None:
        model = PlainMaskTransformer(self.cfg, "pmt", total_steps=10)
        with self.assertRaises(ValueError):
            model.forward_clip([random_image()], training=True)
