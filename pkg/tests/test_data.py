# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import os
import tempfile
import unittest

import numpy as np

from plainmask.config import ConfigurationError
from plainmask.data import (
    Shape,
    Split,
    SyntheticDataset,
    _bounce,
    dominant_class,
    downsample_targets,
    generate_clip,
    generate_image,
    load_manifest,
    sample_rng,
    write_dataset,
)
from plainmask.metrics import PanopticMap, Segment
from plainmask.model import SyntheticSpec


def small_spec(**kwargs) -> SyntheticSpec:
    spec = SyntheticSpec(
        image_size=[16, 16],
        min_radius=2,
        max_radius=4,
        min_area=4,
        frames_per_clip=4,
        train_size=3,
        val_size=2,
        seed=5,
    )
    for key, value in kwargs.items():
        setattr(spec, key, value)
    return spec


class TestGeneration(unittest.TestCase):
    """Tests for the synthetic scenes."""

    def test_deterministic(self) -> None:
        spec = small_spec()
        a = generate_image(spec, sample_rng(spec, Split.TRAIN, 2))
        b = generate_image(spec, sample_rng(spec, Split.TRAIN, 2))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.panoptic.id_raster, b.panoptic.id_raster)
        c = generate_image(spec, sample_rng(spec, Split.VAL, 2))
        self.assertFalse(np.array_equal(a.image, c.image))

    def test_ground_truth_is_consistent(self) -> None:
        spec = small_spec()
        n_stuff = len(spec.stuff_names)
        for i in range(30):
            sample = generate_image(spec, sample_rng(spec, Split.TRAIN, i))
            pmap = sample.panoptic
            self.assertEqual((3, 16, 16), sample.image.shape)
            self.assertEqual(np.float32, sample.image.dtype)
            self.assertTrue(pmap.is_valid())
            self.assertFalse(np.any(pmap.id_raster == 0))
            for s in pmap.segments:
                if s.is_thing:
                    self.assertGreater(s.id, n_stuff)
                    self.assertIn(s.category, spec.thing_classes)
                    self.assertGreaterEqual(int((pmap.id_raster == s.id).sum()), spec.min_area)
                else:
                    self.assertLessEqual(s.id, n_stuff)
                    self.assertEqual(spec.stuff_classes[s.id - 1], s.category)

    def test_clip_ids_are_never_reused(self) -> None:
        spec = small_spec(frames_per_clip=8, spawn_prob=1.0, despawn_prob=0.5)
        clip = generate_clip(spec, sample_rng(spec, Split.TRAIN, 0))
        self.assertEqual((8, 3, 16, 16), clip.frames.shape)
        n_stuff = len(spec.stuff_names)
        category = {}
        for pmap in clip.panoptic:
            self.assertTrue(pmap.is_valid())
            for s in pmap.segments:
                category.setdefault(s.id, (s.category, s.is_thing))
                self.assertEqual(category[s.id], (s.category, s.is_thing))
                self.assertEqual(s.is_thing, s.id > n_stuff)
        things = [i for i, (_, thing) in category.items() if thing]
        self.assertGreater(len(things), 1)

    def test_static_scene_repeats(self) -> None:
        spec = small_spec(max_speed=0.0, spawn_prob=0.0, despawn_prob=0.0)
        clip = generate_clip(spec, sample_rng(spec, Split.VAL, 1))
        for t in range(1, spec.frames_per_clip):
            np.testing.assert_array_equal(clip.frames[0], clip.frames[t])

    def test_bounce(self) -> None:
        shape = Shape(3, 0, np.array([1.0, 8.0]), 2, np.zeros(3), np.array([-3.0, 3.0]))
        _bounce(shape, (10, 10))
        np.testing.assert_array_equal([2.0, 7.0], shape.center)
        np.testing.assert_array_equal([3.0, -3.0], shape.velocity)


class TestTargets(unittest.TestCase):
    """Tests for the training targets."""

    def setUp(self) -> None:
        raster = np.ones((8, 8), dtype=np.int64)
        raster[:4, :4] = 2
        raster[6, 6] = 3
        self.pmap = PanopticMap(
            raster, [Segment(1, 4, False), Segment(2, 0, True), Segment(3, 1, True)]
        )

    def test_downsample(self) -> None:
        targets = downsample_targets(self.pmap)
        # the single pixel of segment 3 vanishes at 1/4 resolution
        self.assertEqual([1, 2], targets.ids.tolist())
        self.assertEqual([4, 0], targets.classes.tolist())
        np.testing.assert_array_equal([[0.0, 1.0], [1.0, 1.0]], targets.masks[0])
        np.testing.assert_array_equal([[1.0, 0.0], [0.0, 0.0]], targets.masks[1])

    def test_empty(self) -> None:
        targets = downsample_targets(PanopticMap(np.zeros((8, 8), dtype=np.int64), []))
        self.assertEqual((0, 2, 2), targets.masks.shape)

    def test_dominant_class_prefers_things(self) -> None:
        self.assertEqual(0, dominant_class(self.pmap))
        stuff_only = PanopticMap(np.ones((4, 4), dtype=np.int64), [Segment(1, 4, False)])
        self.assertEqual(4, dominant_class(stuff_only))


class TestStorage(unittest.TestCase):
    """Tests for datasets written to disk."""

    def test_written_dataset_matches_generation(self) -> None:
        spec = small_spec()
        with tempfile.TemporaryDirectory() as tmp:
            splits = write_dataset(spec, tmp, threads=2)
            self.assertEqual(
                ["train/00000.pmtc", "train/00001.pmtc", "train/00002.pmtc"], splits["train"]
            )
            stored = small_spec(root=tmp)
            for split in Split:
                disk = SyntheticDataset(stored, split)
                live = SyntheticDataset(spec, split)
                self.assertIsNotNone(disk.files)
                self.assertEqual(len(live), len(disk))
                for i in range(len(live)):
                    a, b = live[i], disk[i]
                    np.testing.assert_array_equal(a.image, b.image)
                    np.testing.assert_array_equal(a.panoptic.id_raster, b.panoptic.id_raster)
                    self.assertEqual(
                        sorted((s.id, s.category, s.is_thing) for s in a.panoptic.segments),
                        sorted((s.id, s.category, s.is_thing) for s in b.panoptic.segments),
                    )
            manifest = os.path.join(tmp, "manifest.yaml")
            with self.assertRaises(ConfigurationError):
                load_manifest(manifest, Split.TRAIN, video=True)

    def test_written_clips(self) -> None:
        spec = small_spec(train_size=1, val_size=1)
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(spec, tmp, video=True)
            clip = SyntheticDataset(small_spec(root=tmp), Split.VAL, video=True)[0]
        live = SyntheticDataset(spec, Split.VAL, video=True)[0]
        np.testing.assert_array_equal(live.frames, clip.frames)
        for a, b in zip(live.panoptic, clip.panoptic):
            np.testing.assert_array_equal(a.id_raster, b.id_raster)
            self.assertEqual({s.id for s in a.segments}, {s.id for s in b.segments})

    def test_index_out_of_range(self) -> None:
        ds = SyntheticDataset(small_spec(), Split.VAL)
        with self.assertRaises(IndexError):
            ds[2]
