# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import copy
import io
import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from plainmask import training
from plainmask.config import ConfigurationError, load_config
from plainmask.container import save_encoder
from plainmask.encoder import VisionTransformer, parameter_checksum
from plainmask.numerics import default_dtype, precision
from plainmask.training import (
    NonFiniteLossError,
    Trainer,
    eval_threads,
    pretrain_encoder,
    train_loop,
)

TINY = str(Path(__file__).parent / "configs" / "tiny.yaml")

IMAGE_METRICS = {"PQ", "SQ", "RQ", "PQ_th", "PQ_st", "mIoU", "AP", "AP50", "AP75"}


def checkpoint_bytes(trainer: Trainer) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "state.pmtc")
        trainer.save(path)
        with open(path, "rb") as f:
            return f.read()


class TestTrainer(unittest.TestCase):
    """Tests for segmentation training."""

    def setUp(self) -> None:
        self.cfg = load_config(TINY)

    def test_bit_identical_runs(self) -> None:
        a = train_loop(Trainer(self.cfg))
        b = train_loop(Trainer(self.cfg))
        self.assertEqual(4, a.step)
        self.assertEqual(checkpoint_bytes(a), checkpoint_bytes(b))

    def test_seed_changes_run(self) -> None:
        other = copy.deepcopy(self.cfg)
        other.seed = 4
        self.assertNotEqual(
            checkpoint_bytes(Trainer(self.cfg)), checkpoint_bytes(Trainer(other))
        )

    def test_resume_is_equivalent_to_uninterrupted(self) -> None:
        full = train_loop(Trainer(self.cfg))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "half.pmtc")
            train_loop(Trainer(self.cfg), stop_at=2).save(path)
            resumed = Trainer(self.cfg)
            resumed.resume(path)
            self.assertEqual(2, resumed.step)
            train_loop(resumed)
        self.assertEqual(checkpoint_bytes(full), checkpoint_bytes(resumed))

    def test_zero_steps_keeps_initialisation(self) -> None:
        cfg = copy.deepcopy(self.cfg)
        cfg.schedule.total_steps = 0
        trained = train_loop(Trainer(cfg))
        fresh = Trainer(cfg)
        for name, value in fresh.model.state_dict().items():
            np.testing.assert_array_equal(value, trained.model.state_dict()[name])

    def test_frozen_encoder_is_untouched(self) -> None:
        trainer = Trainer(self.cfg)
        before = parameter_checksum(trainer.model.encoder_parameters())
        queries = trainer.model.head.queries.data.copy()
        train_loop(trainer)
        self.assertEqual(before, parameter_checksum(trainer.model.encoder_parameters()))
        self.assertFalse(np.array_equal(queries, trainer.model.head.queries.data))

    def test_finetuned_encoder_changes(self) -> None:
        trainer = Trainer(self.cfg, "eomt-finetuned")
        before = parameter_checksum(trainer.model.encoder_parameters())
        trainer.train_step()
        self.assertNotEqual(before, parameter_checksum(trainer.model.encoder_parameters()))

    def test_log_records(self) -> None:
        log = io.StringIO()
        train_loop(Trainer(self.cfg), log=log)
        records = [json.loads(line) for line in log.getvalue().splitlines()]
        self.assertEqual([0, 1, 2, 3], [r["step"] for r in records])
        self.assertTrue(all(np.isfinite(r["loss"]) for r in records))
        self.assertEqual(self.cfg.model.decoder_layers, len(records[0]["mask_draws"]))

    def test_non_finite_loss(self) -> None:
        cfg = copy.deepcopy(self.cfg)
        cfg.loss.no_object_weight = float("inf")
        trainer = Trainer(cfg)
        with np.errstate(all="ignore"):
            with self.assertRaises(NonFiniteLossError) as cm:
                trainer.train_step()
        self.assertEqual(0, cm.exception.step)
        self.assertEqual(0, trainer.step)

    def test_video_step(self) -> None:
        trainer = Trainer(self.cfg, video=True)
        record = trainer.train_step()
        self.assertTrue(np.isfinite(record.loss))
        self.assertEqual(1, trainer.step)

    def test_pretrained_encoder(self) -> None:
        encoder = VisionTransformer(self.cfg.model, np.random.default_rng(99))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "encoder.pmtc")
            save_encoder(path, encoder)
            trainer = Trainer(self.cfg, encoder_path=path)
        self.assertEqual(
            parameter_checksum(encoder.parameters()),
            parameter_checksum(trainer.model.encoder_parameters()),
        )
        with self.assertRaises(ConfigurationError):
            Trainer(self.cfg, encoder_path="/nonexistent/encoder.pmtc")


class TestEvaluation(unittest.TestCase):
    """Tests for the evaluation loop."""

    def setUp(self) -> None:
        self.cfg = load_config(TINY)

    def test_image_metrics(self) -> None:
        metrics = Trainer(self.cfg).evaluate(limit=3)
        self.assertEqual(IMAGE_METRICS, set(metrics))
        for value in metrics.values():
            if value is not None:
                self.assertGreaterEqual(value, 0.0)
                self.assertLessEqual(value, 1.0)

    def test_threads_do_not_change_results(self) -> None:
        trainer = Trainer(self.cfg)
        one = trainer.evaluate(threads=1)
        two = trainer.evaluate(threads=3)
        for key, value in one.items():
            if value is None:
                self.assertIsNone(two[key])
            else:
                other = two[key]
                assert other is not None
                self.assertAlmostEqual(value, other, places=12)

    def test_workers_inherit_precision(self) -> None:
        real = training._evaluate_shard
        seen = []

        def record(*args):
            seen.append(default_dtype())
            return real(*args)

        with precision(np.float64):
            trainer = Trainer(self.cfg)
            with mock.patch("plainmask.training._evaluate_shard", side_effect=record):
                trainer.evaluate(limit=2, threads=2)
        self.assertEqual([np.float64, np.float64], seen)

    def test_video_metrics(self) -> None:
        metrics = Trainer(self.cfg, video=True).evaluate(limit=2)
        self.assertEqual({"VPQ", "VPQ_k0", "VPQ_k1", "VPQ_k2", "association"}, set(metrics))

    def test_eval_threads(self) -> None:
        with mock.patch.dict(os.environ, {"PMT_THREADS": "4"}):
            self.assertEqual(4, eval_threads())
        with mock.patch.dict(os.environ, {"PMT_THREADS": "many"}):
            with self.assertRaises(ConfigurationError):
                eval_threads()
        with mock.patch.dict(os.environ, {"PMT_THREADS": "0"}):
            with self.assertRaises(ConfigurationError):
                eval_threads()
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(1, eval_threads())


class TestPretext(unittest.TestCase):
    """Tests for the encoder pretext task."""

    def test_pretrain(self) -> None:
        cfg = load_config(TINY)
        init = VisionTransformer(cfg.model, np.random.default_rng(cfg.seed))
        result = pretrain_encoder(cfg, eval_samples=2)
        self.assertGreaterEqual(result.accuracy, 0.0)
        self.assertLessEqual(result.accuracy, 1.0)
        self.assertNotEqual(
            parameter_checksum(init.parameters()), parameter_checksum(result.encoder.parameters())
        )
