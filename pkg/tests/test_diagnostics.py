# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import unittest
from pathlib import Path

from plainmask.config import load_config
from plainmask.diagnostics import (
    GRADIENT_CASES,
    GradientCheckError,
    assert_gradients,
    bench,
    run_gradient_suite,
)
from plainmask.numerics import GradCheckReport

TINY = str(Path(__file__).parent / "configs" / "tiny.yaml")


class TestGradientSuite(unittest.TestCase):
    """Tests for the finite-difference gradient checks."""

    def test_every_case_passes(self) -> None:
        reports = run_gradient_suite(instances=2, seed=1)
        self.assertEqual(list(GRADIENT_CASES), [r.name for r in reports])
        for r in reports:
            self.assertGreater(r.checked, 0, r.name)
            self.assertTrue(r.passed(), f"{r.name}: {r.max_rel_error:.3g}")
        assert_gradients(reports)

    def test_selected_cases(self) -> None:
        reports = run_gradient_suite(instances=1, names=["exp", "rope"])
        self.assertEqual(["exp", "rope"], [r.name for r in reports])

    def test_failure_is_reported(self) -> None:
        bad = GradCheckReport("softmax", 0.5, 10, worst_parameter="x")
        with self.assertRaises(GradientCheckError) as cm:
            assert_gradients([GradCheckReport("exp", 0.0, 4), bad])
        self.assertEqual("x", cm.exception.op)
        nan = GradCheckReport("log", 0.0, 3, failed_op="log")
        with self.assertRaises(GradientCheckError):
            assert_gradients([nan])


class TestBench(unittest.TestCase):
    """Tests for the inference timer."""

    def test_bench(self) -> None:
        cfg = load_config(TINY).model
        result = bench(cfg, "pmt-norope", runs=2, warmup=1)
        self.assertEqual("pmt-norope", result.variant)
        self.assertEqual(2, result.runs)
        self.assertGreater(result.mean_ms, 0.0)
        self.assertGreaterEqual(result.std_ms, 0.0)

    def test_needs_runs(self) -> None:
        with self.assertRaises(ValueError):
            bench(load_config(TINY).model, runs=0)
