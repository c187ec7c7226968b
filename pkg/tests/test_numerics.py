# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import unittest

import numpy as np

from plainmask.layers import BNState, Parameter
from plainmask.numerics import (
    DimensionError,
    Tape,
    Tensor,
    batch_norm,
    bce_with_logits,
    bilinear_upsample2x,
    cross_entropy,
    default_dtype,
    grad_check,
    log,
    matmul,
    precision,
    rotate_pairs,
    softmax,
    upsample_array,
)


class TestTape(unittest.TestCase):
    """Tests for the recording and replay of operations."""

    def test_records_only_differentiable_ops(self) -> None:
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((2, 3)))
        with Tape() as tape:
            a + b
            b * b
        self.assertEqual(["add"], [op.name for op in tape.ops])

    def test_scalars_keep_their_shape(self) -> None:
        self.assertEqual((), Tensor(0.5).shape)
        self.assertEqual((), Tensor(np.float64(2.0)).shape)
        out = Tensor(0.5) * Tensor(np.ones((2, 3, 3)))
        self.assertEqual((2, 3, 3), out.shape)
        np.testing.assert_allclose(out.data, 0.5)

    def test_scalar_loss_gradient(self) -> None:
        with precision(np.float64):
            a = Parameter(np.ones((2, 3)))
            with Tape() as tape:
                loss = (a * 3.0).sum() * Tensor(0.5)
            self.assertEqual((), loss.shape)
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, np.full((2, 3), 1.5))

    def test_no_recording_outside_tape(self) -> None:
        a = Tensor(np.ones(3), requires_grad=True)
        out = a * 2.0
        self.assertFalse(out.requires_grad)

    def test_broadcast_gradient(self) -> None:
        with precision(np.float64):
            a = Parameter(np.arange(6.0).reshape(2, 3))
            b = Parameter(np.array([1.0, 2.0, 3.0]))
            with Tape() as tape:
                loss = (a * b).sum()
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
        np.testing.assert_allclose(b.grad, [3.0, 5.0, 7.0])

    def test_gradients_accumulate_over_uses(self) -> None:
        with precision(np.float64):
            x = Parameter(np.array([2.0]))
            with Tape() as tape:
                loss = (x * x + x).sum()
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_frozen_tensor_gets_no_gradient(self) -> None:
        w = Parameter(np.ones((3, 2)), requires_grad=False)
        x = Parameter(np.ones((1, 3)))
        with Tape() as tape:
            loss = matmul(x, w).sum()
        tape.backward(loss)
        self.assertIsNone(w.grad)
        self.assertIsNotNone(x.grad)

    def test_backward_needs_differentiable_loss(self) -> None:
        with Tape() as tape:
            loss = Tensor(np.ones(2)).sum()
        with self.assertRaises(ValueError):
            tape.backward(loss)

    def test_first_nonfinite(self) -> None:
        x = Parameter(np.array([-1.0, 1.0]))
        with Tape() as tape:
            with np.errstate(invalid="ignore"):
                log(x).sum()
        self.assertEqual("log", tape.first_nonfinite())


class TestShapes(unittest.TestCase):
    """Tests for the shape checks of the primitives."""

    def test_matmul_mismatch(self) -> None:
        with self.assertRaises(DimensionError) as cm:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        self.assertIn("(2, 3)", str(cm.exception))
        self.assertIn("(4, 5)", str(cm.exception))

    def test_trailing_broadcast_rejected(self) -> None:
        with self.assertRaises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 1)))

    def test_reshape_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            Tensor(np.ones(6)).reshape(4, 2)


class TestPrecision(unittest.TestCase):
    """Tests for the default dtype switch."""

    def test_default_is_32_bit(self) -> None:
        self.assertEqual(np.float32, default_dtype())
        self.assertEqual(np.float32, Parameter(np.ones(2)).dtype)

    def test_precision_block(self) -> None:
        with precision(np.float64):
            self.assertEqual(np.float64, Parameter(np.ones(2)).dtype)
        self.assertEqual(np.float32, Parameter(np.ones(2)).dtype)


class TestOps(unittest.TestCase):
    """Tests for the values computed by the primitives."""

    def test_softmax_ignores_minus_infinity(self) -> None:
        x = Tensor(np.array([[0.0, -np.inf, 0.0]]), dtype=np.float64)
        out = softmax(x).data
        np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])

    def test_softmax_is_shift_invariant(self) -> None:
        x = np.random.default_rng(0).normal(size=(3, 5))
        a = softmax(Tensor(x, dtype=np.float64)).data
        b = softmax(Tensor(x + 1000.0, dtype=np.float64)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_upsample_keeps_constants(self) -> None:
        x = Tensor(np.full((2, 3, 4), 1.5), dtype=np.float64)
        out = bilinear_upsample2x(x).data
        self.assertEqual((2, 6, 8), out.shape)
        np.testing.assert_allclose(out, 1.5)

    def test_upsample_array_matches_op(self) -> None:
        x = np.random.default_rng(1).normal(size=(1, 3, 3))
        op = bilinear_upsample2x(bilinear_upsample2x(Tensor(x, dtype=np.float64))).data
        np.testing.assert_allclose(upsample_array(x, 2), op, atol=1e-12)

    def test_rotation_by_zero_is_identity(self) -> None:
        x = Tensor(np.random.default_rng(2).normal(size=(4, 6)), dtype=np.float64)
        out = rotate_pairs(x, np.ones((4, 3)), np.zeros((4, 3))).data
        np.testing.assert_allclose(out, x.data)

    def test_rotation_preserves_norm(self) -> None:
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
        angles = rng.uniform(-3, 3, size=(4, 3))
        out = rotate_pairs(x, np.cos(angles), np.sin(angles)).data
        np.testing.assert_allclose(
            np.linalg.norm(out, axis=1), np.linalg.norm(x.data, axis=1)
        )

    def test_batch_norm_running_statistics(self) -> None:
        with precision(np.float64):
            state = BNState(2, momentum=0.5)
            x = Tensor(np.array([[1.0, 0.0], [3.0, 4.0]]))
            batch_norm(x, state, training=True)
        np.testing.assert_allclose(state.running_mean.data, [1.0, 1.0])
        # unbiased variances are 2 and 8
        np.testing.assert_allclose(state.running_var.data, [1.5, 4.5])

    def test_batch_norm_eval_uses_running_statistics(self) -> None:
        with precision(np.float64):
            state = BNState(1)
            state.running_mean.data = np.array([2.0])
            state.running_var.data = np.array([4.0])
            out = batch_norm(Tensor(np.array([[4.0]])), state, training=False).data
        np.testing.assert_allclose(out, [[2.0 / np.sqrt(4.0 + state.eps)]])

    def test_bce_with_logits(self) -> None:
        x = np.array([-2.0, 0.0, 3.0])
        t = np.array([0.0, 1.0, 1.0])
        p = 1.0 / (1.0 + np.exp(-x))
        expected = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        out = bce_with_logits(Tensor(x, dtype=np.float64), t).data
        np.testing.assert_allclose(out, expected)

    def test_weighted_cross_entropy(self) -> None:
        logits = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        target = np.array([0, 2])
        weights = np.array([1.0, 1.0, 0.1])
        lsm = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -(1.0 * lsm[0, 0] + 0.1 * lsm[1, 2]) / 1.1
        out = cross_entropy(Tensor(logits, dtype=np.float64), target, weights).item()
        self.assertAlmostEqual(expected, out, places=12)


class TestGradCheck(unittest.TestCase):
    """Tests for the finite-difference checker itself."""

    def test_passes_on_correct_gradient(self) -> None:
        with precision(np.float64):
            x = Parameter(np.random.default_rng(0).normal(size=(3, 4)))
            report = grad_check(lambda: (x * x).sum(), {"x": x}, "square")
        self.assertTrue(report.passed())
        self.assertEqual(12, report.checked)

    def test_requires_64_bit(self) -> None:
        x = Parameter(np.ones(3))
        with self.assertRaises(ValueError):
            grad_check(lambda: x.sum(), [x])

    def test_reports_nonfinite_provenance(self) -> None:
        with precision(np.float64):
            x = Parameter(np.array([-1.0, 2.0]))
            with np.errstate(invalid="ignore"):
                report = grad_check(lambda: log(x).sum(), [x], "log")
        self.assertFalse(report.passed())
        self.assertEqual("log", report.failed_op)

    def test_sampling_limits_checked_entries(self) -> None:
        with precision(np.float64):
            x = Parameter(np.ones((10, 10)))
            report = grad_check(lambda: (x * x).sum(), [x], max_entries=7)
        self.assertEqual(7, report.checked)
