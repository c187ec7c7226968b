# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import unittest
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from plainmask.decoder import Prediction
from plainmask.metrics import (
    AssociationAccumulator,
    PanopticAccumulator,
    PanopticMap,
    ScoredMask,
    Segment,
    interpolated_precision,
    mask_ap,
    miou,
    panoptic_inference,
    panoptic_quality,
    semantic_inference,
    video_panoptic_quality,
)
from plainmask.model import PostProcessConfig
from plainmask.numerics import Tensor


def random_pair(rng: np.random.Generator, size: int = 6) -> Tuple[PanopticMap, PanopticMap]:
    """A ground truth and a noisy prediction of it, over 3 classes."""
    blocks = rng.integers(0, 5, size=(3, 3))
    gt_r = np.kron(blocks, np.ones((size // 3, size // 3), dtype=np.int64))
    pr_r = gt_r.copy()
    noise = rng.random(gt_r.shape) < 0.2
    pr_r[noise] = rng.integers(0, 6, size=int(noise.sum()))
    gt_cat = {i: int(rng.integers(0, 3)) for i in range(1, 5)}
    pr_cat = {
        i: gt_cat[i] if i in gt_cat and rng.random() < 0.8 else int(rng.integers(0, 3))
        for i in range(1, 6)
    }
    gt = PanopticMap(gt_r, [Segment(i, c, c < 2) for i, c in gt_cat.items()])
    pred = PanopticMap(pr_r, [Segment(i, c, c < 2) for i, c in pr_cat.items()])
    return pred, gt


def tube(frames: Sequence[PanopticMap], segments: List[Segment]) -> PanopticMap:
    return PanopticMap(np.hstack([f.id_raster for f in frames]), segments)


def oracle_pq(
    preds: Sequence[PanopticMap], gts: Sequence[PanopticMap], num_classes: int
) -> Optional[float]:
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    iou_sum = np.zeros(num_classes)
    for pred, gt in zip(preds, gts):
        void = gt.id_raster == 0
        gsegs = [s for s in gt.segments if np.any(gt.id_raster == s.id)]
        psegs = [s for s in pred.segments if np.any(pred.id_raster == s.id)]
        matched_g, matched_p = set(), set()
        for g in gsegs:
            gm = gt.id_raster == g.id
            for p in psegs:
                if p.category != g.category:
                    continue
                pm = pred.id_raster == p.id
                inter = np.sum(gm & pm)
                union = np.sum(gm | pm) - np.sum(pm & void)
                if inter / union > 0.5:
                    tp[g.category] += 1
                    iou_sum[g.category] += inter / union
                    matched_g.add(g.id)
                    matched_p.add(p.id)
        for g in gsegs:
            if g.id not in matched_g:
                fn[g.category] += 1
        for p in psegs:
            pm = pred.id_raster == p.id
            if p.id not in matched_p and np.sum(pm & void) / np.sum(pm) <= 0.5:
                fp[p.category] += 1
    values = [
        iou_sum[c] / (tp[c] + 0.5 * fp[c] + 0.5 * fn[c])
        for c in range(num_classes)
        if tp[c] + fp[c] + fn[c] > 0
    ]
    return float(np.mean(values)) if values else None


def oracle_ap(
    preds: Sequence[Sequence[ScoredMask]],
    gts: Sequence[Sequence[Tuple[int, np.ndarray]]],
    category: int,
    threshold: float,
) -> float:
    ranked: List[Tuple[float, bool]] = []
    num_gt = 0
    for pred, gt in zip(preds, gts):
        gmasks = [m for c, m in gt if c == category]
        num_gt += len(gmasks)
        free = list(range(len(gmasks)))
        for d in sorted((d for d in pred if d.category == category), key=lambda d: -d.score):
            ious = [
                np.sum(d.mask & gmasks[j]) / np.sum(d.mask | gmasks[j]) for j in free
            ]
            hit = bool(ious) and max(ious) >= threshold
            if hit:
                free.pop(int(np.argmax(ious)))
            ranked.append((d.score, hit))
    ranked.sort(key=lambda x: -x[0])
    precisions, recalls = [], []
    hits = 0
    for i, (_, hit) in enumerate(ranked):
        hits += hit
        precisions.append(hits / (i + 1))
        recalls.append(hits / num_gt)
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        reach = [p for p, rc in zip(precisions, recalls) if rc >= r]
        total += max(reach) if reach else 0.0
    return total / 101


class TestPanopticQuality(unittest.TestCase):
    """Tests for panoptic quality."""

    def test_perfect(self) -> None:
        raster = np.array([[1, 1], [2, 2]])
        gt = PanopticMap(raster, [Segment(1, 0, True), Segment(2, 2, False)])
        pred = PanopticMap(raster * 10, [Segment(10, 0, True), Segment(20, 2, False)])
        result = panoptic_quality([pred], [gt], 3, [0, 1])
        self.assertEqual(1.0, result.pq)
        self.assertEqual(1.0, result.pq_things)
        self.assertEqual(1.0, result.pq_stuff)
        self.assertEqual({0, 2}, set(result.per_class))

    def test_against_oracle(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(60):
            pairs = [random_pair(rng) for _ in range(3)]
            preds = [p for p, _ in pairs]
            gts = [g for _, g in pairs]
            expected = oracle_pq(preds, gts, 3)
            result = panoptic_quality(preds, gts, 3, [0, 1])
            if expected is None:
                self.assertIsNone(result.pq)
            else:
                assert result.pq is not None
                self.assertAlmostEqual(expected, result.pq, places=12)

    def test_merge(self) -> None:
        rng = np.random.default_rng(1)
        pairs = [random_pair(rng) for _ in range(4)]
        a = PanopticAccumulator(3, [0, 1])
        b = PanopticAccumulator(3, [0, 1])
        for pred, gt in pairs[:2]:
            a.add(pred, gt)
        for pred, gt in pairs[2:]:
            b.add(pred, gt)
        whole = panoptic_quality([p for p, _ in pairs], [g for _, g in pairs], 3, [0, 1])
        merged = a.merge(b).result().pq
        assert whole.pq is not None and merged is not None
        self.assertAlmostEqual(whole.pq, merged, places=12)

    def test_prediction_on_void_is_ignored(self) -> None:
        gt = PanopticMap(np.array([[1, 0], [0, 0]]), [Segment(1, 0, True)])
        pred = PanopticMap(np.array([[1, 2], [2, 2]]), [Segment(1, 0, True), Segment(2, 1, True)])
        result = panoptic_quality([pred], [gt], 2, [0, 1])
        self.assertEqual(1.0, result.pq)

    def test_raster_mismatch(self) -> None:
        acc = PanopticAccumulator(2, [0])
        with self.assertRaises(ValueError):
            acc.add(PanopticMap(np.zeros((2, 2))), PanopticMap(np.zeros((3, 2))))


class TestVideoPanopticQuality(unittest.TestCase):
    """Tests for tube-level panoptic quality."""

    def setUp(self) -> None:
        left = np.array([[3, 3, 4, 4]] * 4)
        right = np.array([[4, 4, 3, 3]] * 4)
        segs = [Segment(3, 0, True), Segment(4, 0, True)]
        self.gt = [PanopticMap(left, segs), PanopticMap(left, segs)]
        # identities swap in the second frame
        self.pred = [PanopticMap(left, segs), PanopticMap(right, segs)]

    def test_identity_switch(self) -> None:
        result = video_panoptic_quality([self.pred], [self.gt], 1, [0], windows=(0, 1, 2))
        self.assertEqual(1.0, result.per_window[0])
        self.assertEqual(0.0, result.per_window[1])
        self.assertIsNone(result.per_window[2])
        self.assertEqual(0.5, result.vpq)

    def test_single_frame_window_is_dataset_pq(self) -> None:
        rng = np.random.default_rng(2)
        clips = [[random_pair(rng) for _ in range(3)] for _ in range(4)]
        preds = [[p for p, _ in clip] for clip in clips]
        gts = [[g for _, g in clip] for clip in clips]
        result = video_panoptic_quality(preds, gts, 3, [0, 1], windows=(0,))
        flat = panoptic_quality(
            [p for clip in preds for p in clip], [g for clip in gts for g in clip], 3, [0, 1]
        )
        self.assertEqual(flat.pq, result.vpq)

    def test_windows_against_oracle(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(50):
            # consistent ids across frames make tubes meaningful
            frames = [random_pair(rng) for _ in range(3)]
            table_g = frames[0][1].segments
            table_p = frames[0][0].segments
            preds = [PanopticMap(p.id_raster, table_p) for p, _ in frames]
            gts = [PanopticMap(g.id_raster, table_g) for _, g in frames]
            result = video_panoptic_quality([preds], [gts], 3, [0, 1], windows=(1,))
            tubes_p = [tube(preds[s : s + 2], table_p) for s in range(2)]
            tubes_g = [tube(gts[s : s + 2], table_g) for s in range(2)]
            expected = oracle_pq(tubes_p, tubes_g, 3)
            if expected is None:
                self.assertIsNone(result.vpq)
            else:
                assert result.vpq is not None
                self.assertAlmostEqual(expected, result.vpq, places=12)


class TestSemantic(unittest.TestCase):
    """Tests for mIoU."""

    def test_ignore_and_out_of_range(self) -> None:
        gt = np.array([[0, 0], [1, 255]])
        pred = np.array([[0, 1], [7, 0]])
        result = miou([pred], [gt], 2)
        self.assertEqual({0: 0.5, 1: 0.0}, result.per_class)
        self.assertEqual(0.25, result.miou)

    def test_absent_class_is_skipped(self) -> None:
        result = miou([np.zeros((2, 2))], [np.zeros((2, 2))], 3)
        self.assertEqual({0: 1.0}, result.per_class)
        self.assertEqual(1.0, result.miou)


class TestAveragePrecision(unittest.TestCase):
    """Tests for mask AP."""

    def test_interpolation(self) -> None:
        tp = np.array([True, False, True])
        self.assertAlmostEqual(56 / 101, interpolated_precision(tp, 3))
        self.assertEqual(0.0, interpolated_precision(np.zeros(0, dtype=bool), 2))
        with self.assertRaises(ValueError):
            interpolated_precision(tp, 0)

    def test_perfect_detections(self) -> None:
        a = np.zeros((4, 4), dtype=bool)
        a[:2] = True
        result = mask_ap([[ScoredMask(0.9, 0, a)]], [[(0, a)]], [0, 1])
        self.assertEqual(1.0, result.ap)
        self.assertEqual(1.0, result.ap50)
        self.assertEqual({0: 1.0}, result.per_class)

    def test_no_ground_truth(self) -> None:
        result = mask_ap([[]], [[]], [0])
        self.assertIsNone(result.ap)

    def test_against_oracle(self) -> None:
        rng = np.random.default_rng(4)
        for _ in range(50):
            preds: List[List[ScoredMask]] = []
            gts: List[List[Tuple[int, np.ndarray]]] = []
            for _ in range(3):
                gt = [(int(rng.integers(0, 2)), rng.random((5, 5)) < 0.4) for _ in range(3)]
                dets = []
                for c, m in gt:
                    noisy = m ^ (rng.random(m.shape) < 0.15)
                    if noisy.any():
                        dets.append(ScoredMask(float(rng.random()), c, noisy))
                dets.append(ScoredMask(float(rng.random()), 0, rng.random((5, 5)) < 0.4))
                preds.append(dets)
                gts.append([(c, m) for c, m in gt if m.any()])
            result = mask_ap(preds, gts, [0, 1])
            per_class: Dict[int, float] = {}
            for c in (0, 1):
                if any(cc == c for gt in gts for cc, _ in gt):
                    per_class[c] = float(
                        np.mean([oracle_ap(preds, gts, c, t) for t in np.linspace(0.5, 0.95, 10)])
                    )
            self.assertEqual(set(per_class), set(result.per_class))
            for c, value in per_class.items():
                self.assertAlmostEqual(value, result.per_class[c], places=12)


class TestInference(unittest.TestCase):
    """Tests for turning predictions into segmentations."""

    def prediction(self, labels: Sequence[int], mask_logits: Sequence[float]) -> Prediction:
        logits = np.full((len(labels), 3), -10.0)
        logits[np.arange(len(labels)), labels] = 10.0
        masks = np.array(mask_logits)[:, None, None] * np.ones((1, 2, 2))
        return Prediction(Tensor(logits), Tensor(masks))

    def test_highest_score_wins(self) -> None:
        pred = self.prediction([0, 1, 2], [10.0, 5.0, 10.0])
        pmap = panoptic_inference(pred, PostProcessConfig(), [0], (8, 8))
        self.assertEqual([Segment(1, 0, True)], pmap.segments)
        self.assertTrue(np.all(pmap.id_raster == 1))

    def test_query_ids(self) -> None:
        pred = self.prediction([2, 1, 2], [10.0, 5.0, 10.0])
        pmap = panoptic_inference(pred, PostProcessConfig(), [0], (8, 8), query_ids=True)
        # stuff segments use K + 1 + class
        self.assertEqual([Segment(5, 1, False)], pmap.segments)

    def test_score_at_threshold_kept(self) -> None:
        logits = np.array([[0.0, 0.0, -1e9]])
        pred = Prediction(Tensor(logits), Tensor(np.full((1, 2, 2), 10.0)))
        pmap = panoptic_inference(pred, PostProcessConfig(object_threshold=0.5), [0], (8, 8))
        self.assertEqual([Segment(1, 0, True)], pmap.segments)

    def test_no_object(self) -> None:
        pred = self.prediction([2, 2], [10.0, 10.0])
        pmap = panoptic_inference(pred, PostProcessConfig(), [0], (8, 8))
        self.assertEqual([], pmap.segments)
        self.assertTrue(np.all(pmap.id_raster == 0))

    def test_semantic(self) -> None:
        pred = self.prediction([0, 1], [-10.0, 10.0])
        np.testing.assert_array_equal(np.ones((8, 8)), semantic_inference(pred, (8, 8)))


class TestAssociation(unittest.TestCase):
    """Tests for query-slot association accuracy."""

    def test_slot_change(self) -> None:
        obj = np.zeros((4, 4), dtype=np.int64)
        obj[:2, :2] = 3
        gt = PanopticMap(obj, [Segment(3, 0, True)])
        on = obj == 3
        off = np.zeros_like(on)
        frames = [np.stack([on, off]), np.stack([on, off]), np.stack([off, on])]
        acc = AssociationAccumulator()
        acc.add_clip(frames, [gt, gt, gt])
        self.assertEqual(2, acc.total)
        self.assertEqual(0.5, acc.result())
        self.assertIsNone(AssociationAccumulator().result())
