# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Panoptic post-processing and segmentation metrics.

All accumulators keep integer counts (plus IoU sums for PQ) and can be
merged, so that a dataset may be evaluated in independent shards.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decoder import Prediction
from .model import PostProcessConfig
from .numerics import upsample_array

IGNORE_LABEL = 255
_OFFSET = 1 << 20


@dataclass
class Segment:
    id: int
    category: int
    is_thing: bool


@dataclass
class PanopticMap:
    """A panoptic segmentation: an id raster and its segment table.

    Id 0 is void. Every other id of the raster has exactly one entry in
    ``segments``.
    """

    id_raster: np.ndarray
    segments: List[Segment] = field(default_factory=list)

    def segment(self, seg_id: int) -> Segment:
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(f"No segment {seg_id}")

    def is_valid(self) -> bool:
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids) or 0 in ids:
            return False
        present = set(int(i) for i in np.unique(self.id_raster)) - {0}
        return present <= set(ids)

    def semantic(self) -> np.ndarray:
        """Gets the class raster, void pixels set to IGNORE_LABEL."""
        out = np.full(self.id_raster.shape, IGNORE_LABEL, dtype=np.int64)
        for s in self.segments:
            out[self.id_raster == s.id] = s.category
        return out

    def masks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gets ids [S], classes [S] and binary masks [S, H, W] of the
        segments that cover at least one pixel."""
        segs = [s for s in self.segments if np.any(self.id_raster == s.id)]
        ids = np.array([s.id for s in segs], dtype=np.int64)
        classes = np.array([s.category for s in segs], dtype=np.int64)
        masks = np.stack([self.id_raster == s.id for s in segs]) if segs else (
            np.zeros((0,) + self.id_raster.shape, dtype=bool)
        )
        return ids, classes, masks


# Inference


def _class_probs(pred: Prediction) -> np.ndarray:
    logits = pred.class_logits.data.astype(np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mask_probabilities(pred: Prediction, image_size: Sequence[int]) -> np.ndarray:
    """Mask probabilities [K, H, W], bilinearly upsampled from H/4."""
    logits = pred.mask_logits.data.astype(np.float64)
    times = 0
    while logits.shape[-2] * 2**times < image_size[0]:
        times += 1
    logits = upsample_array(logits, times)
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def panoptic_inference(
    pred: Prediction,
    cfg: PostProcessConfig,
    thing_classes: Sequence[int],
    image_size: Sequence[int],
    query_ids: bool = False,
) -> PanopticMap:
    """Turns query predictions into a panoptic segmentation.

    Queries whose top class is a real class scoring at least the object
    threshold compete for pixels with ``score * mask probability``. A
    query keeps a segment if the pixels it wins and that are inside its
    own binarised mask cover at least ``overlap_threshold`` of that mask
    and ``min_area`` pixels. Stuff segments of one class are merged.

    :param query_ids: If true, a thing segment takes the id of its query
        slot plus one and a stuff segment the id ``K + 1 + class``, so
        that the ids of consecutive frames are consistent.
    """
    probs = _class_probs(pred)
    k, c1 = probs.shape
    num_classes = c1 - 1
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(k), labels]
    keep = np.nonzero((labels != num_classes) & (scores >= cfg.object_threshold))[0]
    h, w = int(image_size[0]), int(image_size[1])
    raster = np.zeros((h, w), dtype=np.int64)
    out = PanopticMap(raster)
    if len(keep) == 0:
        return out

    masks = mask_probabilities(pred, image_size)[keep]
    winner = np.argmax(scores[keep][:, None, None] * masks, axis=0)
    things = set(thing_classes)
    stuff_ids: Dict[int, int] = {}
    next_id = 1
    for i, q in enumerate(keep):
        category = int(labels[q])
        is_thing = category in things
        own = masks[i] >= cfg.mask_threshold
        won = winner == i
        mask = won & own
        original_area = int(own.sum())
        area = int(mask.sum())
        if original_area == 0 or area == 0:
            continue
        if area / original_area < cfg.overlap_threshold or area < cfg.min_area:
            continue
        if not is_thing and category in stuff_ids:
            raster[mask] = stuff_ids[category]
            continue
        if query_ids:
            seg_id = int(q) + 1 if is_thing else k + 1 + category
        else:
            seg_id = next_id
            next_id += 1
        if not is_thing:
            stuff_ids[category] = seg_id
        raster[mask] = seg_id
        out.segments.append(Segment(seg_id, category, is_thing))
    return out


def semantic_inference(pred: Prediction, image_size: Sequence[int]) -> np.ndarray:
    """Per-pixel class: argmax over classes of sum_q P_q(c) * sigmoid(M_q)."""
    probs = _class_probs(pred)[:, :-1]
    masks = mask_probabilities(pred, image_size)
    semseg = np.einsum("qc,qhw->chw", probs, masks)
    return semseg.argmax(axis=0)


@dataclass
class ScoredMask:
    score: float
    category: int
    mask: np.ndarray


def instance_inference(
    pred: Prediction,
    thing_classes: Sequence[int],
    image_size: Sequence[int],
    mask_threshold: float = 0.5,
) -> List[ScoredMask]:
    """Scored thing masks, one per query whose top real class is a thing.

    The score is the class probability times the mean mask probability
    inside the binarised mask.
    """
    probs = _class_probs(pred)[:, :-1]
    masks = mask_probabilities(pred, image_size)
    things = set(thing_classes)
    out = []
    for q in range(probs.shape[0]):
        category = int(probs[q].argmax())
        if category not in things:
            continue
        binary = masks[q] >= mask_threshold
        if not binary.any():
            continue
        score = float(probs[q, category] * masks[q][binary].mean())
        out.append(ScoredMask(score, category, binary))
    return out


# Panoptic quality


@dataclass
class PQStat:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def merge(self, other: "PQStat") -> "PQStat":
        return PQStat(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.iou_sum + other.iou_sum,
        )

    @property
    def is_empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0


@dataclass
class ClassPQ:
    pq: float
    sq: float
    rq: float


@dataclass
class PQResult:
    """Panoptic quality, averaged over the classes that occur.

    Averages are None when no class occurs.
    """

    pq: Optional[float]
    sq: Optional[float]
    rq: Optional[float]
    pq_things: Optional[float]
    pq_stuff: Optional[float]
    per_class: Dict[int, ClassPQ] = field(default_factory=dict)


def _average(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


class PanopticAccumulator(object):
    """Accumulates panoptic-quality statistics over a dataset."""

    def __init__(self, num_classes: int, thing_classes: Sequence[int]):
        self.num_classes = num_classes
        self.thing_classes = set(thing_classes)
        self.stats = [PQStat() for _ in range(num_classes)]

    def add(self, pred: PanopticMap, gt: PanopticMap) -> None:
        """Adds one image (or one tube).

        Segments match when they share a class and their IoU, computed
        without the pixels that are void in the ground truth, exceeds
        0.5. A predicted segment lying mostly on void is ignored.
        """
        if pred.id_raster.shape != gt.id_raster.shape:
            raise ValueError(
                f"Raster sizes differ: {pred.id_raster.shape} vs {gt.id_raster.shape}"
            )
        gt_r = gt.id_raster.astype(np.int64).reshape(-1)
        pr_r = pred.id_raster.astype(np.int64).reshape(-1)
        gt_area = dict(zip(*np.unique(gt_r, return_counts=True)))
        pr_area = dict(zip(*np.unique(pr_r, return_counts=True)))
        labels, counts = np.unique(gt_r * _OFFSET + pr_r, return_counts=True)
        inter: Dict[Tuple[int, int], int] = {}
        for label, n in zip(labels, counts):
            inter[(int(label // _OFFSET), int(label % _OFFSET))] = int(n)

        gt_segs = {s.id: s for s in gt.segments if gt_area.get(s.id, 0) > 0}
        pr_segs = {s.id: s for s in pred.segments if pr_area.get(s.id, 0) > 0}
        gt_matched, pr_matched = set(), set()
        for (g, p), n in inter.items():
            if g not in gt_segs or p not in pr_segs:
                continue
            if gt_segs[g].category != pr_segs[p].category:
                continue
            union = pr_area[p] + gt_area[g] - n - inter.get((0, p), 0)
            iou = n / union
            if iou > 0.5:
                st = self.stats[gt_segs[g].category]
                st.tp += 1
                st.iou_sum += iou
                gt_matched.add(g)
                pr_matched.add(p)
        for g, s in gt_segs.items():
            if g not in gt_matched:
                self.stats[s.category].fn += 1
        for p, s in pr_segs.items():
            if p in pr_matched:
                continue
            if inter.get((0, p), 0) / pr_area[p] > 0.5:
                continue
            self.stats[s.category].fp += 1

    def merge(self, other: "PanopticAccumulator") -> "PanopticAccumulator":
        out = PanopticAccumulator(self.num_classes, self.thing_classes)
        out.stats = [a.merge(b) for a, b in zip(self.stats, other.stats)]
        return out

    def result(self) -> PQResult:
        per_class: Dict[int, ClassPQ] = {}
        for c, st in enumerate(self.stats):
            if st.is_empty:
                continue
            denom = st.tp + 0.5 * st.fp + 0.5 * st.fn
            sq = st.iou_sum / st.tp if st.tp else 0.0
            rq = st.tp / denom
            per_class[c] = ClassPQ(st.iou_sum / denom, sq, rq)
        return PQResult(
            pq=_average([r.pq for r in per_class.values()]),
            sq=_average([r.sq for r in per_class.values()]),
            rq=_average([r.rq for r in per_class.values()]),
            pq_things=_average([r.pq for c, r in per_class.items() if c in self.thing_classes]),
            pq_stuff=_average([r.pq for c, r in per_class.items() if c not in self.thing_classes]),
            per_class=per_class,
        )


def panoptic_quality(
    preds: Sequence[PanopticMap],
    gts: Sequence[PanopticMap],
    num_classes: int,
    thing_classes: Sequence[int],
) -> PQResult:
    acc = PanopticAccumulator(num_classes, thing_classes)
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.result()


# Semantic segmentation


@dataclass
class MIoUResult:
    miou: Optional[float]
    per_class: Dict[int, float] = field(default_factory=dict)


class SemanticAccumulator(object):
    """Confusion matrix of ground-truth classes against predictions.

    Column ``num_classes`` counts predictions outside of the class range.
    """

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.confusion = np.zeros((num_classes, num_classes + 1), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ValueError(f"Raster sizes differ: {pred.shape} vs {gt.shape}")
        c = self.num_classes
        valid = (gt != self.ignore_label) & (gt >= 0) & (gt < c)
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        p = np.where((p >= 0) & (p < c), p, c)
        self.confusion += np.bincount(g * (c + 1) + p, minlength=c * (c + 1)).reshape(c, c + 1)

    def merge(self, other: "SemanticAccumulator") -> "SemanticAccumulator":
        out = SemanticAccumulator(self.num_classes, self.ignore_label)
        out.confusion = self.confusion + other.confusion
        return out

    def result(self) -> MIoUResult:
        c = self.num_classes
        per_class = {}
        for k in range(c):
            inter = int(self.confusion[k, k])
            union = int(self.confusion[k, :].sum() + self.confusion[:, k].sum()) - inter
            if union > 0:
                per_class[k] = inter / union
        return MIoUResult(_average(list(per_class.values())), per_class)


def miou(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    num_classes: int,
    ignore_label: int = IGNORE_LABEL,
) -> MIoUResult:
    acc = SemanticAccumulator(num_classes, ignore_label)
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.result()


# Instance segmentation

AP_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class APResult:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    per_class: Dict[int, float] = field(default_factory=dict)


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.logical_or(a, b).sum())
    return int(np.logical_and(a, b).sum()) / union if union else 0.0


def interpolated_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated average precision of a ranked TP sequence."""
    if num_gt == 0:
        raise ValueError("Average precision needs ground truth")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = [precision[i] if i < len(precision) else 0.0 for i in idx]
    return float(np.mean(values))


def _ranked_hits(
    preds: Sequence[Sequence[ScoredMask]],
    gts: Sequence[Sequence[Tuple[int, np.ndarray]]],
    category: int,
    threshold: float,
) -> Tuple[np.ndarray, int]:
    dets = []  # (score, image, index)
    hits = {}
    num_gt = 0
    for img, (pred, gt) in enumerate(zip(preds, gts)):
        gmasks = [m for c, m in gt if c == category]
        num_gt += len(gmasks)
        own = sorted(
            [(d.score, i, d) for i, d in enumerate(pred) if d.category == category],
            key=lambda x: (-x[0], x[1]),
        )
        taken = [False] * len(gmasks)
        for score, i, d in own:
            best, best_iou = -1, threshold
            for j, gm in enumerate(gmasks):
                if taken[j]:
                    continue
                iou = _mask_iou(d.mask, gm)
                if iou >= best_iou and (best < 0 or iou > best_iou):
                    best, best_iou = j, iou
            if best >= 0:
                taken[best] = True
            hits[(img, i)] = best >= 0
            dets.append((score, img, i))
    dets.sort(key=lambda x: (-x[0], x[1], x[2]))
    return np.array([hits[(img, i)] for _, img, i in dets], dtype=bool), num_gt


def mask_ap(
    preds: Sequence[Sequence[ScoredMask]],
    gts: Sequence[Sequence[Tuple[int, np.ndarray]]],
    thing_classes: Sequence[int],
    thresholds: Sequence[float] = tuple(AP_THRESHOLDS),
) -> APResult:
    """COCO-style mask average precision.

    Within an image, detections are matched greedily in score order to
    the unmatched ground truth of highest IoU, provided it reaches the
    threshold. Precision is interpolated at 101 recall points and
    averaged over thresholds, then over the classes that have ground
    truth.

    :param preds: Scored masks of every image.
    :param gts: (class, mask) ground-truth instances of every image.
    """
    table: Dict[int, Dict[float, float]] = {}
    for c in thing_classes:
        for t in thresholds:
            hits, num_gt = _ranked_hits(preds, gts, c, float(t))
            if num_gt == 0:
                break
            table.setdefault(c, {})[float(t)] = interpolated_precision(hits, num_gt)
    if not table:
        return APResult(None, None, None)
    per_class = {c: float(np.mean(list(v.values()))) for c, v in table.items()}

    def at(t: float) -> Optional[float]:
        vals = [v[k] for v in table.values() for k in v if abs(k - t) < 1e-9]
        return _average(vals)

    return APResult(_average(list(per_class.values())), at(0.5), at(0.75), per_class)


# Video


@dataclass
class VPQResult:
    vpq: Optional[float]
    per_window: Dict[int, Optional[float]] = field(default_factory=dict)


def concat_frames(frames: Sequence[PanopticMap]) -> PanopticMap:
    """Joins frames side by side into one tube map; ids must be consistent."""
    raster = np.concatenate([f.id_raster for f in frames], axis=1)
    seen: Dict[int, Segment] = {}
    for f in frames:
        for s in f.segments:
            seen.setdefault(s.id, s)
    return PanopticMap(raster, list(seen.values()))


def video_panoptic_quality(
    preds: Sequence[Sequence[PanopticMap]],
    gts: Sequence[Sequence[PanopticMap]],
    num_classes: int,
    thing_classes: Sequence[int],
    windows: Sequence[int] = (0, 1, 2),
) -> VPQResult:
    """Panoptic quality of spatio-temporal tubes, averaged over windows.

    For window ``k``, every run of ``k + 1`` consecutive frames of every
    clip forms one tube; clips shorter than ``k + 1`` frames contribute
    nothing to that window. Tube statistics are accumulated over the
    whole dataset before the PQ formula is applied.
    """
    per_window: Dict[int, Optional[float]] = {}
    for k in windows:
        acc = PanopticAccumulator(num_classes, thing_classes)
        tubes = 0
        for pclip, gclip in zip(preds, gts):
            for s in range(len(gclip) - k):
                acc.add(concat_frames(pclip[s : s + k + 1]), concat_frames(gclip[s : s + k + 1]))
                tubes += 1
        per_window[k] = acc.result().pq if tubes else None
    values = [v for v in per_window.values() if v is not None]
    return VPQResult(_average(values), per_window)


class AssociationAccumulator(object):
    """Counts how often a thing keeps the query slot it started with.

    For every ground-truth thing, the slot whose binarised mask has the
    highest IoU with the object in its first frame is its reference
    slot; every later frame where the object is visible is a hit when
    the same slot has the highest IoU again.
    """

    def __init__(self) -> None:
        self.hits = 0
        self.total = 0

    def add_clip(self, slot_masks: Sequence[np.ndarray], gts: Sequence[PanopticMap]) -> None:
        """:param slot_masks: Binary masks [K, H, W] of every frame."""
        reference: Dict[int, int] = {}
        for masks, gt in zip(slot_masks, gts):
            for s in gt.segments:
                if not s.is_thing:
                    continue
                obj = gt.id_raster == s.id
                if not obj.any():
                    continue
                inter = np.logical_and(masks, obj[None]).sum(axis=(1, 2))
                union = np.logical_or(masks, obj[None]).sum(axis=(1, 2))
                slot = int(np.argmax(inter / np.maximum(union, 1)))
                if s.id not in reference:
                    reference[s.id] = slot
                    continue
                self.total += 1
                self.hits += int(reference[s.id] == slot)

    def merge(self, other: "AssociationAccumulator") -> "AssociationAccumulator":
        out = AssociationAccumulator()
        out.hits = self.hits + other.hits
        out.total = self.total + other.total
        return out

    def result(self) -> Optional[float]:
        return self.hits / self.total if self.total else None
