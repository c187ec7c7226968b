# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import Prediction
from .matching import MatchResult
from .model import LossWeights
from .numerics import Tensor, bce_with_logits, cross_entropy, reshape, sigmoid


@dataclass
class LossBreakdown:
    """Total loss and its unweighted terms, summed over prediction sets."""

    total: Tensor
    class_loss: float = 0.0
    bce_loss: float = 0.0
    dice_loss: float = 0.0
    num_sets: int = 0


def dice_loss(probs: Tensor, targets: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Mean Dice loss of mask probabilities [M, P] against binary targets.

    ``1 - (2 * sum(p * t) + smooth) / (sum(p) + sum(t) + smooth)`` per
    mask, averaged over the M masks.
    """
    t = np.asarray(targets, dtype=probs.dtype)
    numer = (probs * t).sum(axis=1) * 2.0 + smooth
    denom = probs.sum(axis=1) + t.sum(axis=1) + smooth
    return (1.0 - numer / denom).mean()


def segmentation_loss(
    predictions: Sequence[Prediction],
    gt_classes: np.ndarray,
    gt_masks: np.ndarray,
    match: MatchResult,
    weights: LossWeights,
    num_classes: int,
) -> LossBreakdown:
    """Mask-classification loss, summed over deep-supervision sets.

    Every prediction set is supervised with the same assignment.
    Unmatched queries are trained towards the no-object class, whose
    cross-entropy weight is ``weights.no_object_weight``. Mask terms are
    averaged over matched pairs; with no ground-truth segment, only the
    classification term remains.

    :param predictions: Intermediate predictions, then the final one.
    :param gt_classes: Class of every segment [G].
    :param gt_masks: Binary masks [G, H/4, W/4].
    :param match: Query-to-segment assignment.
    :param weights: Loss weights.
    :param num_classes: Number of real classes C.
    """
    k = match.num_queries
    targets = np.full(k, num_classes, dtype=np.int64)
    for q, g in match.pairs:
        targets[q] = int(gt_classes[g])
    class_weights = np.ones(num_classes + 1)
    class_weights[num_classes] = weights.no_object_weight
    queries = np.array([q for q, _ in match.pairs], dtype=np.int64)
    segments = np.array([g for _, g in match.pairs], dtype=np.int64)

    total = None
    out = LossBreakdown(total=Tensor(0.0))
    for pred in predictions:
        l_cls = cross_entropy(pred.class_logits, targets, class_weights)
        term = l_cls * weights.class_weight
        out.class_loss += float(l_cls.data)
        if len(queries) > 0:
            logits = pred.mask_logits[queries]
            m = len(queries)
            flat = reshape(logits, (m, -1))
            t = np.asarray(gt_masks, dtype=logits.dtype)[segments].reshape(m, -1)
            l_bce = bce_with_logits(flat, t).mean()
            l_dice = dice_loss(sigmoid(flat), t, weights.dice_smooth)
            term = term + l_bce * weights.bce_weight + l_dice * weights.dice_weight
            out.bce_loss += float(l_bce.data)
            out.dice_loss += float(l_dice.data)
        total = term if total is None else total + term
        out.num_sets += 1
    if total is not None:
        out.total = total
    return out
