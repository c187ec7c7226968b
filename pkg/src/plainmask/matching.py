# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .decoder import Prediction
from .model import LossWeights


class InfeasibleMatchError(Exception):
    """Error thrown when there are more segments than available queries."""

    pass


@dataclass
class MatchResult:
    """An injective assignment of ground-truth segments to queries."""

    pairs: List[Tuple[int, int]]
    """(query index, segment index) pairs, sorted by query index."""

    num_queries: int
    total_cost: float = 0.0

    @property
    def query_to_segment(self) -> np.ndarray:
        """Segment index of every query, -1 for no-object."""
        out = np.full(self.num_queries, -1, dtype=np.int64)
        for q, g in self.pairs:
            out[q] = g
        return out

    @property
    def unmatched_queries(self) -> List[int]:
        matched = {q for q, _ in self.pairs}
        return [q for q in range(self.num_queries) if q not in matched]


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Finds a minimum-cost assignment of every column to a distinct row.

    This is the shortest augmenting path formulation of the Hungarian
    method, run on the transposed matrix so that every segment gets a
    query. When several columns reach the same reduced cost, the first
    one in index order is taken.

    :param cost: Cost matrix [Q, G] with finite entries.

    :returns: The optimal assignment.

    :raises InfeasibleMatchError: If G > Q.
    """
    cost = np.asarray(cost, dtype=np.float64)
    nq, ng = cost.shape
    if ng > nq:
        raise InfeasibleMatchError(f"Cannot match {ng} segments to {nq} queries")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Matching costs must be finite")
    if ng == 0:
        return MatchResult([], nq, 0.0)

    a = cost.T  # rows: segments, columns: queries
    n, m = ng, nq
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row assigned to column j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, math.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = math.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    pairs = [(j - 1, int(p[j]) - 1) for j in range(1, m + 1) if p[j] != 0]
    total = float(sum(cost[q, g] for q, g in pairs))
    return MatchResult(sorted(pairs), nq, total)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def match_cost(
    pred: Prediction,
    gt_classes: np.ndarray,
    gt_masks: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """Pairwise matching costs between queries and ground-truth segments.

    ``cost[i, j] = w_cls * -P_i(c_j) + w_bce * BCE(M_i, m_j) + w_dice * Dice(M_i, m_j)``
    where ``P_i`` is the class softmax of query ``i``, BCE is averaged
    over pixels and Dice uses the configured smoothing.

    :param pred: Predictions of the Q queries.
    :param gt_classes: Class of every segment [G].
    :param gt_masks: Binary masks [G, H/4, W/4].
    :param weights: Loss weights.

    :returns: Cost matrix [Q, G].
    """
    logits = pred.class_logits.data.astype(np.float64)
    q = logits.shape[0]
    g = len(gt_classes)
    if g == 0:
        return np.zeros((q, 0))
    shifted = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(shifted)
    prob /= prob.sum(axis=1, keepdims=True)
    cost_cls = -prob[:, np.asarray(gt_classes, dtype=np.int64)]

    x = pred.mask_logits.data.astype(np.float64).reshape(q, -1)
    t = np.asarray(gt_masks, dtype=np.float64).reshape(g, -1)
    npix = x.shape[1]
    cost_bce = (_softplus(-x) @ t.T + _softplus(x) @ (1.0 - t).T) / npix

    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    smooth = weights.dice_smooth
    numer = 2.0 * (s @ t.T) + smooth
    denom = s.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + smooth
    cost_dice = 1.0 - numer / denom

    return (
        weights.class_weight * cost_cls
        + weights.bce_weight * cost_bce
        + weights.dice_weight * cost_dice
    )


def video_match(
    cost: np.ndarray,
    object_ids: Sequence[int],
    persistent: Dict[int, int],
) -> MatchResult:
    """Matches the segments of one frame, keeping earlier assignments.

    Objects already in ``persistent`` keep their query. Objects seen for
    the first time are matched with ``hungarian_match`` among the queries
    that no object of the clip has taken yet, and are added to
    ``persistent``.

    :param cost: Matching costs [Q, G] of this frame.
    :param object_ids: Stable object id of each of the G segments.
    :param persistent: The clip's object-to-query map, updated in place.

    :raises InfeasibleMatchError: If no free query is left for a new object.
    """
    cost = np.asarray(cost, dtype=np.float64)
    nq = cost.shape[0]
    pairs: List[Tuple[int, int]] = []
    new_segments: List[int] = []
    for g, obj in enumerate(object_ids):
        if obj in persistent:
            pairs.append((persistent[obj], g))
        else:
            new_segments.append(g)
    if new_segments:
        taken = set(persistent.values())
        free = [q for q in range(nq) if q not in taken]
        if len(new_segments) > len(free):
            raise InfeasibleMatchError(
                f"{len(new_segments)} new objects but only {len(free)} free queries"
            )
        sub = cost[np.ix_(free, new_segments)]
        for qi, gi in hungarian_match(sub).pairs:
            q, g = free[qi], new_segments[gi]
            persistent[int(object_ids[g])] = q
            pairs.append((q, g))
    pairs.sort()
    total = float(sum(cost[q, g] for q, g in pairs))
    return MatchResult(pairs, nq, total)
