# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ConfigurationError
from .layers import Linear, Module
from .numerics import Tensor


@dataclass
class TrackState:
    """Temporal state carried from one frame to the next.

    Track identity is positional: query slot ``i`` always carries track
    ``track_ids[i]``.
    """

    num_queries: int
    prev_queries: Optional[Tensor] = None
    """Output queries [K, D] of the previous frame; None at frame 0."""

    track_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frame_index: int = 0

    def __post_init__(self) -> None:
        if self.track_ids.size == 0:
            self.track_ids = np.arange(self.num_queries)

    @property
    def is_first_frame(self) -> bool:
        return self.prev_queries is None

    def advance(self, queries: Tensor) -> "TrackState":
        """Gets the state for the next frame."""
        if queries.shape[0] != self.num_queries:
            raise ConfigurationError(
                f"Got {queries.shape[0]} output queries, the track state has {self.num_queries}"
            )
        return TrackState(
            self.num_queries, queries, self.track_ids.copy(), self.frame_index + 1
        )


class QueryPropagation(Module):
    """Linear projection of the previous frame's queries (zero at start)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(dim, dim, rng, zero_init=True)

    def __call__(self, state: TrackState, learned: Tensor) -> Tensor:
        return propagate_queries(state, learned, self.proj)


def propagate_queries(state: TrackState, learned: Tensor, proj: Linear) -> Tensor:
    """Fuses the previous frame's queries with the learned queries.

    :param state: The track state; at the first frame fusion is bypassed
        and ``learned`` is returned as is.
    :param learned: The learned queries [K, D].
    :param proj: Projection applied to the previous queries.

    :returns: ``proj(Q_prev) + learned``.

    :raises ConfigurationError: If the number of queries differ.
    """
    if state.prev_queries is None:
        return learned
    if state.prev_queries.shape != learned.shape:
        raise ConfigurationError(
            f"Previous queries {state.prev_queries.shape} "
            f"do not match learned queries {learned.shape}"
        )
    return proj(state.prev_queries) + learned
