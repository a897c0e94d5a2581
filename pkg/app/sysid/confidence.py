"""Sampled confidence sets of impulse responses."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ConfidenceSet:
    """Retained impulse-response samples with their density scores.

    Scores are log-densities; thresholding a log-density is equivalent to
    thresholding the density itself.
    """
    members: np.ndarray
    scores: np.ndarray
    alpha: float
    threshold: float
    raw_count: int
    kept_indices: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'members', np.atleast_2d(np.asarray(self.members, dtype=float)))
        object.__setattr__(self, 'scores', np.asarray(self.scores, dtype=float))

    def __len__(self) -> int:
        return self.members.shape[0] if self.members.size else 0

    @property
    def lower(self) -> np.ndarray:
        """Tap-wise minimum over members."""
        return self.members.min(axis=0)

    @property
    def upper(self) -> np.ndarray:
        """Tap-wise maximum over members."""
        return self.members.max(axis=0)


def retained_count(alpha: float, N: int) -> int:
    """Number of samples kept at level alpha: ceil(alpha * N)."""
    # round first so that 0.95 * 7200 gives 6840, not 6841
    return int(math.ceil(round(alpha * N, 9)))


def select_highest_density(
    responses: np.ndarray,
    scores: np.ndarray,
    alpha: float,
) -> ConfidenceSet:
    """Keep the ceil(alpha * N) samples with the highest scores.

    Ties at the threshold are broken by sample index.

    Args:
        responses: N x n matrix of impulse responses
        scores: Length-N log-density scores
        alpha: Level in (0, 1)

    Returns:
        ConfidenceSet whose members are ordered by sample index
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    responses = np.atleast_2d(np.asarray(responses, dtype=float))
    scores = np.asarray(scores, dtype=float)
    N = scores.size
    if N < 1 or responses.shape[0] != N:
        raise ValueError(f"Need one score per sample, got {N} scores for {responses.shape[0]} samples")

    keep = retained_count(alpha, N)
    order = np.lexsort((np.arange(N), -scores))
    kept = np.sort(order[:keep])
    threshold = float(scores[order[keep - 1]])
    return ConfidenceSet(
        members=responses[kept],
        scores=scores[kept],
        alpha=alpha,
        threshold=threshold,
        raw_count=N,
        kept_indices=kept,
    )
