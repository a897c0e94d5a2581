"""Evaluation indices: impulse-response fit, coverage and confidence-set size."""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .confidence import ConfidenceSet
from .core import ImpulseResponse
from .errors import EmptySet, ZeroTrueNorm

ArrayLike = Union[ImpulseResponse, np.ndarray]


@dataclass(frozen=True)
class RunMetrics:
    """The three indices of one estimator on one dataset."""
    fit: float
    coverage: Optional[float] = None
    set_size: Optional[float] = None
    estimator_tag: str = ""
    variant: str = ""

    @classmethod
    def evaluate(
        cls,
        true_h: ArrayLike,
        est_h: ArrayLike,
        confidence_set: Optional[ConfidenceSet] = None,
        estimator_tag: str = "",
        variant: str = "",
    ) -> 'RunMetrics':
        """Score a point estimate and, when given, its confidence set.

        Raises:
            EmptySet: If the confidence set has no members
            ZeroTrueNorm: If the true response is identically zero
        """
        fit = impulse_fit(true_h, est_h)
        if confidence_set is None:
            return cls(fit=fit, estimator_tag=estimator_tag, variant=variant)
        return cls(
            fit=fit,
            coverage=coverage_index(confidence_set, true_h),
            set_size=set_size_index(confidence_set),
            estimator_tag=estimator_tag,
            variant=variant,
        )


def _taps(h: ArrayLike) -> np.ndarray:
    return np.asarray(h.taps if isinstance(h, ImpulseResponse) else h, dtype=float)


def _members(confidence_set: Union[ConfidenceSet, np.ndarray]) -> np.ndarray:
    members = confidence_set.members if isinstance(confidence_set, ConfidenceSet) else confidence_set
    members = np.asarray(members, dtype=float)
    if members.size == 0:
        raise EmptySet("Confidence set has no members")
    return np.atleast_2d(members)


def _true_norm(true_h: np.ndarray) -> float:
    norm = float(np.linalg.norm(true_h))
    if norm == 0.0:
        raise ZeroTrueNorm("True impulse response has zero norm")
    return norm


def impulse_fit(true_h: ArrayLike, est_h: ArrayLike) -> float:
    """100 (1 - ||h - h_hat|| / ||h||); may be negative."""
    h, h_hat = _taps(true_h), _taps(est_h)
    if h.shape != h_hat.shape:
        raise ValueError(f"Length mismatch: {h.size} vs {h_hat.size}")
    return 100.0 * (1.0 - np.linalg.norm(h - h_hat) / _true_norm(h))


def coverage_index(confidence_set: Union[ConfidenceSet, np.ndarray], true_h: ArrayLike) -> float:
    """Minimum relative distance from the true response to any member."""
    members = _members(confidence_set)
    h = _taps(true_h)
    if members.shape[1] != h.size:
        raise ValueError(f"Length mismatch: members have {members.shape[1]} taps, h has {h.size}")
    return float(np.min(np.linalg.norm(members - h, axis=1)) / _true_norm(h))


def set_size_index(confidence_set: Union[ConfidenceSet, np.ndarray]) -> float:
    """Sum over taps of the member envelope width (max - min)."""
    members = _members(confidence_set)
    return float(np.sum(members.max(axis=0) - members.min(axis=0)))
