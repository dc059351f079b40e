"""Free-energy gate that routes poses to the fast or the adaptive path."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidPoseError
from .pose import flatten

DEFAULT_THRESHOLD = 800.0


class Direction(str, Enum):
    OOD_BELOW = "below"
    OOD_ABOVE = "above"


@dataclass(frozen=True)
class EnergyDecision:
    score: float
    is_ood: bool
    threshold_used: float
    direction: Direction

    @property
    def free_energy(self) -> float:
        return -self.score


def logsumexp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    top = values.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(values - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def energy_score(pose) -> float | np.ndarray:
    """Log-sum-exp over the flattened pose; the free energy is its negation.

    Accepts a ``(j, 3)`` pose or a ``(B, j, 3)`` batch.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise InvalidPoseError("energy_score needs finite coordinates")
    score = logsumexp(flatten(pose))
    return float(score) if np.ndim(score) == 0 else score


def classify(score: float, threshold: float = DEFAULT_THRESHOLD,
             direction: Direction | str = Direction.OOD_BELOW) -> EnergyDecision:
    direction = Direction(direction)
    if direction is Direction.OOD_BELOW:
        is_ood = score < threshold
    else:
        is_ood = score > threshold
    return EnergyDecision(float(score), bool(is_ood), float(threshold), direction)


def random_selector(rate: float, seed: int):
    """Endless seeded Bernoulli(rate) stream of selection flags."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    while True:
        for u in rng.random(256):
            yield bool(u < rate)
