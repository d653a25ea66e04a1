"""Per-sample fidelity decisions and the running level threshold.

The deviation measure U = |prediction - threshold| / std counts how many
predictive standard deviations separate a corrected cheap-model value from
the active threshold; below the acceptance cutoff the expensive model is
consulted instead. Subset-dependent modes aim U at the level's running
quantile (the threshold the level will actually use), subset-independent
mode always aims at the fixed failure threshold.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from scipy.special import ndtr

__all__ = [
    "SF_SUBSET_DEPENDENT",
    "MF_SUBSET_INDEPENDENT",
    "MF_SUBSET_DEPENDENT",
    "ACCEPT_LF",
    "CALL_HF",
    "LearningConfig",
    "QuantileTracker",
    "u_value",
    "decide_fidelity",
    "sign_probability",
]

SF_SUBSET_DEPENDENT = "single_fidelity_subset_dependent"
MF_SUBSET_INDEPENDENT = "multifidelity_subset_independent"
MF_SUBSET_DEPENDENT = "multifidelity_subset_dependent"
_MODES = (SF_SUBSET_DEPENDENT, MF_SUBSET_INDEPENDENT, MF_SUBSET_DEPENDENT)

ACCEPT_LF = "accept_lf"
CALL_HF = "call_hf"


@dataclass(frozen=True)
class LearningConfig:
    """Mode, acceptance cutoff on U, and the degenerate-std floor."""

    mode: str = MF_SUBSET_DEPENDENT
    u_threshold: float = 2.0
    sigma_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"unknown learning mode {self.mode!r}; choose from {_MODES}")
        if not (self.u_threshold > 0):
            raise ValueError("u_threshold must be > 0")
        if not (self.sigma_floor > 0):
            raise ValueError("sigma_floor must be > 0")

    @property
    def subset_dependent(self) -> bool:
        return self.mode != MF_SUBSET_INDEPENDENT


class QuantileTracker:
    """Running (1 - p0) quantile of every prediction made so far in a level.

    The quantile is the m-th largest of the n stored values with
    m = ceil(p0 * n), kept on a two-heap split so insertion costs O(log n).
    Below ceil(1/p0) values the threshold reports +inf (warm-up): too few
    values to place the quantile, so early samples lean on the cheap model.
    """

    def __init__(self, p0: float):
        if not (0.0 < p0 < 1.0):
            raise ValueError("p0 must lie in (0, 1)")
        self.p0 = p0
        self._min_count = math.ceil(1.0 / p0)
        self._upper: list[float] = []  # min-heap of the m largest
        self._lower: list[float] = []  # max-heap (negated) of the rest
        self._values: list[float] = []

    @property
    def count(self) -> int:
        return len(self._values)

    def insert(self, value: float) -> None:
        value = float(value)
        self._values.append(value)
        if self._upper and value >= self._upper[0]:
            heapq.heappush(self._upper, value)
        else:
            heapq.heappush(self._lower, -value)
        m = math.ceil(self.p0 * len(self._values))
        while len(self._upper) < m:
            heapq.heappush(self._upper, -heapq.heappop(self._lower))
        while len(self._upper) > m:
            heapq.heappush(self._lower, -heapq.heappop(self._upper))

    def threshold(self) -> float:
        if len(self._values) < self._min_count:
            return math.inf
        return self._upper[0]

    def values(self) -> list[float]:
        """Insertion-ordered archive (used for checkpointing)."""
        return list(self._values)

    @classmethod
    def from_values(cls, p0: float, values) -> "QuantileTracker":
        t = cls(p0)
        for v in values:
            t.insert(v)
        return t


def u_value(
    config: LearningConfig,
    mean: float,
    std: float,
    level_threshold: float,
    final_threshold: float,
    is_final_level: bool,
) -> float:
    """Standard-normal distance between the prediction and the active threshold.

    Subset-dependent modes target the running level threshold until the final
    level, where the fixed failure threshold takes over; subset-independent
    mode always targets the fixed threshold. A predictive std under the floor
    means the prediction is effectively exact: U = +inf away from the
    threshold (certain sign) and 0 exactly on it (force the expensive model).
    """
    if std < 0:
        raise ValueError("std must be >= 0")
    if config.subset_dependent and not is_final_level:
        threshold = level_threshold
    else:
        threshold = final_threshold
    distance = abs(mean - threshold)
    if std < config.sigma_floor:
        return math.inf if distance > 0 else 0.0
    return distance / std


def decide_fidelity(u: float, config: LearningConfig) -> str:
    """ACCEPT_LF iff u >= the cutoff (boundary inclusive)."""
    return ACCEPT_LF if u >= config.u_threshold else CALL_HF


def sign_probability(u: float) -> float:
    """Probability the prediction sits on the correct side of the threshold."""
    if u < 0:
        raise ValueError("u must be >= 0")
    return float(ndtr(u))
