"""Single-user sub-problem with update cost ``c``: threshold policies, their
closed-form average cost, the Whittle index and the optimal threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative slack used when comparing costs/indices that are equal in exact
# arithmetic (e.g. c sitting exactly on an index value).
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class SubProblem:
    p: float
    c: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"arrival probability must lie in (0, 1], got {self.p}")
        if self.c < 0:
            raise ValueError("update cost must be nonnegative")


@dataclass(frozen=True)
class ThresholdPolicy:
    """Update iff a packet is present and the age is at least ``threshold``."""

    threshold: int

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")

    def action(self, x: int, lam: int) -> int:
        return int(bool(lam) and x >= self.threshold)


def _check_p(p: float) -> None:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"arrival probability must lie in (0, 1], got {p}")


def threshold_average_cost(threshold: float, p: float, c: float = 0.0) -> float:
    """Long-run average of (next age + c * update) under a threshold policy.

    Accepts real thresholds >= 1 so the convexity of the cost curve can be
    probed between integers.
    """
    _check_p(p)
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    x = float(threshold)
    num = x * x / 2 + (1 / p - 0.5) * x + 1 / p**2 - 1 / p + c
    return num / (x + (1 - p) / p)


@dataclass
class SteadyState:
    probs: np.ndarray  # xi_1..xi_K
    tail: float  # mass beyond K


def threshold_steady_state(threshold: int, p: float, truncate_at: int) -> SteadyState:
    """Stationary law of the post-action age (values ``1..K``) under a threshold policy."""
    _check_p(p)
    if truncate_at < threshold:
        raise ValueError("truncation must be at least the threshold")
    base = 1.0 / (threshold + (1 - p) / p)
    ages = np.arange(1, truncate_at + 1)
    xi = np.where(ages <= threshold, base, base * (1 - p) ** np.maximum(ages - threshold, 0))
    # mass beyond K of the geometric tail: base * sum_{j>K-X} (1-p)^j
    tail = base * (1 - p) ** (truncate_at - threshold + 1) / p if p < 1 else 0.0
    return SteadyState(xi, float(tail))


def whittle_index(x: int, lam: int, p: float) -> float:
    if x < 1:
        raise ValueError("age must be >= 1")
    if not lam:
        return 0.0
    return x * x / 2 - x / 2 + x / p


def optimal_threshold(p: float, c: float) -> int:
    """The ``x`` with ``I(x-1, 1) <= c < I(x, 1)`` where ``I(0, 1) = 0``.

    A cost sitting on an index value is resolved toward the larger threshold
    (idle on ties).
    """
    _check_p(p)
    if c < 0:
        raise ValueError("update cost must be nonnegative")
    # I(x,1) = x^2/2 + (1/p - 1/2) x is increasing; start from the real root
    b = 1 / p - 0.5
    x = max(1, int(math.floor(-b + math.sqrt(b * b + 2 * c))))
    while x > 1 and not _at_or_above(c, whittle_index(x - 1, 1, p)):
        x -= 1
    while _at_or_above(c, whittle_index(x, 1, p)):
        x += 1
    return x


def _at_or_above(c: float, index: float) -> bool:
    return c >= index - TIE_RTOL * max(1.0, abs(index))


def brute_force_threshold(p: float, c: float, max_threshold: int = 200) -> int:
    """Argmin of the closed-form cost over ``1..max_threshold``; ties go to the larger."""
    best_x, best = 1, threshold_average_cost(1, p, c)
    for x in range(2, max_threshold + 1):
        v = threshold_average_cost(x, p, c)
        if v <= best + TIE_RTOL * max(1.0, abs(best)):
            best_x, best = x, min(v, best)
    return best_x


@dataclass
class IndexabilityReport:
    indexable: bool
    thresholds: list[int]


def verify_indexability(p: float, c_grid) -> IndexabilityReport:
    grid = [float(c) for c in c_grid]
    if any(c < 0 for c in grid) or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("cost grid must be nonnegative and ascending")
    thresholds = [optimal_threshold(p, c) for c in grid]
    ok = all(b >= a for a, b in zip(thresholds, thresholds[1:]))
    return IndexabilityReport(ok, thresholds)
