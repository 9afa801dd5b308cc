"""Domain types, arrival sampling and the age recursion shared by every module.

Ages are plain Python ints (unbounded); truncation lives in :mod:`aoisched.mdp`.
A decision is an ``int`` in ``{0, 1, .., N}`` where ``0`` means the base station
stays idle and ``i`` updates user ``i`` (1-based).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

IDLE = 0


@dataclass(frozen=True)
class ArrivalModel:
    """Independent Bernoulli packet arrivals, one probability per user."""

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.probs)
        if len(probs) < 1:
            raise ValueError("need at least one user")
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"arrival probability {p} outside [0, 1]")
        object.__setattr__(self, "probs", probs)

    @property
    def user_count(self) -> int:
        return len(self.probs)

    def outcome_probabilities(self) -> np.ndarray:
        """Probability of every arrival vector, indexed by ``sum(lam_i << i)``."""
        n = self.user_count
        out = np.ones(2**n)
        for code in range(2**n):
            for i, p in enumerate(self.probs):
                out[code] *= p if (code >> i) & 1 else 1.0 - p
        return out


class NetworkState(NamedTuple):
    """Pre-decision observation: per-user ages and arrival indicators."""

    ages: tuple[int, ...]
    arrivals: tuple[int, ...]

    @property
    def user_count(self) -> int:
        return len(self.ages)


class BufferedState(NamedTuple):
    """Observation for the buffered base station.

    ``buffer_ages[i]`` is the age at the base station of the newest packet held
    for user ``i`` (0 on a fresh arrival); :data:`EMPTY_BUFFER` marks a buffer
    that has never been filled.
    """

    ages: tuple[int, ...]
    buffer_ages: tuple[int, ...]

    @property
    def arrivals(self) -> tuple[int, ...]:
        return tuple(int(y == 0) for y in self.buffer_ages)

    @property
    def user_count(self) -> int:
        return len(self.ages)


EMPTY_BUFFER = 2**62


def reference_state(n: int) -> NetworkState:
    """The state ``(1, 2, .., N, 1, .., 1)`` used as the relative-value anchor."""
    return NetworkState(tuple(range(1, n + 1)), (1,) * n)


def validate_state(state: NetworkState) -> None:
    if len(state.ages) != len(state.arrivals) or not state.ages:
        raise ValueError("ages and arrivals must have the same positive length")
    if any(a < 1 for a in state.ages):
        raise ValueError(f"ages must be >= 1, got {state.ages}")
    if any(lam not in (0, 1) for lam in state.arrivals):
        raise ValueError(f"arrivals must be 0/1, got {state.arrivals}")


def check_decision(d: int, n: int) -> int:
    if not isinstance(d, (int, np.integer)) or not 0 <= d <= n:
        raise ValueError(f"decision {d!r} outside 0..{n}")
    return int(d)


@dataclass
class RandomSource:
    """Seeded Philox stream; ``spawn`` derives independent child streams.

    The counter-based generator makes streams derived from the same seed and
    key bit-identical across runs and worker processes.
    """

    seed: int
    key: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(self.key))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *key: int) -> "RandomSource":
        return RandomSource(self.seed, tuple(self.key) + tuple(int(k) for k in key))

    def uniforms(self, n: int) -> np.ndarray:
        return self.generator.random(n)

    def arrival_block(self, model: ArrivalModel, slots: int) -> np.ndarray:
        """``(slots, N)`` uint8 block of arrival indicators."""
        u = self.generator.random((slots, model.user_count))
        return (u < np.asarray(model.probs)).astype(np.uint8)


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 63-bit seed for a sub-experiment identified by ``key``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def sample_arrivals(model: ArrivalModel, rng: RandomSource) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.arrival_block(model, 1)[0])


def age_step(
    state: NetworkState, d: int, next_arrivals: Sequence[int]
) -> NetworkState:
    """Advance one slot: user ``d`` resets to age 1 only if it had an arrival."""
    n = len(state.ages)
    d = check_decision(d, n)
    if len(next_arrivals) != n:
        raise ValueError("arrival vector has wrong length")
    ages = tuple(
        1 if (i + 1 == d and state.arrivals[i]) else x + 1
        for i, x in enumerate(state.ages)
    )
    return NetworkState(ages, tuple(int(v) for v in next_arrivals))


def immediate_cost(state: NetworkState, d: int) -> int:
    """Total age in the next slot: ``sum(x_i + 1) - x_d * lam_d`` (``x_0 = 0``)."""
    cost = sum(state.ages) + len(state.ages)
    if d:
        cost -= state.ages[d - 1] * state.arrivals[d - 1]
    return cost
