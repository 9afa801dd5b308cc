"""Scheduling policies behind one interface consumed by the simulator.

Offline: structural MDP table lookup, Whittle-index rule, single-user threshold.
Online: the post-action stochastic RVIA learner and the running-rate index.
Baselines: max-age-with-arrival, uniform random arrival, round robin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from aoisched import _kernels as K
from aoisched.core import RandomSource, check_decision
from aoisched.mdp import BufferedStateSpace, PolicyTable, TruncatedStateSpace, truncated_step
from aoisched.whittle import whittle_index


@dataclass
class KernelArgs:
    kind: int
    iparams: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    fparams: np.ndarray = field(default_factory=lambda: np.zeros(1))
    table: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(1))
    state: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    uses_uniforms: bool = False


class SchedulerPolicy:
    """``decide(observation, t) -> int`` with ``0`` idle and ``i`` user ``i``.

    ``reset`` is called by the simulator before every run. Learners may mutate
    internal state inside ``decide``; ``observe_outcome`` is a hook for
    policies that want the post-step observation and is a no-op by default.
    """

    name = "policy"

    def __init__(self, num_users: int):
        self.num_users = num_users

    def reset(self, rng: RandomSource | None = None) -> None:
        pass

    def decide(self, observation, t: int) -> int:
        raise NotImplementedError

    def observe_outcome(self, observation, decision: int, next_observation) -> None:
        pass

    def kernel(self) -> KernelArgs | None:
        """Arguments for the compiled simulator loop, or ``None`` to force the
        Python loop."""
        return None

    @property
    def label(self) -> str:
        return self.name


# ----------------------------------------------------------------- offline


class AlwaysIdle(SchedulerPolicy):
    name = "always_idle"

    def decide(self, observation, t):
        return 0

    def kernel(self):
        return KernelArgs(K.IDLE)


class ThresholdScheduler(SchedulerPolicy):
    """Single-user threshold policy: update iff arrival and age >= threshold."""

    name = "threshold"

    def __init__(self, threshold: int):
        super().__init__(1)
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.threshold = int(threshold)

    def decide(self, observation, t):
        return int(bool(observation.arrivals[0]) and observation.ages[0] >= self.threshold)

    def kernel(self):
        return KernelArgs(K.THRESHOLD, iparams=np.array([self.threshold], dtype=np.int64))

    @property
    def label(self):
        return f"threshold(X={self.threshold})"


def _argmax_positive(scores: Sequence[float]) -> int:
    # first maximum wins; all-zero scores mean idle
    d, best = 0, 0.0
    for i, v in enumerate(scores):
        if v > best:
            d, best = i + 1, v
    return d


def index_decide(observation, probs: Sequence[float]) -> int:
    """Serve the user with the largest Whittle index; idle when no packet is present."""
    return _argmax_positive(
        [whittle_index(x, lam, p) for x, lam, p in zip(observation.ages, observation.arrivals, probs)]
    )


class IndexPolicy(SchedulerPolicy):
    name = "index"

    def __init__(self, probs: Sequence[float]):
        super().__init__(len(probs))
        if any(not 0 < p <= 1 for p in probs):
            raise ValueError("index policy needs arrival probabilities in (0, 1]")
        self.probs = tuple(float(p) for p in probs)

    def decide(self, observation, t):
        return index_decide(observation, self.probs)

    def kernel(self):
        return KernelArgs(K.INDEX, fparams=np.array(self.probs))


class VirtualAgeTracker:
    """Ages capped at ``m`` and advanced with the truncated recursion."""

    def __init__(self, m: int):
        self.m = m
        self.virtual_ages: tuple[int, ...] | None = None

    def reset(self) -> None:
        self.virtual_ages = None

    def sync(self, real_ages: Sequence[int]) -> tuple[int, ...]:
        expected = tuple(min(a, self.m) for a in real_ages)
        if self.virtual_ages is None:
            self.virtual_ages = expected
        elif self.virtual_ages != expected:
            raise RuntimeError(
                f"virtual ages {self.virtual_ages} out of sync with real ages {tuple(real_ages)}; "
                "call reset() before reusing the policy on a new trajectory"
            )
        return self.virtual_ages

    def advance(self, d: int, arrivals: Sequence[int]) -> None:
        self.virtual_ages = truncated_step(self.virtual_ages, d, arrivals, self.m)


def structural_mdp_decide(
    policy_table: PolicyTable, tracker: VirtualAgeTracker, observation
) -> int:
    """Look the decision up at the virtual ages, then advance the tracker."""
    x = tracker.sync(observation.ages)
    d = int(policy_table.actions[policy_table.space.ordinal(x, observation.arrivals)])
    tracker.advance(d, observation.arrivals)
    return d


class StructuralMDPPolicy(SchedulerPolicy):
    name = "structural_mdp"

    def __init__(self, table: PolicyTable):
        if isinstance(table.space, BufferedStateSpace):
            raise TypeError("use BufferedMDPPolicy for buffered tables")
        super().__init__(table.space.n)
        self.table = table
        self.tracker = VirtualAgeTracker(table.space.m)

    def reset(self, rng=None):
        self.tracker.reset()

    def decide(self, observation, t):
        return structural_mdp_decide(self.table, self.tracker, observation)

    def kernel(self):
        return KernelArgs(
            K.TABLE, iparams=np.array([self.table.space.m], dtype=np.int64), table=self.table.actions
        )

    @property
    def label(self):
        return f"structural_mdp(m={self.table.space.m})"


class BufferedMDPPolicy(SchedulerPolicy):
    """Table policy over (ages, buffered-packet ages), both capped at ``m``."""

    name = "buffered_mdp"

    def __init__(self, table: PolicyTable):
        if not isinstance(table.space, BufferedStateSpace):
            raise TypeError("buffered policy needs a BufferedStateSpace table")
        super().__init__(table.space.n)
        self.table = table

    def decide(self, observation, t):
        m = self.table.space.m
        x = tuple(min(a, m) for a in observation.ages)
        y = tuple(min(b, m) for b in observation.buffer_ages)
        return int(self.table.actions[self.table.space.ordinal(x, y)])

    def kernel(self):
        return KernelArgs(
            K.BUFFERED_TABLE,
            iparams=np.array([self.table.space.m], dtype=np.int64),
            table=self.table.actions,
        )

    @property
    def label(self):
        return f"buffered_mdp(m={self.table.space.m})"


# ------------------------------------------------------------------ online


class StepSchedule:
    """``gamma(t) = a / t`` with ``gamma(0) = a``."""

    def __init__(self, a: float = 0.01):
        if a <= 0:
            raise ValueError("step-size scale must be positive")
        self.a = float(a)

    def __call__(self, t: int) -> float:
        return self.a if t == 0 else self.a / t

    def __repr__(self):
        return f"{self.a:g}/t"


@dataclass
class PostActionState:
    ages: tuple[int, ...]
    arrivals: tuple[int, ...]


class OnlineValueStore:
    """Post-action values over the truncated space plus the learner's slot counter.

    ``counters`` holds ``[slots seen, arrival code of the current post-action
    state]`` so the compiled loop and the Python path share one state.
    """

    def __init__(self, space: TruncatedStateSpace, schedule: StepSchedule):
        self.space = space
        self.schedule = schedule
        self.values = np.zeros(space.size)
        self.reference = space.reference
        self.counters = np.zeros(2, dtype=np.int64)
        self.reset()

    def reset(self) -> None:
        self.values[:] = 0.0
        self.counters[0] = 0
        self.counters[1] = 2**self.space.n - 1  # reference arrivals (1, .., 1)

    @property
    def t(self) -> int:
        return int(self.counters[0])

    def to_csv(self) -> str:
        lines = ["ordinal,value"]
        lines.extend(f"{s},{v!r}" for s, v in enumerate(self.values.tolist()))
        lines.append(f"# t={self.t} lam={int(self.counters[1])}")
        return "\n".join(lines) + "\n"

    def load_csv(self, text: str) -> None:
        rows = text.strip().splitlines()
        if rows[0].strip() != "ordinal,value":
            raise ValueError("value snapshot must start with 'ordinal,value'")
        vals = np.full(self.space.size, np.nan)
        for line in rows[1:]:
            if line.startswith("#"):
                meta = dict(kv.split("=") for kv in line[1:].split())
                self.counters[0] = int(meta["t"])
                self.counters[1] = int(meta["lam"])
                continue
            s, v = line.split(",")
            vals[int(s)] = float(v)
        if not np.all(np.isfinite(vals)):
            raise ValueError("value snapshot does not cover every state")
        self.values[:] = vals


def mdp_online_decide_and_learn(
    store: OnlineValueStore, post_state: PostActionState, arrivals: Sequence[int]
) -> tuple[int, PostActionState]:
    """One slot of the post-action stochastic RVIA.

    Chooses ``argmin_d C((x~, Lam), d) + V~(next post state)`` (smallest ``d``
    on ties), moves ``V~(s~)`` toward that cost-to-go minus ``V~(0)`` with step
    ``gamma(t)`` and returns the decision and the next post-action state.
    """
    space = store.space
    m, n = space.m, space.n
    x = post_state.ages
    base = sum(x) + n
    best_q = best_d = best_next = None
    for d in range(n + 1):
        nxt = truncated_step(x, d, arrivals, m)
        cost = base - (x[d - 1] * arrivals[d - 1] if d else 0)
        q = cost + store.values[space.ordinal(nxt, arrivals)]
        if best_q is None or q < best_q:
            best_q, best_d, best_next = q, d, nxt
    v = best_q - store.values[store.reference]
    if not np.isfinite(v):
        raise FloatingPointError("online value update produced a non-finite value")
    cur = space.ordinal(x, post_state.arrivals)
    gamma = store.schedule(store.t)
    store.values[cur] = (1.0 - gamma) * store.values[cur] + gamma * v
    store.counters[0] += 1
    store.counters[1] = space.ctx_code(arrivals)
    return best_d, PostActionState(best_next, tuple(arrivals))


class MDPOnlinePolicy(SchedulerPolicy):
    """Learns post-action relative values along the sample path.

    The post-action ages entering slot ``t`` equal the real ages capped at
    ``m``, so they are read off the observation; the post-action arrivals are
    the previous slot's arrivals (all ones before the first slot).
    """

    name = "mdp_online"

    def __init__(self, n: int, m: int = 100, gamma: float = 0.01):
        super().__init__(n)
        self.space = TruncatedStateSpace(n, m)
        self.store = OnlineValueStore(self.space, StepSchedule(gamma))

    def reset(self, rng=None):
        self.store.reset()

    @property
    def post_arrivals(self) -> tuple[int, ...]:
        code = int(self.store.counters[1])
        return tuple((code >> i) & 1 for i in range(self.num_users))

    def decide(self, observation, t):
        m = self.space.m
        post = PostActionState(tuple(min(a, m) for a in observation.ages), self.post_arrivals)
        d, _ = mdp_online_decide_and_learn(self.store, post, tuple(observation.arrivals))
        return d

    def kernel(self):
        return KernelArgs(
            K.MDP_ONLINE,
            iparams=np.array([self.space.m, self.space.reference], dtype=np.int64),
            fparams=np.array([self.store.schedule.a]),
            values=self.store.values,
            state=self.store.counters,
        )

    @property
    def label(self):
        return f"mdp_online(m={self.space.m},gamma={self.store.schedule!r})"


class RateEstimator:
    """Running arrival-rate estimates ``p_i(t) = (sum_{tau<=t} Lam_i) / (t + 1)``.

    ``counts[0]`` is the number of slots observed, ``counts[1:]`` the per-user
    arrival totals. Before the first observation every estimate is 1.
    """

    def __init__(self, n: int):
        self.n = n
        self.counts = np.zeros(n + 1, dtype=np.int64)

    def reset(self) -> None:
        self.counts[:] = 0

    def update(self, arrivals: Sequence[int]) -> None:
        self.counts[0] += 1
        self.counts[1:] += np.asarray(arrivals, dtype=np.int64)

    def estimates(self) -> tuple[float, ...]:
        slots = int(self.counts[0])
        if slots == 0:
            return (1.0,) * self.n
        return tuple(int(c) / slots for c in self.counts[1:])


class FixedRates:
    """Estimator stand-in that always reports the given probabilities."""

    def __init__(self, probs: Sequence[float]):
        self.probs = tuple(float(p) for p in probs)

    def update(self, arrivals) -> None:
        pass

    def estimates(self) -> tuple[float, ...]:
        return self.probs


def index_online_decide(estimators, observation, t: int | None = None) -> int:
    """Index rule with the current rate estimates (already updated with ``Lam(t)``).

    A zero estimate can only coexist with ``lam = 0``, whose index is 0.
    """
    probs = estimators.estimates()
    return _argmax_positive(
        [
            whittle_index(x, 1, p) if lam else 0.0
            for x, lam, p in zip(observation.ages, observation.arrivals, probs)
        ]
    )


class IndexOnlinePolicy(SchedulerPolicy):
    name = "index_online"

    def __init__(self, n: int):
        super().__init__(n)
        self.estimator = RateEstimator(n)

    def reset(self, rng=None):
        self.estimator.reset()

    def decide(self, observation, t):
        self.estimator.update(observation.arrivals)
        return index_online_decide(self.estimator, observation, t)

    def kernel(self):
        return KernelArgs(K.INDEX_ONLINE, state=self.estimator.counts)


# --------------------------------------------------------------- baselines

BASELINES = ("max_age_arrival", "random_arrival", "round_robin")


def baseline_decide(kind: str, observation, rng=None, pointer: list[int] | None = None) -> int:
    """Comparison rules; all of them only ever serve users holding a packet.

    ``max_age_arrival``: argmax of ``x_i * lam_i`` (smallest id on ties).
    ``random_arrival``: uniform over users with a packet, from one uniform
    draw ``rng.random()`` per call.
    ``round_robin``: cyclic scan starting at ``pointer[0]`` (0-based),
    skipping users without a packet; the pointer moves past the served user.
    """
    lam = observation.arrivals
    if kind == "max_age_arrival":
        return _argmax_positive([x * l for x, l in zip(observation.ages, lam)])
    if kind == "random_arrival":
        u = rng.random()
        present = [i for i, l in enumerate(lam) if l]
        if not present:
            return 0
        return present[int(u * len(present))] + 1
    if kind == "round_robin":
        n = len(lam)
        start = pointer[0]
        for j in range(n):
            i = (start + j) % n
            if lam[i]:
                pointer[0] = (i + 1) % n
                return i + 1
        return 0
    raise ValueError(f"unknown baseline {kind!r}")


class BaselinePolicy(SchedulerPolicy):
    def __init__(self, kind: str, n: int):
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
        super().__init__(n)
        self.kind = kind
        self.pointer = np.zeros(1, dtype=np.int64)
        self._rng = None

    @property
    def name(self):
        return self.kind

    def reset(self, rng=None):
        self.pointer[0] = 0
        self._rng = rng.generator if rng is not None else np.random.default_rng(0)

    def decide(self, observation, t):
        if self.kind == "round_robin":
            ptr = [int(self.pointer[0])]
            d = baseline_decide(self.kind, observation, pointer=ptr)
            self.pointer[0] = ptr[0]
            return d
        return baseline_decide(self.kind, observation, rng=self._rng)

    def kernel(self):
        kind = {"max_age_arrival": K.MAX_AGE, "random_arrival": K.RANDOM_ARRIVAL, "round_robin": K.ROUND_ROBIN}
        return KernelArgs(kind[self.kind], state=self.pointer, uses_uniforms=self.kind == "random_arrival")


class FunctionPolicy(SchedulerPolicy):
    """Wrap a plain ``f(observation, t) -> int``; always runs in the Python loop."""

    def __init__(self, n: int, fn: Callable, name: str = "custom"):
        super().__init__(n)
        self.fn = fn
        self.name = name

    def decide(self, observation, t):
        return check_decision(self.fn(observation, t), self.num_users)
