"""Discrete-time Monte-Carlo engine on the true (untruncated) age dynamics.

Per slot: draw arrivals, ask the policy, apply the age recursion, then add
``sum_i X_i(t+1)`` to the running total (the total age that results from the
slot's decision).  Arrivals come from child stream 0 of the run seed and any
policy randomness from child stream 1, so a (policy, config) pair always
reproduces the same metrics.
"""

from __future__ import annotations

import csv
import io
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from aoisched import _kernels as K
from aoisched.core import (
    EMPTY_BUFFER,
    ArrivalModel,
    BufferedState,
    NetworkState,
    RandomSource,
    derive_seed,
)
from aoisched.schedulers import SchedulerPolicy

CHUNK = 1 << 16


class SimulationError(RuntimeError):
    def __init__(self, slot: int, message: str):
        super().__init__(f"slot {slot}: {message}")
        self.slot = slot


@dataclass(frozen=True)
class SimConfig:
    model: ArrivalModel
    horizon: int
    seed: int = 0
    warmup: int = 0
    buffered: bool = False
    initial_ages: tuple[int, ...] | None = None
    trace_every: int = 0
    engine: str = "auto"  # "auto" | "python"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least one slot")
        if not 0 <= self.warmup < self.horizon:
            raise ValueError("warmup must lie in [0, horizon)")
        if self.engine not in ("auto", "python"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.initial_ages is not None:
            if len(self.initial_ages) != self.model.user_count or min(self.initial_ages) < 1:
                raise ValueError("initial ages must be positive, one per user")

    @property
    def n(self) -> int:
        return self.model.user_count

    def start_ages(self) -> tuple[int, ...]:
        if self.initial_ages is not None:
            return tuple(int(a) for a in self.initial_ages)
        return tuple(range(1, self.n + 1))


@dataclass(frozen=True)
class SimMetrics:
    avg_total_age: float
    per_user_avg_age: tuple[float, ...]
    update_counts: tuple[int, ...]
    slots: int
    trace: tuple[int, ...] | None = None

    def average_cost(self, update_cost: float) -> float:
        """Average age plus ``update_cost`` per delivered update."""
        return self.avg_total_age + update_cost * sum(self.update_counts) / self.slots


def run(policy: SchedulerPolicy, cfg: SimConfig) -> SimMetrics:
    """Simulate ``policy`` for ``cfg.horizon`` slots (buffered if ``cfg.buffered``)."""
    if policy.num_users != cfg.n:
        raise ValueError(f"policy serves {policy.num_users} users but the model has {cfg.n}")
    root = RandomSource(cfg.seed)
    arrival_rng, policy_rng = root.spawn(0), root.spawn(1)
    policy.reset(policy_rng)
    args = policy.kernel() if cfg.engine == "auto" else None
    if args is not None:
        return _run_kernel(policy, args, cfg, arrival_rng, policy_rng)
    return _run_python(policy, cfg, arrival_rng)


def run_buffered(policy: SchedulerPolicy, cfg: SimConfig) -> SimMetrics:
    """Base station keeps the newest packet per user.

    Serving user ``d`` delivers the buffered packet, so ``X_d(t+1) = Y_d(t) + 1``;
    serving a user whose buffer was never filled is a no-op.
    """
    if not cfg.buffered:
        raise ValueError("run_buffered needs a config with buffered=True")
    return run(policy, cfg)


def _run_kernel(policy, args, cfg, arrival_rng, policy_rng) -> SimMetrics:
    n = cfg.n
    ages = np.array(cfg.start_ages(), dtype=np.int64)
    bufs = np.full(n, EMPTY_BUFFER, dtype=np.int64)
    acc_total = np.zeros(1, dtype=np.int64)
    acc_user = np.zeros(n, dtype=np.int64)
    acc_upd = np.zeros(n, dtype=np.int64)
    n_trace = (cfg.horizon + cfg.trace_every - 1) // cfg.trace_every if cfg.trace_every else 1
    trace = np.zeros(n_trace, dtype=np.int64)
    empty_u = np.zeros(0)
    for start in range(0, cfg.horizon, CHUNK):
        size = min(CHUNK, cfg.horizon - start)
        block = arrival_rng.arrival_block(cfg.model, size)
        u = policy_rng.uniforms(size) if args.uses_uniforms else empty_u
        K.run_chunk(
            args.kind, block, u, ages, bufs, cfg.buffered, start, cfg.warmup,
            args.iparams, args.fparams, args.table, args.values, args.state,
            acc_total, acc_user, acc_upd, trace, cfg.trace_every,
        )
    if args.kind == K.MDP_ONLINE and not np.all(np.isfinite(args.values)):
        raise SimulationError(cfg.horizon - 1, "online values became non-finite")
    return _metrics(cfg, int(acc_total[0]), acc_user.tolist(), acc_upd.tolist(),
                    trace.tolist() if cfg.trace_every else None)


def _metrics(cfg, total, per_user, updates, trace) -> SimMetrics:
    slots = cfg.horizon - cfg.warmup
    return SimMetrics(
        avg_total_age=total / slots,
        per_user_avg_age=tuple(s / slots for s in per_user),
        update_counts=tuple(int(u) for u in updates),
        slots=slots,
        trace=tuple(trace) if trace is not None else None,
    )


def _iter_slots(policy, cfg, arrival_rng) -> Iterable[tuple[int, object, int, list[int], int]]:
    """Python reference loop; yields ``(t, observation, decision, next_ages, served)``."""
    n = cfg.n
    ages = list(cfg.start_ages())
    bufs = [EMPTY_BUFFER] * n
    decide = policy.decide
    for start in range(0, cfg.horizon, CHUNK):
        size = min(CHUNK, cfg.horizon - start)
        rows = arrival_rng.arrival_block(cfg.model, size).tolist()
        for k, lam in enumerate(rows):
            t = start + k
            if cfg.buffered:
                bufs = [0 if l else (b + 1 if b < EMPTY_BUFFER else b) for l, b in zip(lam, bufs)]
                obs = BufferedState(tuple(ages), tuple(bufs))
            else:
                obs = NetworkState(tuple(ages), tuple(lam))
            try:
                d = decide(obs, t)
            except Exception as exc:
                raise SimulationError(t, f"policy raised {exc!r}") from exc
            if not isinstance(d, (int, np.integer)) or not 0 <= d <= n:
                raise SimulationError(t, f"invalid decision {d!r}")
            served = -1
            if d:
                if cfg.buffered:
                    if bufs[d - 1] < EMPTY_BUFFER:
                        served = d - 1
                elif lam[d - 1]:
                    served = d - 1
            for i in range(n):
                if i == served:
                    ages[i] = bufs[i] + 1 if cfg.buffered else 1
                else:
                    ages[i] += 1
            policy.observe_outcome(obs, d, tuple(ages))
            yield t, obs, int(d), ages, served


def _run_python(policy, cfg, arrival_rng) -> SimMetrics:
    n = cfg.n
    total = 0
    per_user = [0] * n
    updates = [0] * n
    trace = [] if cfg.trace_every else None
    for t, _obs, _d, ages, served in _iter_slots(policy, cfg, arrival_rng):
        s = sum(ages)
        if t >= cfg.warmup:
            total += s
            for i in range(n):
                per_user[i] += ages[i]
            if served >= 0:
                updates[served] += 1
        if trace is not None and t % cfg.trace_every == 0:
            trace.append(s)
    return _metrics(cfg, total, per_user, updates, trace)


def simulate_trajectory(policy: SchedulerPolicy, cfg: SimConfig) -> list[tuple[object, int]]:
    """Every ``(observation, decision)`` pair of a run (Python loop; keep horizons small)."""
    root = RandomSource(cfg.seed)
    arrival_rng, policy_rng = root.spawn(0), root.spawn(1)
    policy.reset(policy_rng)
    return [(obs, d) for _t, obs, d, _a, _s in _iter_slots(policy, cfg, arrival_rng)]


def decision_agreement(
    primary: SchedulerPolicy, shadow: SchedulerPolicy, cfg: SimConfig, start: int = 0
) -> float:
    """Fraction of slots ``t >= start`` in which ``shadow`` would make the same
    decision as ``primary`` on the trajectory driven by ``primary``."""
    root = RandomSource(cfg.seed)
    arrival_rng, policy_rng = root.spawn(0), root.spawn(1)
    primary.reset(policy_rng)
    shadow.reset(root.spawn(2))
    agree = counted = 0
    for t, obs, d, _a, _s in _iter_slots(primary, cfg, arrival_rng):
        ds = shadow.decide(obs, t)
        if t >= start:
            counted += 1
            agree += ds == d
    return agree / counted


# ------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SchedulerSpec:
    """Named factory building a policy for one probability vector."""

    name: str
    factory: Callable[[tuple[float, ...]], SchedulerPolicy]
    buffered: bool = False


@dataclass
class SweepRow:
    policy: str
    probs: tuple[float, ...]
    horizon: int
    seed: int
    buffered: bool
    metrics: SimMetrics | None = None
    error: str | None = None

    @property
    def n(self) -> int:
        return len(self.probs)


def _run_cell(spec: SchedulerSpec, probs, horizon, seed, warmup) -> SweepRow:
    try:
        policy = spec.factory(tuple(probs))
        cfg = SimConfig(ArrivalModel(tuple(probs)), horizon, seed, warmup, spec.buffered)
        metrics = run(policy, cfg)
        return SweepRow(spec.name, tuple(probs), horizon, seed, spec.buffered, metrics)
    except Exception as exc:  # one bad cell must not abort the sweep
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return SweepRow(spec.name, tuple(probs), horizon, seed, spec.buffered, error=msg)


def sweep(
    schedulers: Sequence[SchedulerSpec],
    grid: Sequence[Sequence[float]],
    horizon: int,
    seed: int = 0,
    warmup: int = 0,
    jobs: int = 1,
) -> list[SweepRow]:
    """One row per (grid point, scheduler), grid-major.

    All schedulers at the same grid point see the same arrival sequence
    (seed derived from the master seed and the grid index).
    """
    if not grid:
        raise ValueError("empty grid")
    tasks = []
    for gi, probs in enumerate(grid):
        cell_seed = derive_seed(seed, gi)
        for spec in schedulers:
            tasks.append((spec, tuple(float(p) for p in probs), horizon, cell_seed, warmup))
    if jobs <= 1:
        return [_run_cell(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_cell, *t) for t in tasks]
        return [f.result() for f in futures]


def csv_header(max_n: int) -> list[str]:
    return (
        ["policy", "N"]
        + [f"p_{i}" for i in range(1, max_n + 1)]
        + ["horizon", "seed", "buffered", "avg_total_age"]
        + [f"age_{i}" for i in range(1, max_n + 1)]
        + [f"updates_{i}" for i in range(1, max_n + 1)]
        + ["error"]
    )


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    """Fixed column order; cells beyond a row's N and failed metrics are blank."""
    max_n = max(r.n for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(max_n))
    for r in rows:
        pad = [""] * (max_n - r.n)
        probs = [repr(p) for p in r.probs] + pad
        if r.metrics is not None:
            m = r.metrics
            age = [repr(m.avg_total_age)]
            users = [repr(a) for a in m.per_user_avg_age] + pad
            upd = [str(u) for u in m.update_counts] + pad
        else:
            age, users, upd = [""], [""] * max_n, [""] * max_n
        w.writerow([r.policy, r.n, *probs, r.horizon, r.seed, int(r.buffered), *age, *users, *upd, r.error or ""])
    return buf.getvalue()
