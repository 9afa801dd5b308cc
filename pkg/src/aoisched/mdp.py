"""Truncated finite-state MDP: state enumeration, relative value iteration and
the switch-exploiting structural variant that yields an offline policy table.

States are stored densely. The ordinal of ``(x, ctx)`` is
``ctx_code * m**N + sum((x_i - 1) * m**(i-1))`` where ``ctx`` is the arrival
vector (no-buffer model, ``ctx_code = sum(lam_i << (i-1))``) or the vector of
buffered-packet ages (buffered model, mixed radix ``m + 1``).  User 1 is the
least significant age digit, so for any fixed ``(x_{-i}, ctx)`` an ascending
ordinal scan visits ``x_i`` in increasing order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numba
import numpy as np
import scipy.sparse as sp

from aoisched.core import ArrivalModel

# Relative slack under which two Q-values count as tied; ties go to the
# smallest action index (idle first).
TIE_RTOL = 1e-12


class NonFiniteValueError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TruncatedStateSpace:
    """All ``(x, lam)`` with ``x in {1..m}^N`` and ``lam in {0,1}^N``."""

    n: int
    m: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one user")
        if self.m <= self.n:
            raise ValueError(
                f"truncation m={self.m} must exceed the number of users N={self.n} (m > N)"
            )

    @property
    def n_ages(self) -> int:
        return self.m**self.n

    @property
    def n_ctx(self) -> int:
        return 2**self.n

    @property
    def size(self) -> int:
        return self.n_ages * self.n_ctx

    @property
    def ctx_radix(self) -> int:
        return 2

    def age_code(self, x: Sequence[int]) -> int:
        code = 0
        for i in reversed(range(self.n)):
            xi = int(x[i])
            if not 1 <= xi <= self.m:
                raise ValueError(f"age {xi} outside 1..{self.m}")
            code = code * self.m + (xi - 1)
        return code

    def ctx_code(self, ctx: Sequence[int]) -> int:
        code = 0
        for i in reversed(range(self.n)):
            code = code * self.ctx_radix + int(ctx[i])
        return code

    def ordinal(self, x: Sequence[int], ctx: Sequence[int]) -> int:
        return self.ctx_code(ctx) * self.n_ages + self.age_code(x)

    def state(self, ordinal: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if not 0 <= ordinal < self.size:
            raise IndexError(ordinal)
        ctx_code, age_code = divmod(int(ordinal), self.n_ages)
        x, ctx = [], []
        for _ in range(self.n):
            age_code, r = divmod(age_code, self.m)
            x.append(r + 1)
            ctx_code, c = divmod(ctx_code, self.ctx_radix)
            ctx.append(c)
        return tuple(x), tuple(ctx)

    @property
    def reference(self) -> int:
        return self.ordinal(range(1, self.n + 1), (1,) * self.n)

    def ages_table(self) -> np.ndarray:
        """``(m**N, N)`` array of ages for every age code."""
        codes = np.arange(self.n_ages)
        cols = [(codes // self.m**i) % self.m + 1 for i in range(self.n)]
        return np.stack(cols, axis=1).astype(np.int64)

    def ctx_table(self) -> np.ndarray:
        codes = np.arange(self.n_ctx)
        r = self.ctx_radix
        cols = [(codes // r**i) % r for i in range(self.n)]
        return np.stack(cols, axis=1).astype(np.int64)

    def strides(self) -> np.ndarray:
        return np.array([self.m**i for i in range(self.n)], dtype=np.int64)


@dataclass(frozen=True)
class BufferedStateSpace(TruncatedStateSpace):
    """Ages ``x in {1..m}^N`` and buffered-packet ages ``y in {0..m}^N``.

    ``y_i = m`` also stands for an empty buffer.  The reference state is
    ``x = (1, .., N)`` with every buffer holding a fresh packet (``y = 0``).
    """

    @property
    def n_ctx(self) -> int:
        return (self.m + 1) ** self.n

    @property
    def ctx_radix(self) -> int:
        return self.m + 1

    @property
    def reference(self) -> int:
        return self.ordinal(range(1, self.n + 1), (0,) * self.n)


def enumerate_states(n: int, m: int) -> TruncatedStateSpace:
    return TruncatedStateSpace(n, m)


@dataclass
class ValueTable:
    values: np.ndarray
    reference: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class PolicyTable:
    actions: np.ndarray
    space: TruncatedStateSpace

    def __post_init__(self) -> None:
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.shape != (self.space.size,):
            raise ValueError("policy table does not match the state space")
        if self.actions.min(initial=0) < 0 or self.actions.max(initial=0) > self.space.n:
            raise ValueError("policy action outside 0..N")

    def action(self, x: Sequence[int], ctx: Sequence[int]) -> int:
        return int(self.actions[self.space.ordinal(x, ctx)])

    def to_csv(self) -> str:
        lines = ["ordinal,action"]
        lines.extend(f"{s},{a}" for s, a in enumerate(self.actions.tolist()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, space: TruncatedStateSpace) -> "PolicyTable":
        rows = text.strip().splitlines()
        if not rows or rows[0].strip() != "ordinal,action":
            raise ValueError("policy CSV must start with the header 'ordinal,action'")
        actions = np.full(space.size, -1, dtype=np.int64)
        for line in rows[1:]:
            s, a = line.split(",")
            actions[int(s)] = int(a)
        if (actions < 0).any():
            raise ValueError("policy CSV does not cover every state")
        return cls(actions, space)


def truncated_step(
    x: Sequence[int], d: int, arrivals: Sequence[int], m: int
) -> tuple[int, ...]:
    """Virtual-age update ``[x_i + 1]^+_m``, resetting the served user on arrival."""
    return tuple(
        1 if (i + 1 == d and arrivals[i]) else min(xi + 1, m)
        for i, xi in enumerate(x)
    )


def _truncated_cost(x: Sequence[int], lam: Sequence[int], d: int) -> int:
    c = sum(x) + len(x)
    if d:
        c -= x[d - 1] * lam[d - 1]
    return c


def expected_next_value(
    vt: ValueTable,
    x: Sequence[int],
    lam: Sequence[int],
    d: int,
    model: ArrivalModel,
    space: TruncatedStateSpace,
) -> float:
    """``E[V(s')]`` by explicit enumeration of the ``2**N`` next arrival vectors."""
    nxt = truncated_step(x, d, lam, space.m)
    total = 0.0
    for lam_next in product((0, 1), repeat=space.n):
        prob = 1.0
        for p, l in zip(model.probs, lam_next):
            prob *= p if l else 1.0 - p
        if prob:
            total += prob * vt.values[space.ordinal(nxt, lam_next)]
    return total


# --------------------------------------------------------------------------
# Dense transition structure shared by the sweeps.
#
# Every model here has the product form: the context (arrivals or buffer ages)
# evolves independently of the action, while next ages are a deterministic
# function of (state, action).  Hence E[V(s')] = W[ctx(s), x'(s, d)] with
# W = P_ctx @ V reshaped to (n_ctx, n_ages).


@dataclass
class _Structure:
    space: TruncatedStateSpace
    cost: np.ndarray  # (S, N+1)
    next_idx: np.ndarray  # (S, N+1) flat index into W
    ctx_matrix: sp.csr_matrix  # (n_ctx, n_ctx)
    reference: int
    _cache: dict = field(default_factory=dict, repr=False)

    def continuation(self, values: np.ndarray) -> np.ndarray:
        v2 = values.reshape(self.space.n_ctx, self.space.n_ages)
        return np.asarray(self.ctx_matrix @ v2).ravel()

    def q_values(self, values: np.ndarray) -> np.ndarray:
        w = self.continuation(values)
        return self.cost + w[self.next_idx]


def _tie_argmin(q: np.ndarray) -> np.ndarray:
    qmin = q.min(axis=1, keepdims=True)
    slack = TIE_RTOL * np.maximum(1.0, np.abs(qmin))
    return np.argmax(q <= qmin + slack, axis=1)


def build_structure(space: TruncatedStateSpace, model: ArrivalModel) -> _Structure:
    if model.user_count != space.n:
        raise ValueError("arrival model and state space disagree on N")
    n, m = space.n, space.m
    ages = space.ages_table()  # (A, N)
    ctx = space.ctx_table()  # (C, N)
    n_a, n_c = space.n_ages, space.n_ctx
    strides = space.strides()
    buffered = isinstance(space, BufferedStateSpace)

    # broadcast to (C, A, N)
    x = np.broadcast_to(ages[None, :, :], (n_c, n_a, n))
    c = np.broadcast_to(ctx[:, None, :], (n_c, n_a, n))
    base_next = np.minimum(x + 1, m)
    cost = np.empty((n_c, n_a, n + 1))
    nxt = np.empty((n_c, n_a, n + 1), dtype=np.int64)
    total = x.sum(axis=2) + n
    cost[:, :, 0] = total
    nxt[:, :, 0] = ((base_next - 1) * strides).sum(axis=2)
    for i in range(n):
        xi, ci = x[:, :, i], c[:, :, i]
        if buffered:
            gain = xi - ci
            served = np.minimum(ci + 1, m)
        else:
            gain = xi * ci
            served = np.where(ci == 1, 1, base_next[:, :, i])
        cost[:, :, i + 1] = total - gain
        nxt[:, :, i + 1] = nxt[:, :, 0] + (served - base_next[:, :, i]) * strides[i]
    ctx_codes = np.arange(n_c)[:, None, None]
    next_idx = ctx_codes * n_a + nxt

    if buffered:
        ctx_matrix = _buffer_ctx_matrix(model, m)
    else:
        row = model.outcome_probabilities()
        ctx_matrix = sp.csr_matrix(np.tile(row, (n_c, 1)))
    return _Structure(
        space,
        cost.reshape(-1, n + 1),
        next_idx.reshape(-1, n + 1),
        ctx_matrix,
        space.reference,
    )


def _buffer_ctx_matrix(model: ArrivalModel, m: int) -> sp.csr_matrix:
    # y_i -> 0 w.p. p_i, else min(y_i + 1, m); users independent.
    mats = []
    for p in model.probs:
        a = np.zeros((m + 1, m + 1))
        a[:, 0] += p
        for y in range(m + 1):
            a[y, min(y + 1, m)] += 1.0 - p
        mats.append(sp.csr_matrix(a))
    # user 1 is least significant -> kron(user N, ..., user 1)
    out = mats[-1]
    for a in reversed(mats[:-1]):
        out = sp.kron(out, a, format="csr")
    return sp.csr_matrix(out)


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("relative value iteration produced a non-finite value")


def rvia_sweep(
    vt: ValueTable, structure: _Structure
) -> tuple[ValueTable, PolicyTable]:
    """One synchronous relative-value-iteration sweep with full argmin."""
    q = structure.q_values(vt.values)
    actions = _tie_argmin(q)
    new = q[np.arange(q.shape[0]), actions] - vt.values[vt.reference]
    _check_finite(new)
    return ValueTable(new, vt.reference), PolicyTable(actions, structure.space)


@numba.njit(cache=True)
def _structural_kernel(cost, next_idx, w, n, m, n_ages, ref_value, tie_rtol):
    size = cost.shape[0]
    n_act = cost.shape[1]
    new = np.empty(size)
    actions = np.empty(size, dtype=np.int64)
    # below[s, i]: some state (x_i - zeta, x_-i, ctx) already chose action i+1
    below = np.zeros((size, n), dtype=np.bool_)
    shortcuts = 0
    for s in range(size):
        a = -1
        age_code = s % n_ages
        stride = 1
        for i in range(n):
            if (age_code // stride) % m != 0:
                prev = s - stride
                if actions[prev] == i + 1 or below[prev, i]:
                    below[s, i] = True
                    if a < 0:
                        a = i + 1
            stride *= m
        if a >= 0:
            shortcuts += 1
        else:
            best = cost[s, 0] + w[next_idx[s, 0]]
            a = 0
            for d in range(1, n_act):
                q = cost[s, d] + w[next_idx[s, d]]
                slack = tie_rtol * max(1.0, abs(best))
                if q < best - slack:
                    best = q
                    a = d
        actions[s] = a
        new[s] = cost[s, a] + w[next_idx[s, a]] - ref_value
    return new, actions, shortcuts


def structural_rvia_sweep(
    vt: ValueTable, structure: _Structure
) -> tuple[ValueTable, PolicyTable, int]:
    """One sweep where a state inherits action ``i`` when a state with smaller
    ``x_i`` (same other ages and context) already chose ``i`` in this sweep.

    Returns the new table, the policy and the number of argmin scans skipped.
    """
    w = structure.continuation(vt.values)
    space = structure.space
    new, actions, shortcuts = _structural_kernel(
        structure.cost,
        structure.next_idx,
        w,
        space.n,
        space.m,
        space.n_ages,
        float(vt.values[vt.reference]),
        TIE_RTOL,
    )
    _check_finite(new)
    return ValueTable(new, vt.reference), PolicyTable(actions, space), int(shortcuts)


@dataclass
class SolveConfig:
    probs: tuple[float, ...]
    m: int
    tol: float = 1e-9
    max_iters: int = 100_000
    method: str = "structural"  # or "plain"
    buffered: bool = False

    @property
    def n(self) -> int:
        return len(self.probs)


@dataclass
class SolveResult:
    policy: PolicyTable
    values: ValueTable
    average_cost: float
    gain_bounds: tuple[float, float]
    iterations: int
    converged: bool
    span: float
    shortcuts: int = 0


def span(v: np.ndarray) -> float:
    return float(v.max() - v.min())


def solve(config: SolveConfig) -> SolveResult:
    """Iterate sweeps from ``V = 0`` until ``span(V_new - V_old) < tol``.

    The average cost is the midpoint of the bounds
    ``min/max (T V_old - V_old)``, which equals ``V(0)`` at the fixed point.
    """
    model = ArrivalModel(tuple(config.probs))
    space_cls = BufferedStateSpace if config.buffered else TruncatedStateSpace
    space = space_cls(model.user_count, config.m)
    structure = build_structure(space, model)
    if config.method not in ("structural", "plain"):
        raise ValueError(f"unknown method {config.method!r}")

    vt = ValueTable(np.zeros(space.size), space.reference)
    diff_span = math.inf
    shortcuts = 0
    policy = None
    lo = hi = math.nan
    it = 0
    for it in range(1, config.max_iters + 1):
        if config.method == "structural":
            new, policy, skipped = structural_rvia_sweep(vt, structure)
            shortcuts += skipped
        else:
            new, policy = rvia_sweep(vt, structure)
        delta = new.values - vt.values
        diff_span = span(delta)
        ref_old = vt.values[vt.reference]
        lo, hi = ref_old + float(delta.min()), ref_old + float(delta.max())
        vt = new
        if diff_span < config.tol:
            break
    converged = diff_span < config.tol
    if not converged:
        warnings.warn(
            f"RVIA did not converge in {it} iterations (span {diff_span:.3e} >= tol {config.tol:.1e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return SolveResult(
        policy=policy,
        values=vt,
        average_cost=0.5 * (lo + hi),
        gain_bounds=(lo, hi),
        iterations=it,
        converged=converged,
        span=diff_span,
        shortcuts=shortcuts,
    )


def discounted_value_iteration(
    probs: Sequence[float], m: int, alpha: float, n_iters: int
) -> ValueTable:
    """``V_{n+1} = min_d C + alpha E[V_n]`` on the truncated space, from ``V_0 = 0``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("discount factor must lie in (0, 1)")
    model = ArrivalModel(tuple(probs))
    space = TruncatedStateSpace(model.user_count, m)
    structure = build_structure(space, model)
    v = np.zeros(space.size)
    for _ in range(n_iters):
        w = structure.continuation(v)
        v = (structure.cost + alpha * w[structure.next_idx]).min(axis=1)
    return ValueTable(v, space.reference)


def switch_map(policy: PolicyTable, ctx: Sequence[int]) -> np.ndarray:
    """Actions over the age grid for a fixed context, shaped ``(m,)*N`` and
    indexed ``[x_N - 1, .., x_1 - 1]`` (user 1 varies fastest)."""
    space = policy.space
    code = space.ctx_code(ctx)
    block = policy.actions[code * space.n_ages : (code + 1) * space.n_ages]
    return block.reshape((space.m,) * space.n)
