"""Exact ground truth for small truncated instances.

Transition matrices here are rebuilt state by state from the age recursion and
the Bernoulli outcome probabilities, deliberately without the vectorised
structure used by :mod:`aoisched.mdp`, so the two routes check each other.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from aoisched.core import ArrivalModel, RandomSource
from aoisched.mdp import BufferedStateSpace, PolicyTable, TruncatedStateSpace, truncated_step

ROW_SUM_TOL = 1e-12
RESIDUAL_TOL = 1e-12
CROSSCHECK_TOL = 1e-9


class NotUnichainError(ValueError):
    def __init__(self, first: np.ndarray, second: np.ndarray):
        self.closed_sets = (first, second)
        super().__init__(
            f"chain has several closed classes, e.g. states {first[:8].tolist()} "
            f"and {second[:8].tolist()}"
        )


class OracleBudgetError(RuntimeError):
    pass


@dataclass
class StochasticMatrix:
    matrix: sp.csr_matrix

    def __post_init__(self) -> None:
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        if m.shape[0] != m.shape[1]:
            raise ValueError("transition matrix must be square")
        if m.nnz and m.data.min() < 0:
            raise ValueError("negative transition probability")
        rows = np.asarray(m.sum(axis=1)).ravel()
        if np.abs(rows - 1).max(initial=0) > ROW_SUM_TOL:
            raise ValueError("rows must sum to one")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class Stationary:
    distribution: np.ndarray
    recurrent: np.ndarray  # bool mask of the single closed class
    residual: float
    crosscheck_error: float


def closed_classes(P: StochasticMatrix) -> list[np.ndarray]:
    m = P.matrix
    n_comp, labels = connected_components(m, directed=True, connection="strong")
    coo = m.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    keep = coo.data > 0
    src, dst = labels[coo.row[keep]], labels[coo.col[keep]]
    leaving[src[src != dst]] = True
    return [np.flatnonzero(labels == c) for c in range(n_comp) if not leaving[c]]


def _power_iteration(m: sp.csr_matrix, tol: float = 1e-15, max_iters: int = 1_000_000) -> np.ndarray:
    # lazy chain (P + I)/2 shares the stationary law and is aperiodic
    lazy_t = (0.5 * (m + sp.identity(m.shape[0], format="csr"))).T.tocsr()
    pi = np.full(m.shape[0], 1.0 / m.shape[0])
    for _ in range(max_iters):
        nxt = lazy_t @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    return pi


def stationary_distribution(P, crosscheck: bool = True) -> Stationary:
    """Solve ``pi P = pi, sum(pi) = 1`` directly and confirm by power iteration."""
    if not isinstance(P, StochasticMatrix):
        P = StochasticMatrix(P)
    closed = closed_classes(P)
    if len(closed) > 1:
        raise NotUnichainError(closed[0], closed[1])
    n = P.n
    # pin one recurrent state to 1 instead of a dense sum row (keeps LU sparse)
    k = int(closed[0][0])
    a = (P.matrix.T - sp.identity(n, format="csr")).tolil()
    a[k, :] = 0.0
    a[k, k] = 1.0
    b = np.zeros(n)
    b[k] = 1.0
    pi = spla.spsolve(a.tocsc(), b) if n > 1 else np.ones(1)
    pi = np.where(np.abs(pi) < 1e-300, 0.0, pi)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.abs(P.matrix.T @ pi - pi).max())
    if residual > RESIDUAL_TOL * max(1.0, np.sqrt(n)):
        raise ArithmeticError(f"stationary solve residual {residual:.2e} too large")
    err = 0.0
    if crosscheck:
        err = float(np.abs(_power_iteration(P.matrix) - pi).max())
        if err > CROSSCHECK_TOL:
            raise ArithmeticError(f"power iteration disagrees with linear solve by {err:.2e}")
    recurrent = np.zeros(n, dtype=bool)
    recurrent[closed[0]] = True
    return Stationary(pi, recurrent, residual, err)


# ----------------------------------------------------------------- the MDP


@dataclass
class _Transitions:
    """Per-action sparse matrices and cost vectors over the truncated space."""

    space: TruncatedStateSpace
    matrices: list[sp.csr_matrix]
    costs: np.ndarray  # (S, N+1)


def _outcomes(model: ArrivalModel):
    out = []
    for lam in itertools.product((0, 1), repeat=model.user_count):
        prob = 1.0
        for p, l in zip(model.probs, lam):
            prob *= p if l else 1.0 - p
        if prob > 0:
            out.append((lam, prob))
    return out


def build_transitions(space: TruncatedStateSpace, model: ArrivalModel) -> _Transitions:
    if isinstance(space, BufferedStateSpace):
        raise NotImplementedError("the oracle covers the no-buffer model only")
    if model.user_count != space.n:
        raise ValueError("model and space disagree on N")
    n, size = space.n, space.size
    outcomes = _outcomes(model)
    costs = np.zeros((size, n + 1))
    rows = [[] for _ in range(n + 1)]
    cols = [[] for _ in range(n + 1)]
    vals = [[] for _ in range(n + 1)]
    for s in range(size):
        x, lam = space.state(s)
        for d in range(n + 1):
            nxt = truncated_step(x, d, lam, space.m)
            # resulting total age on virtual ages
            costs[s, d] = sum(xi + 1 for xi in x) - (x[d - 1] if d and lam[d - 1] else 0)
            for lam_next, prob in outcomes:
                rows[d].append(s)
                cols[d].append(space.ordinal(nxt, lam_next))
                vals[d].append(prob)
    mats = [
        sp.csr_matrix((vals[d], (rows[d], cols[d])), shape=(size, size)) for d in range(n + 1)
    ]
    return _Transitions(space, mats, costs)


def _induced(tr: _Transitions, actions: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    size = tr.space.size
    rows = []
    for d, mat in enumerate(tr.matrices):
        mask = sp.diags((actions == d).astype(np.float64))
        rows.append(mask @ mat)
    P = sum(rows[1:], rows[0]).tocsr()
    c = tr.costs[np.arange(size), actions]
    return P, c


@dataclass
class ExactEvaluation:
    average_cost: float
    distribution: np.ndarray
    recurrent: np.ndarray


def evaluate_policy_exact(
    policy: PolicyTable | np.ndarray,
    space: TruncatedStateSpace,
    model: ArrivalModel,
    transitions: _Transitions | None = None,
) -> ExactEvaluation:
    """Long-run average cost of a deterministic stationary policy on the truncated MDP."""
    actions = policy.actions if isinstance(policy, PolicyTable) else np.asarray(policy)
    tr = transitions or build_transitions(space, model)
    P, c = _induced(tr, actions)
    st = stationary_distribution(StochasticMatrix(P))
    return ExactEvaluation(float(st.distribution @ c), st.distribution, st.recurrent)


def gain_from_state(P: sp.csr_matrix, c: np.ndarray, start: int) -> float:
    """Long-run average cost from ``start``; valid for multichain policies.

    Weights each closed class's gain by its absorption probability from ``start``.
    """
    P = sp.csr_matrix(P)
    classes = closed_classes(StochasticMatrix(P))
    gains = []
    for cls in classes:
        sub = P[cls][:, cls]
        gains.append(float(stationary_distribution(sub, crosscheck=False).distribution @ c[cls]))
        if start in cls:
            return gains[-1]
    recurrent = np.concatenate(classes)
    transient = np.setdiff1d(np.arange(P.shape[0]), recurrent)
    pos = int(np.searchsorted(transient, start))
    a = (sp.identity(len(transient), format="csr") - P[transient][:, transient]).tocsc()
    total = 0.0
    for cls, g in zip(classes, gains):
        rhs = np.asarray(P[transient][:, cls].sum(axis=1)).ravel()
        total += g * float(np.atleast_1d(spla.spsolve(a, rhs))[pos])
    return total


def _gain_bias(P: sp.csr_matrix, c: np.ndarray, ref: int) -> tuple[float, np.ndarray]:
    # (I - P) h + g 1 = c with h(ref) = 0; the ref column carries g
    n = P.shape[0]
    a = (sp.identity(n, format="csr") - P).tolil()
    a[:, ref] = np.ones((n, 1))
    z = spla.spsolve(a.tocsc(), c)
    g = float(z[ref])
    h = z.copy()
    h[ref] = 0.0
    return g, h


@dataclass
class OptimalPolicy:
    policy: PolicyTable
    average_cost: float
    method: str
    iterations: int
    evaluated: list[float] = field(default_factory=list)


def brute_force_optimal(
    space: TruncatedStateSpace,
    model: ArrivalModel,
    budget: int = 4096,
    max_iters: int = 1000,
) -> OptimalPolicy:
    """Optimal deterministic stationary policy and its exact average cost.

    Enumerates all ``(N+1)**|S|`` policies when that fits in ``budget``;
    otherwise runs policy iteration (keeps the incumbent action on ties).
    Degenerate rates (``p_i = 1``) admit multichain policies, so enumerated
    policies are ranked by their average cost from the reference state.
    """
    tr = build_transitions(space, model)
    n_act = space.n + 1
    if n_act**space.size <= budget:
        best, best_cost, costs = None, np.inf, []
        for combo in itertools.product(range(n_act), repeat=space.size):
            actions = np.array(combo, dtype=np.int64)
            cost = gain_from_state(*_induced(tr, actions), space.reference)
            costs.append(cost)
            if cost < best_cost - 1e-12:
                best, best_cost = actions, cost
        return OptimalPolicy(PolicyTable(best, space), best_cost, "enumeration", len(costs), costs)

    actions = tr.costs.argmin(axis=1)
    ref = space.reference
    for it in range(1, max_iters + 1):
        P, c = _induced(tr, actions)
        g, h = _gain_bias(P, c, ref)
        q = np.stack([tr.costs[:, d] + tr.matrices[d] @ h for d in range(n_act)], axis=1)
        qmin = q.min(axis=1)
        current = q[np.arange(space.size), actions]
        improve = current > qmin + 1e-10 * np.maximum(1.0, np.abs(qmin))
        if not improve.any():
            exact = evaluate_policy_exact(actions, space, model, tr).average_cost
            return OptimalPolicy(PolicyTable(actions, space), exact, "policy_iteration", it)
        actions = np.where(improve, q.argmin(axis=1), actions)
    raise OracleBudgetError(f"policy iteration did not settle in {max_iters} iterations")


def lift_policy(policy: PolicyTable, space: TruncatedStateSpace) -> PolicyTable:
    """Run a truncated-table scheduler on a larger truncation ``space``.

    The scheduler looks ages up capped at its own ``m``, so evaluating the lifted
    table approximates its performance on the real (untruncated) ages.
    """
    small = policy.space
    if isinstance(space, BufferedStateSpace) or isinstance(small, BufferedStateSpace):
        raise NotImplementedError("lifting covers the no-buffer model only")
    if space.n != small.n or space.m < small.m:
        raise ValueError("target space must have the same N and a larger m")
    ages = np.repeat(np.minimum(space.ages_table(), small.m)[None], space.n_ctx, axis=0)
    ctx = np.repeat(space.ctx_table()[:, None, :], space.n_ages, axis=1)
    ords = ctx.reshape(-1, space.n) @ (2 ** np.arange(space.n)) * small.n_ages
    ords = ords + (ages.reshape(-1, space.n) - 1) @ small.strides()
    return PolicyTable(policy.actions[ords], space)


# ------------------------------------------------------------- structure


@dataclass
class SwitchReport:
    ok: bool
    counterexamples: list[tuple[int, int]]


def check_switch_structure(
    policy: PolicyTable, space: TruncatedStateSpace | None = None, limit: int = 20
) -> SwitchReport:
    """For every user ``i`` and fixed ``(x_-i, ctx)``, the ages where ``i`` is
    served must be upward closed.  Counterexamples are ``(s, s')`` ordinal
    pairs where ``s`` serves ``i`` and ``s'`` (larger ``x_i``) does not."""
    space = space or policy.space
    n, m = space.n, space.m
    grid = policy.actions.reshape((space.n_ctx,) + (m,) * n)
    found: list[tuple[int, int]] = []
    for i in range(1, n + 1):
        axis = 1 + (n - i)
        serve = grid == i
        seen = np.maximum.accumulate(serve, axis=axis)
        bad = seen & ~serve
        for idx in np.argwhere(bad)[:limit]:
            idx = tuple(int(v) for v in idx)
            first = int(np.argmax(serve[idx[:axis] + (slice(None),) + idx[axis + 1 :]]))
            low = idx[:axis] + (first,) + idx[axis + 1 :]
            found.append(
                (int(np.ravel_multi_index(low, grid.shape)), int(np.ravel_multi_index(idx, grid.shape)))
            )
    return SwitchReport(not found, found[:limit])


# ------------------------------------------------------------ Monte Carlo


def simulate_truncated(
    policy: PolicyTable, model: ArrivalModel, horizon: int, seed: int = 0
) -> float:
    """Average cost of ``policy`` simulated on the truncated chain itself."""
    space = policy.space
    tr = build_transitions(space, model)
    size = space.size
    # the age part of the successor does not depend on the next arrivals
    succ = np.empty(size, dtype=np.int64)
    cost = tr.costs[np.arange(size), policy.actions]
    for s in range(size):
        row = tr.matrices[policy.actions[s]].getrow(s)
        succ[s] = row.indices[0] % space.n_ages
    rng = RandomSource(seed)
    weights = 1 << np.arange(space.n)
    s = space.reference
    total = 0.0
    n_ages = space.n_ages
    succ_l, cost_l = succ.tolist(), cost.tolist()
    for start in range(0, horizon, 1 << 16):
        k = min(1 << 16, horizon - start)
        codes = (rng.arrival_block(model, k) @ weights).tolist()
        for code in codes:
            total += cost_l[s]
            s = code * n_ages + succ_l[s]
    return total / horizon
