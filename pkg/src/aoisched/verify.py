"""Registry of the cross-module property and oracle checks behind ``aoisched verify``.

Each check returns ``(passed, detail)``; exceptions count as failures.  Index
and cost functions are looked up on their modules at call time so a mutated
implementation is what gets checked.
"""

from __future__ import annotations

import contextlib
import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from aoisched import core, mdp, oracle, schedulers, sim, whittle

P_GRID = [round(0.1 * k, 1) for k in range(1, 11)]
ASYM_GRID = [(0.6, round(0.1 * k, 1)) for k in range(1, 10)]
EQUAL_GRID = [(p, p) for p in (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)]


@dataclass(frozen=True)
class Check:
    id: str
    description: str
    fn: Callable[[], tuple[bool, str]]

    @property
    def module(self) -> str:
        return self.id.split(".")[0]


@dataclass
class CheckResult:
    id: str
    description: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.id:<36} {self.seconds:6.1f}s  {self.detail}"


REGISTRY: list[Check] = []


def check(check_id: str, description: str):
    def register(fn):
        REGISTRY.append(Check(check_id, description, fn))
        return fn

    return register


def _quiet_main(argv: list[str]) -> int:
    from aoisched import cli

    sink = io.StringIO()
    with contextlib.redirect_stdout(sink), contextlib.redirect_stderr(sink):
        return cli.main(argv)


def run_checks(only: str | None = None, progress=None) -> list[CheckResult]:
    results = []
    for c in REGISTRY:
        if only and only not in c.id:
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = c.fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"raised {exc!r}"
        res = CheckResult(c.id, c.description, bool(passed), detail, time.perf_counter() - t0)
        results.append(res)
        if progress:
            progress(res)
    return results


def _random_states(rng: np.random.Generator, count: int, max_n: int = 5, max_age: int = 60):
    for _ in range(count):
        n = int(rng.integers(1, max_n + 1))
        ages = tuple(int(a) for a in rng.integers(1, max_age + 1, n))
        lam = tuple(int(a) for a in rng.integers(0, 2, n))
        yield core.NetworkState(ages, lam)


def _age_axes(space: mdp.TruncatedStateSpace, table: np.ndarray) -> tuple[np.ndarray, list[int]]:
    grid = table.reshape((space.n_ctx,) + (space.m,) * space.n)
    return grid, [1 + space.n - i for i in range(1, space.n + 1)]


# ---------------------------------------------------------------------- core


@check("core.cost_lower_bound", "immediate cost >= N for every state and decision")
def _core_cost_bound():
    rng = np.random.default_rng(1)
    for s in _random_states(rng, 3000):
        for d in range(s.user_count + 1):
            if core.immediate_cost(s, d) < s.user_count:
                return False, f"cost below N at {s}, d={d}"
    return True, "3000 random states"


@check("core.idle_composition", "T idle steps add exactly T to every age")
def _core_idle():
    rng = np.random.default_rng(2)
    for s in _random_states(rng, 300):
        steps = int(rng.integers(1, 150))
        cur = s
        for _ in range(steps):
            cur = core.age_step(cur, 0, tuple(int(v) for v in rng.integers(0, 2, s.user_count)))
        if cur.ages != tuple(a + steps for a in s.ages):
            return False, f"idle composition broke at {s} after {steps} slots"
    return True, "300 random starts"


@check("core.cost_matches_dynamics", "immediate cost equals the total of the next ages")
def _core_consistency():
    rng = np.random.default_rng(3)
    for s in _random_states(rng, 3000):
        nxt = tuple(int(v) for v in rng.integers(0, 2, s.user_count))
        for d in range(s.user_count + 1):
            if core.immediate_cost(s, d) != sum(core.age_step(s, d, nxt).ages):
                return False, f"mismatch at {s}, d={d}"
    return True, "3000 random states"


# ----------------------------------------------------------------------- mdp


@check("mdp.monotonicity", "discounted values nondecreasing in each age")
def _mdp_monotone():
    cases = [((0.5,), 4, 200), ((0.3,), 6, 60), ((0.7, 0.4), 6, 1), ((0.7, 0.4), 6, 5),
             ((0.7, 0.4), 6, 80), ((0.9, 0.2, 0.5), 4, 40)]
    for probs, m, n_iters in cases:
        vt = mdp.discounted_value_iteration(probs, m, 0.9, n_iters)
        space = mdp.TruncatedStateSpace(len(probs), m)
        grid, axes = _age_axes(space, vt.values)
        for i, ax in enumerate(axes, start=1):
            worst = float(np.diff(grid, axis=ax).min())
            if worst < -1e-9:
                return False, f"p={probs} m={m} n={n_iters}: V decreases in x_{i} by {-worst:.3e}"
    return True, f"{len(cases)} tables"


@check("mdp.switch_structure", "converged policies are switch-type")
def _mdp_switch():
    cases = [((0.9, 0.9), 10), ((0.9, 0.5), 10), ((0.6, 0.5), 20), ((0.2, 0.8), 15), ((0.5, 0.4, 0.7), 8)]
    for probs, m in cases:
        res = mdp.solve(mdp.SolveConfig(probs, m))
        rep = oracle.check_switch_structure(res.policy)
        if not rep.ok:
            return False, f"p={probs} m={m}: violations {rep.counterexamples[:3]}"
    return True, f"{len(cases)} converged tables"


@check("mdp.oracle_equivalence", "RVIA optimum equals the exact optimum (N=2, m<=4)")
def _mdp_oracle():
    worst = 0.0
    count = 0
    for m in (3, 4):
        for p1 in (0.3, 0.7, 1.0):
            for p2 in (0.3, 0.7, 1.0):
                probs = (p1, p2)
                got = mdp.solve(mdp.SolveConfig(probs, m)).average_cost
                want = oracle.brute_force_optimal(mdp.TruncatedStateSpace(2, m), core.ArrivalModel(probs)).average_cost
                worst = max(worst, abs(got - want))
                count += 1
    return worst < 1e-6, f"{count} instances, max gap {worst:.2e}"


@check("mdp.truncation_convergence", "|V20-V30| < |V10-V30| on the p1=0.6 sweep")
def _mdp_truncation():
    rows = []
    for probs in ASYM_GRID:
        v10, v20, v30 = (mdp.solve(mdp.SolveConfig(probs, m)).average_cost for m in (10, 20, 30))
        d20, d10 = abs(v20 - v30), abs(v10 - v30)
        if not (d20 < d10 or d10 < 1e-9):
            return False, f"p={probs}: |V20-V30|={d20:.3e} >= |V10-V30|={d10:.3e}"
        rows.append(d10)
    return True, f"9 grid points, largest |V10-V30| {max(rows):.3e}"


@check("mdp.structural_equals_plain", "structural and plain RVIA reach the same policy and values")
def _mdp_struct_plain():
    cases = [((0.6, 0.5), 15, False), ((0.9, 0.9), 10, False), ((0.3, 0.7, 0.5), 6, False), ((0.4, 0.4), 8, True)]
    for probs, m, buf in cases:
        a = mdp.solve(mdp.SolveConfig(probs, m, method="structural", buffered=buf))
        b = mdp.solve(mdp.SolveConfig(probs, m, method="plain", buffered=buf))
        gap = float(np.abs(a.values.values - b.values.values).max())
        if not np.array_equal(a.policy.actions, b.policy.actions) or gap >= 1e-9:
            return False, f"p={probs} m={m} buffered={buf}: value gap {gap:.2e}"
    return True, f"{len(cases)} configurations"


# ------------------------------------------------------------------- whittle


@check("whittle.analytic_vs_sim", "threshold policy: simulated cost within 1% of the closed form")
def _whittle_sim():
    worst = 0.0
    for xbar in (1, 2, 5):
        for p in (0.2, 0.5, 0.9):
            cfg = sim.SimConfig(core.ArrivalModel((p,)), 1_000_000, seed=xbar * 100 + int(p * 10))
            metrics = sim.run(schedulers.ThresholdScheduler(xbar), cfg)
            for c in (0.0, 1.0, 5.0):
                want = whittle.threshold_average_cost(xbar, p, c)
                rel = abs(metrics.average_cost(c) - want) / want
                worst = max(worst, rel)
                if rel > 0.01:
                    return False, f"X={xbar} p={p} c={c}: relative error {rel:.3%}"
    return True, f"27 cases, worst {worst:.3%}"


def threshold_chain(xbar: int, p: float, k: int) -> np.ndarray:
    """Post-action age chain on ``1..k`` under a threshold policy; state ``k`` lumps the tail."""
    P = np.zeros((k, k))
    for age in range(1, k + 1):
        nxt = min(age + 1, k) - 1
        if age >= xbar:
            P[age - 1, 0] += p
            P[age - 1, nxt] += 1 - p
        else:
            P[age - 1, nxt] += 1.0
    return P


@check("whittle.steady_state_oracle", "closed-form steady state matches a linear solve (K=200)")
def _whittle_steady():
    worst = 0.0
    for xbar in (1, 2, 5):
        for p in (0.2, 0.5, 0.9):
            k = 200
            pi = oracle.stationary_distribution(threshold_chain(xbar, p, k)).distribution
            ss = whittle.threshold_steady_state(xbar, p, k)
            closed = np.array(ss.probs, dtype=float)
            closed[-1] += ss.tail
            worst = max(worst, float(np.abs(pi - closed).max()))
    return worst < 1e-9, f"max entry gap {worst:.2e}"


@check("whittle.tie_identity", "index tie identity: C(x)=C(x+1) iff c equals the Whittle index")
def _whittle_tie():
    for p in P_GRID:
        for x in range(1, 51):
            c = whittle.whittle_index(x, 1, p)
            a = whittle.threshold_average_cost(x, p, c)
            b = whittle.threshold_average_cost(x + 1, p, c)
            if abs(a - b) > 1e-9 * max(1.0, abs(a)):
                return False, (
                    f"threshold cost vs Whittle index cross-check failed at x={x}, p={p}: "
                    f"C(x)={a:.12g}, C(x+1)={b:.12g} at c=I(x,1)={c:.12g}"
                )
            off = c + 1e-3 * (1 + c)
            if abs(whittle.threshold_average_cost(x, p, off) - whittle.threshold_average_cost(x + 1, p, off)) < 1e-12:
                return False, f"C(x)=C(x+1) away from the index at x={x}, p={p}"
    return True, "x in 1..50, 10 rates"


@check("whittle.index_monotone", "index strictly increasing in age, strictly decreasing in rate")
def _whittle_monotone():
    xs = np.arange(1, 201)
    ps = np.linspace(0.05, 1.0, 20)
    table = np.array([[whittle.whittle_index(int(x), 1, float(p)) for x in xs] for p in ps])
    if not (np.diff(table, axis=1) > 0).all():
        return False, "not increasing in x"
    if not (np.diff(table, axis=0) < 0).all():
        return False, "not decreasing in p"
    return True, "x in 1..200, 20 rates"


@check("whittle.convexity", "threshold cost is strictly convex in the threshold")
def _whittle_convex():
    # cost = x/2 + const + r/(x + k) with r = (1/p - 1)/(2p) + c: affine when r = 0
    for p in P_GRID:
        for c in (0.0, 1.0, 5.0, 50.0):
            affine = p == 1.0 and c == 0.0
            ints = np.diff([whittle.threshold_average_cost(x, p, c) for x in range(1, 202)], 2)
            reals = np.diff([whittle.threshold_average_cost(1 + 0.25 * k, p, c) for k in range(200)], 2)
            for kind, second in (("integer", ints), ("real", reals)):
                if affine and np.abs(second).max() > 1e-12:
                    return False, f"{kind} cost not affine at p=1, c=0"
                if not affine and second.min() <= 0:
                    return False, f"{kind} second difference not positive at p={p}, c={c}"
    return True, "10 rates x 4 costs (affine at p=1, c=0)"


@check("whittle.indexability", "optimal threshold monotone in c and equal to the brute-force argmin")
def _whittle_indexability():
    c_grid = [0.5 * k for k in range(101)]
    for p in P_GRID:
        rep = whittle.verify_indexability(p, c_grid)
        if not rep.indexable:
            return False, f"thresholds decrease along c at p={p}"
        for c, th in zip(c_grid, rep.thresholds):
            bf = whittle.brute_force_threshold(p, c, 200)
            if bf != th:
                return False, f"p={p} c={c}: interval rule {th} vs brute force {bf}"
    return True, "10 rates x 101 costs"


# ---------------------------------------------------------------- schedulers


@check("schedulers.equal_rate_equivalence", "equal rates: index rule equals max-age-with-arrival")
def _sched_equal():
    rng = np.random.default_rng(5)
    for s in _random_states(rng, 5000, max_n=8, max_age=40):
        p = float(rng.choice(P_GRID))
        a = schedulers.index_decide(s, (p,) * s.user_count)
        b = schedulers.baseline_decide("max_age_arrival", s)
        if a != b:
            return False, f"{s} p={p}: index {a} vs max-age {b}"
    return True, "5000 random observations"


@check("schedulers.online_index_frozen", "online index with true rates equals the offline index")
def _sched_frozen():
    rng = np.random.default_rng(6)
    for s in _random_states(rng, 5000, max_n=6):
        probs = tuple(float(v) for v in rng.uniform(0.01, 1.0, s.user_count))
        if schedulers.index_online_decide(schedulers.FixedRates(probs), s) != schedulers.index_decide(s, probs):
            return False, f"disagreement at {s}, p={probs}"
    return True, "5000 random observations"


@check("schedulers.mdp_online_reference", "online update subtracts V(0) and stays finite over 1e6 slots")
def _sched_online():
    space = mdp.TruncatedStateSpace(2, 12)
    store = schedulers.OnlineValueStore(space, schedulers.StepSchedule(0.5))
    rng = np.random.default_rng(7)
    store.values[:] = rng.normal(size=space.size)
    post = schedulers.PostActionState((3, 7), (1, 0))
    for _ in range(500):
        lam = tuple(int(v) for v in rng.integers(0, 2, 2))
        before = store.values.copy()
        t = store.t
        cur = space.ordinal(post.ages, post.arrivals)
        x = post.ages
        q = []
        for d in range(3):
            nxt = mdp.truncated_step(x, d, lam, space.m)
            q.append(core.immediate_cost(core.NetworkState(x, lam), d) + before[space.ordinal(nxt, lam)])
        gamma = 0.5 if t == 0 else 0.5 / t
        expect = (1 - gamma) * before[cur] + gamma * (min(q) - before[space.reference])
        d, post = schedulers.mdp_online_decide_and_learn(store, post, lam)
        if d != int(np.argmin(q)) or abs(store.values[cur] - expect) > 1e-12:
            return False, f"update mismatch at t={t}"
    policy = schedulers.MDPOnlinePolicy(2, m=30, gamma=0.01)
    sim.run(policy, sim.SimConfig(core.ArrivalModel((0.6, 0.5)), 1_000_000, seed=11))
    if not np.isfinite(policy.store.values).all():
        return False, "non-finite values after 1e6 slots"
    return True, "500 checked updates, 1e6-slot run finite"


@check("schedulers.offline_stateless", "same seed and policy give identical decision sequences")
def _sched_stateless():
    model = core.ArrivalModel((0.6, 0.3))
    table = mdp.solve(mdp.SolveConfig(model.probs, 10)).policy
    pols = [schedulers.IndexPolicy(model.probs), schedulers.StructuralMDPPolicy(table)]
    pols += [schedulers.BaselinePolicy(k, 2) for k in schedulers.BASELINES]
    cfg = sim.SimConfig(model, 3000, seed=4)
    for pol in pols:
        first = [d for _, d in sim.simulate_trajectory(pol, cfg)]
        second = [d for _, d in sim.simulate_trajectory(pol, cfg)]
        if first != second:
            return False, f"{pol.label} is not reproducible"
    return True, f"{len(pols)} policies"


# ----------------------------------------------------------------------- sim


@check("sim.cost_consistency", "accumulated total age equals summed immediate costs")
def _sim_cost():
    model = core.ArrivalModel((0.3, 0.5, 0.8))
    cfg = sim.SimConfig(model, 5000, seed=9)
    for pol in (schedulers.IndexPolicy(model.probs), schedulers.BaselinePolicy("round_robin", 3)):
        traj = sim.simulate_trajectory(pol, cfg)
        expected = sum(core.immediate_cost(obs, d) for obs, d in traj)
        got = sim.run(pol, cfg).avg_total_age * cfg.horizon
        if round(got) != expected:
            return False, f"{pol.label}: simulator {got} vs summed cost {expected}"
    return True, "2 policies x 5000 slots"


@check("sim.index_dominates_random", "index <= random-arrival baseline on the p1=0.6 sweep (1% slack)")
def _sim_dominance():
    specs = [
        sim.SchedulerSpec("index", schedulers.IndexPolicy),
        sim.SchedulerSpec("random_arrival", _RandomArrival()),
    ]
    rows = sim.sweep(specs, ASYM_GRID, 100_000, seed=2024)
    for k in range(0, len(rows), 2):
        idx, rnd = rows[k].metrics.avg_total_age, rows[k + 1].metrics.avg_total_age
        if idx > 1.01 * rnd:
            return False, f"p={rows[k].probs}: index {idx:.4f} > random {rnd:.4f}"
    return True, "9 grid cells"


class _RandomArrival:
    def __call__(self, probs):
        return schedulers.BaselinePolicy("random_arrival", len(probs))


@check("sim.buffered_not_worse", "buffered MDP age <= no-buffer MDP age at equal rates 0.4..0.9")
def _sim_buffered():
    m = 10
    out = []
    for gi, probs in enumerate(EQUAL_GRID):
        model = core.ArrivalModel(probs)
        seed = core.derive_seed(77, gi)
        plain = mdp.solve(mdp.SolveConfig(probs, m)).policy
        buf = mdp.solve(mdp.SolveConfig(probs, m, buffered=True)).policy
        a = sim.run(schedulers.StructuralMDPPolicy(plain), sim.SimConfig(model, 100_000, seed)).avg_total_age
        b = sim.run(schedulers.BufferedMDPPolicy(buf), sim.SimConfig(model, 100_000, seed, buffered=True)).avg_total_age
        if b > a * 1.01:
            return False, f"p={probs}: buffered {b:.4f} > no-buffer {a:.4f}"
        out.append((a - b) / a)
    return True, "reductions " + ", ".join(f"{r:.1%}" for r in out)


@check("sim.reproducibility", "identical policy, config and seed give identical metrics")
def _sim_repro():
    model = core.ArrivalModel((0.4, 0.7))
    for engine in ("auto", "python"):
        cfg = sim.SimConfig(model, 20_000 if engine == "auto" else 3000, seed=5, engine=engine)
        for make in (lambda: schedulers.BaselinePolicy("random_arrival", 2), lambda: schedulers.MDPOnlinePolicy(2, 20)):
            a, b = sim.run(make(), cfg), sim.run(make(), cfg)
            if a != b or repr(a) != repr(b):
                return False, f"{engine} engine not reproducible"
    return True, "2 engines x 2 policies"


# -------------------------------------------------------------------- oracle


def _tiny_instances():
    yield mdp.TruncatedStateSpace(1, 3), core.ArrivalModel((0.3,))
    yield mdp.TruncatedStateSpace(1, 4), core.ArrivalModel((0.7,))
    yield mdp.TruncatedStateSpace(2, 3), core.ArrivalModel((0.3, 0.7))
    yield mdp.TruncatedStateSpace(2, 4), core.ArrivalModel((0.7, 0.7))


@check("oracle.self_consistency", "power iteration and linear solve agree to 1e-9")
def _oracle_self():
    rng = np.random.default_rng(12)
    worst = 0.0
    count = 0
    for space, model in _tiny_instances():
        tr = oracle.build_transitions(space, model)
        for _ in range(5):
            actions = rng.integers(0, space.n + 1, space.size)
            P, _ = oracle._induced(tr, actions)
            st = oracle.stationary_distribution(P)
            worst = max(worst, st.crosscheck_error)
            count += 1
    for xbar in (1, 3):
        st = oracle.stationary_distribution(threshold_chain(xbar, 0.4, 60))
        worst = max(worst, st.crosscheck_error)
        count += 1
    return worst <= 1e-9, f"{count} chains, max disagreement {worst:.2e}"


@check("oracle.optimality_certified", "oracle optimum is no worse than any other policy")
def _oracle_certified():
    space, model = mdp.TruncatedStateSpace(1, 3), core.ArrivalModel((0.3,))
    res = oracle.brute_force_optimal(space, model)
    if min(res.evaluated) < res.average_cost - 1e-12:
        return False, "enumeration returned a non-minimal policy"
    rng = np.random.default_rng(13)
    space, model = mdp.TruncatedStateSpace(2, 3), core.ArrivalModel((0.3, 0.7))
    best = oracle.brute_force_optimal(space, model)
    tr = oracle.build_transitions(space, model)
    for _ in range(300):
        actions = rng.integers(0, 3, space.size)
        if oracle.evaluate_policy_exact(actions, space, model, tr).average_cost < best.average_cost - 1e-10:
            return False, "a random policy beat the policy-iteration optimum"
    return True, f"{len(res.evaluated)} enumerated + 300 random policies"


@check("oracle.sim_matches_exact", "simulated average cost within 1% of the exact evaluation")
def _oracle_sim():
    rng = np.random.default_rng(14)
    worst = 0.0
    for k, (space, model) in enumerate(_tiny_instances()):
        opt = oracle.brute_force_optimal(space, model).policy
        rnd = mdp.PolicyTable(rng.integers(0, space.n + 1, space.size), space)
        for pol in (opt, rnd):
            exact = oracle.evaluate_policy_exact(pol, space, model).average_cost
            got = oracle.simulate_truncated(pol, model, 1_000_000, seed=k)
            worst = max(worst, abs(got - exact) / exact)
    return worst < 0.01, f"8 policies, worst {worst:.3%}"


# ----------------------------------------------------------------------- cli


@check("cli.manifest_determinism", "identical manifests give identical artifacts and outputs")
def _cli_determinism():
    from aoisched import cli

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        blobs = []
        for rep in ("a", "b"):
            d = tmp / rep
            csv_path, json_path, _ = cli.write_policy_artifact(mdp.SolveConfig((0.9, 0.9), 10), d)
            out = d / "run.csv"
            code = _quiet_main(["run", "--probs", "0.6,0.5", "--policy", "structural_mdp,index,random_arrival",
                             "--m", "10", "--horizon", "5000", "--seed", "3", "--artifacts", str(d),
                             "--solve-missing", "--out", str(out)])
            if code != 0:
                return False, f"run exited with {code}"
            blobs.append([p.read_bytes() for p in (csv_path, json_path, out, d / "run.csv.manifest.json")])
        if blobs[0] != blobs[1]:
            return False, "reruns differ"
    return True, "policy artifact, manifest and run CSV byte-identical"


@check("cli.recipes_from_simulation", "recipe outputs come from simulation, not stored numbers")
def _cli_recipes():
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for seed in (0, 1):
            out = Path(tmp) / f"fig8_{seed}.csv"
            code = _quiet_main(["run", "--recipe", "fig8", "--horizon", "2000", "--seed", str(seed),
                                "--artifacts", tmp, "--out", str(out)])
            if code != 0:
                return False, f"fig8 run exited with {code}"
            outs.append(out.read_text())
        if outs[0] == outs[1]:
            return False, "changing the seed did not change the figure data"
    return True, "fig8 data depends on the simulation seed"
