"""Command-line front end: ``aoisched solve | run | verify``.

Exit codes: 0 success, 1 verification failure or non-convergence, 2 usage error.
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import itertools
import json
import operator
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from aoisched.core import ArrivalModel
from aoisched.mdp import (
    BufferedStateSpace,
    PolicyTable,
    SolveConfig,
    TruncatedStateSpace,
    solve,
    switch_map,
)
from aoisched.schedulers import (
    BASELINES,
    AlwaysIdle,
    BaselinePolicy,
    BufferedMDPPolicy,
    IndexOnlinePolicy,
    IndexPolicy,
    MDPOnlinePolicy,
    StructuralMDPPolicy,
)
from aoisched.sim import SchedulerSpec, SweepRow, rows_to_csv, sweep

STATE_BUDGET = 2_000_000
DEFAULT_HORIZON = 100_000
TABLE_SCHEDULERS = {"structural_mdp": False, "buffered_mdp": True}
SCHEDULERS = (*TABLE_SCHEDULERS, "index", "index_online", "mdp_online", *BASELINES, "always_idle")
DEFAULT_M = {"structural_mdp": 30, "buffered_mdp": 30, "mdp_online": 100}
RECIPES = ("fig3_switch_map", "fig5", "fig6", "fig7", "fig8", "fig9_buffer")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ formulas

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def eval_formula(expr: str | float | int, variables: dict[str, float]) -> float:
    """Arithmetic over numbers and named variables only (no calls, no attributes)."""
    if isinstance(expr, (int, float)):
        return float(expr)

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in variables:
                raise UsageError(f"unknown name {node.id!r} in formula {expr!r}")
            return float(variables[node.id])
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand))
        raise UsageError(f"unsupported syntax in formula {expr!r}")

    try:
        tree = ast.parse(str(expr), mode="eval")
    except SyntaxError as exc:
        raise UsageError(f"cannot parse formula {expr!r}") from exc
    try:
        return ev(tree)
    except ZeroDivisionError as exc:
        raise UsageError(f"division by zero in formula {expr!r}") from exc


def expand_grid(entries: Sequence[dict]) -> list[tuple[float, ...]]:
    """Each entry: ``N`` (int or list), ``probs`` (list with one item per user,
    or a single formula for every user; formulas see ``N``, ``i`` and ``vars``),
    optional ``vars`` mapping names to value lists (Cartesian product)."""
    grid: list[tuple[float, ...]] = []
    for entry in entries:
        if not isinstance(entry, dict) or "probs" not in entry:
            raise UsageError(f"grid entry needs 'probs': {entry!r}")
        probs = entry["probs"]
        ns = entry.get("N", len(probs) if isinstance(probs, list) else None)
        if ns is None:
            raise UsageError(f"grid entry needs 'N' when probs is a formula: {entry!r}")
        ns = ns if isinstance(ns, list) else [ns]
        var_items = sorted((entry.get("vars") or {}).items())
        names = [k for k, _ in var_items]
        for n in ns:
            n = int(n)
            if n < 1:
                raise UsageError("N must be positive")
            for combo in itertools.product(*[v if isinstance(v, list) else [v] for _, v in var_items]):
                env = {"N": n, **dict(zip(names, combo))}
                if isinstance(probs, list):
                    if len(probs) != n:
                        raise UsageError(f"grid entry lists {len(probs)} probabilities for N={n}")
                    row = [eval_formula(p, {**env, "i": i + 1}) for i, p in enumerate(probs)]
                else:
                    row = [eval_formula(probs, {**env, "i": i + 1}) for i in range(n)]
                row = [round(p, 12) for p in row]
                for p in row:
                    if not 0.0 <= p <= 1.0:
                        raise UsageError(f"probability {p} outside [0, 1] in grid entry {entry!r}")
                grid.append(tuple(row))
    if not grid:
        raise UsageError("grid is empty")
    return grid


# -------------------------------------------------------------- experiment


@dataclass(frozen=True)
class SchedulerEntry:
    name: str
    m: int | None = None
    tol: float = 1e-9
    gamma: float = 0.01

    def __post_init__(self) -> None:
        if self.name not in SCHEDULERS:
            raise UsageError(f"unknown scheduler {self.name!r}; choose from {', '.join(SCHEDULERS)}")
        if self.m is None and self.name in DEFAULT_M:
            object.__setattr__(self, "m", DEFAULT_M[self.name])


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    schedulers: tuple[SchedulerEntry, ...]
    grid: tuple[tuple[float, ...], ...]
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    warmup: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise UsageError("horizon must be at least 1 slot")
        if not 0 <= self.warmup < self.horizon:
            raise UsageError("warmup must lie in [0, horizon)")
        if not self.schedulers:
            raise UsageError("no schedulers selected")
        if not self.grid:
            raise UsageError("grid is empty")

    def manifest(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "schedulers": [asdict(s) for s in self.schedulers],
            "grid": [list(p) for p in self.grid],
            "horizon": self.horizon,
            "seed": self.seed,
            "warmup": self.warmup,
        }


@dataclass(frozen=True)
class FigureRecipe:
    name: str
    description: str
    grid: tuple[dict, ...]
    schedulers: tuple[str | dict, ...]
    horizon: int = DEFAULT_HORIZON


_MAIN = ("structural_mdp", "index", "mdp_online", "index_online", *BASELINES)
_P_GRID = [round(0.1 * k, 1) for k in range(1, 10)]

RECIPE_TABLE: dict[str, FigureRecipe] = {
    "fig3_switch_map": FigureRecipe(
        "fig3_switch_map",
        "switch maps at lam=(1,1), m=10",
        ({"N": 2, "probs": [0.9, 0.9]}, {"N": 2, "probs": [0.9, 0.5]}),
        ({"name": "structural_mdp", "m": 10},),
    ),
    "fig5": FigureRecipe(
        "fig5", "N=2, p1=0.6, p2 in 0.1..0.9",
        ({"N": 2, "probs": [0.6, "p"], "vars": {"p": _P_GRID}},), _MAIN,
    ),
    "fig6": FigureRecipe(
        "fig6", "N=2, p1=0.8, p2 in 0.1..0.9",
        ({"N": 2, "probs": [0.8, "p"], "vars": {"p": _P_GRID}},), _MAIN,
    ),
    "fig7": FigureRecipe(
        "fig7", "equal rates p in 0.1..0.9 for N=2,3,4",
        ({"N": [2, 3, 4], "probs": "p", "vars": {"p": _P_GRID}},), _MAIN,
    ),
    "fig8": FigureRecipe(
        "fig8", "N=2..12 with p_i=1/N (index schedulers only)",
        ({"N": list(range(2, 13)), "probs": "1/N"},),
        ("index", "index_online", *BASELINES),
    ),
    "fig9_buffer": FigureRecipe(
        "fig9_buffer", "N=2, equal p in 0.4..0.9, with and without buffers",
        ({"N": 2, "probs": "p", "vars": {"p": [0.4, 0.5, 0.6, 0.7, 0.8, 0.9]}},),
        ("structural_mdp", "buffered_mdp"),
    ),
}


def _scheduler_entries(items: Sequence[Any]) -> tuple[SchedulerEntry, ...]:
    out = []
    for item in items:
        if isinstance(item, str):
            out.append(SchedulerEntry(item))
        elif isinstance(item, dict) and "name" in item:
            extra = set(item) - {"name", "m", "tol", "gamma"}
            if extra:
                raise UsageError(f"unknown scheduler parameters {sorted(extra)}")
            out.append(SchedulerEntry(**item))
        else:
            raise UsageError(f"bad scheduler entry {item!r}")
    return tuple(out)


def load_config(path: str | Path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a mapping")
    known = {"name", "schedulers", "grid", "horizon", "seed", "warmup", "jobs", "recipe"}
    if set(data) - known:
        raise UsageError(f"unknown config keys {sorted(set(data) - known)}")
    return data


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    data: dict[str, Any] = load_config(args.config) if args.config else {}
    recipe_name = args.recipe or data.get("recipe")
    if recipe_name:
        if recipe_name not in RECIPE_TABLE:
            raise UsageError(f"unknown recipe {recipe_name!r}; choose from {', '.join(RECIPES)}")
        r = RECIPE_TABLE[recipe_name]
        base = {"name": r.name, "schedulers": list(r.schedulers), "grid": list(r.grid), "horizon": r.horizon}
        base.update({k: v for k, v in data.items() if k != "recipe"})
        data = base
    if getattr(args, "probs", None):
        data["grid"] = [{"probs": [float(p) for p in args.probs.split(",")]}]
        data.setdefault("name", "adhoc")
    if "grid" not in data:
        raise UsageError("nothing to run: give --recipe, --config or --probs")
    schedulers = list(data.get("schedulers") or [])
    if args.policy:
        schedulers = [s.strip() for s in args.policy.split(",") if s.strip()]
    if not schedulers:
        raise UsageError("no schedulers selected (use --policy or the config's 'schedulers')")
    entries = _scheduler_entries(schedulers)
    if args.m is not None:
        entries = tuple(replace(e, m=args.m) if e.m is not None else e for e in entries)
    if args.gamma is not None:
        entries = tuple(replace(e, gamma=args.gamma) for e in entries)
    horizon = args.horizon if args.horizon is not None else int(data.get("horizon", DEFAULT_HORIZON))
    seed = args.seed if args.seed is not None else int(data.get("seed", 0))
    jobs = args.jobs if args.jobs is not None else int(data.get("jobs", 1))
    return ExperimentSpec(
        name=str(data.get("name", "experiment")),
        schedulers=entries,
        grid=tuple(expand_grid(data["grid"])),
        horizon=horizon,
        seed=seed,
        warmup=int(data.get("warmup", 0)),
        jobs=jobs,
    )


# --------------------------------------------------------------- artifacts


def code_version() -> str:
    """sha256 over the package sources (file names and bytes)."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def effective_m(requested: int, n: int, buffered: bool, budget: int = STATE_BUDGET) -> int:
    """Largest ``m <= requested`` whose state space fits ``budget``."""
    m = requested
    radix = (lambda m: m + 1) if buffered else (lambda m: 2)
    while m > n + 1 and m**n * radix(m) ** n > budget:
        m -= 1
    if m <= n:
        raise UsageError(f"truncation m={m} must exceed the number of users N={n} (m > N)")
    return m


def artifact_stem(n: int, m: int, probs: Sequence[float], buffered: bool) -> str:
    tag = "-".join(repr(float(p)) for p in probs)
    return f"policy_N{n}_m{m}_p{tag}" + ("_buffered" if buffered else "")


def artifact_paths(directory: Path, n, m, probs, buffered) -> tuple[Path, Path]:
    stem = artifact_stem(n, m, probs, buffered)
    return directory / f"{stem}.csv", directory / f"{stem}.json"


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_policy_artifact(cfg: SolveConfig, directory: Path) -> tuple[Path, Path, Any]:
    """Solve ``cfg`` and write ``<stem>.csv`` (``ordinal,action``) plus ``<stem>.json``."""
    result = solve(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = artifact_paths(directory, cfg.n, cfg.m, cfg.probs, cfg.buffered)
    csv_path.write_text(result.policy.to_csv())
    manifest = {
        "kind": "policy",
        "N": cfg.n,
        "m": cfg.m,
        "probs": [float(p) for p in cfg.probs],
        "buffered": cfg.buffered,
        "method": cfg.method,
        "tol": cfg.tol,
        "max_iters": cfg.max_iters,
        "iterations": result.iterations,
        "converged": result.converged,
        "span": result.span,
        "average_cost": result.average_cost,
        "gain_bounds": list(result.gain_bounds),
        "table": csv_path.name,
        "table_sha256": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
        "code_version": code_version(),
    }
    json_path.write_text(_dump_json(manifest))
    return csv_path, json_path, result


def load_policy_artifact(csv_path: Path, n: int, m: int, buffered: bool) -> PolicyTable:
    space = BufferedStateSpace(n, m) if buffered else TruncatedStateSpace(n, m)
    return PolicyTable.from_csv(Path(csv_path).read_text(), space)


@dataclass(frozen=True)
class PolicyFactory:
    """Picklable scheduler factory so sweeps can run in worker processes."""

    entry: SchedulerEntry
    artifacts: str = "artifacts"

    def __call__(self, probs: tuple[float, ...]):
        name, n = self.entry.name, len(probs)
        if name in TABLE_SCHEDULERS:
            buffered = TABLE_SCHEDULERS[name]
            m = effective_m(self.entry.m, n, buffered)
            csv_path, _ = artifact_paths(Path(self.artifacts), n, m, probs, buffered)
            table = load_policy_artifact(csv_path, n, m, buffered)
            return BufferedMDPPolicy(table) if buffered else StructuralMDPPolicy(table)
        if name == "index":
            return IndexPolicy(probs)
        if name == "index_online":
            return IndexOnlinePolicy(n)
        if name == "mdp_online":
            return MDPOnlinePolicy(n, effective_m(self.entry.m, n, False), self.entry.gamma)
        if name == "always_idle":
            return AlwaysIdle(n)
        return BaselinePolicy(name, n)


def _solve_hint(n, m, probs, buffered, tol, artifacts) -> str:
    cmd = f"aoisched solve --probs {','.join(repr(float(p)) for p in probs)} --m {m} --artifacts {artifacts}"
    if tol != 1e-9:
        cmd += f" --tol {tol}"
    return cmd + (" --buffered" if buffered else "")


def ensure_artifacts(spec: ExperimentSpec, artifacts: Path, solve_missing: bool, log=print) -> None:
    for probs in spec.grid:
        for entry in spec.schedulers:
            if entry.name not in TABLE_SCHEDULERS:
                continue
            buffered = TABLE_SCHEDULERS[entry.name]
            n = len(probs)
            m = effective_m(entry.m, n, buffered)
            csv_path, _ = artifact_paths(artifacts, n, m, probs, buffered)
            if csv_path.exists():
                continue
            if not solve_missing:
                raise UsageError(
                    f"missing policy artifact {csv_path}; create it with\n  "
                    f"{_solve_hint(n, m, probs, buffered, entry.tol, artifacts)}\n"
                    "or rerun with --solve-missing"
                )
            cfg = SolveConfig(tuple(probs), m, tol=entry.tol, buffered=buffered)
            _, _, res = write_policy_artifact(cfg, artifacts)
            log(f"solved {csv_path.name}: average cost {res.average_cost:.6f} ({res.iterations} iterations)")
            if not res.converged:
                raise UsageError(f"solve for {probs} (m={m}) did not converge; span {res.span:.3e}")


# ------------------------------------------------------------------ commands


def cmd_solve(args: argparse.Namespace) -> int:
    artifacts = Path(args.artifacts)
    if args.probs:
        probs = tuple(float(p) for p in args.probs.split(","))
        m = args.m if args.m is not None else DEFAULT_M["structural_mdp"]
        if m <= len(probs):
            raise UsageError(f"truncation m={m} must exceed the number of users N={len(probs)} (m > N)")
        cfg = SolveConfig(probs, m, tol=args.tol, max_iters=args.max_iters, buffered=args.buffered)
        csv_path, json_path, res = write_policy_artifact(cfg, artifacts)
        status = "converged" if res.converged else "NOT converged"
        print(f"{csv_path}: average cost {res.average_cost:.9f}; {status} after {res.iterations} iterations (span {res.span:.3e})")
        return 0 if res.converged else 1
    spec = build_spec(args)
    ensure_artifacts(spec, artifacts, solve_missing=True)
    return 0


def _switch_map_csv(spec: ExperimentSpec, artifacts: Path) -> str:
    lines = ["p_1,p_2,x_1,x_2,action"]
    for probs in spec.grid:
        entry = spec.schedulers[0]
        m = effective_m(entry.m, len(probs), False)
        csv_path, _ = artifact_paths(artifacts, len(probs), m, probs, False)
        grid = switch_map(load_policy_artifact(csv_path, len(probs), m, False), (1, 1))
        for x2 in range(m):
            for x1 in range(m):
                lines.append(f"{probs[0]!r},{probs[1]!r},{x1 + 1},{x2 + 1},{int(grid[x2, x1])}")
    return "\n".join(lines) + "\n"


def _summary(rows: Sequence[SweepRow]) -> str:
    out = [f"{'policy':<16} {'probs':<28} {'avg_total_age':>14}"]
    for r in rows:
        probs = ",".join(f"{p:g}" for p in r.probs)
        val = f"{r.metrics.avg_total_age:14.4f}" if r.metrics else f"{'ERROR':>14}"
        out.append(f"{r.policy:<16} {probs:<28} {val}")
    return "\n".join(out)


def cmd_run(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    artifacts = Path(args.artifacts)
    out = Path(args.out)
    ensure_artifacts(spec, artifacts, args.solve_missing)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.recipe == "fig3_switch_map":
        for e in spec.schedulers:
            if e.name != "structural_mdp":
                raise UsageError("fig3_switch_map only supports structural_mdp")
        body = _switch_map_csv(spec, artifacts)
    else:
        specs = [
            SchedulerSpec(e.name, PolicyFactory(e, str(artifacts)), buffered=e.name == "buffered_mdp")
            for e in spec.schedulers
        ]
        t0 = time.perf_counter()
        rows = sweep(specs, spec.grid, spec.horizon, spec.seed, spec.warmup, spec.jobs)
        body = rows_to_csv(rows)
        print(_summary(rows))
        print(f"{len(rows)} rows in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        for r in rows:
            if r.error:
                print(f"cell {r.policy} {r.probs} failed: {r.error}", file=sys.stderr)
    out.write_text(body)
    manifest = {
        "kind": "run",
        "recipe": args.recipe,
        "spec": spec.manifest(),
        "output": out.name,
        "output_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "code_version": code_version(),
    }
    out.with_name(out.name + ".manifest.json").write_text(_dump_json(manifest))
    print(f"wrote {out}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    from aoisched import verify

    if args.list:
        for c in verify.REGISTRY:
            print(f"{c.id:<40} {c.description}")
        return 0
    results = verify.run_checks(args.only, progress=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    for r in failed:
        print(f"FAILED {r.id}: {r.detail}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoisched", description="Age-of-information scheduling experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--recipe", choices=RECIPES)
        p.add_argument("--probs", help="comma-separated arrival probabilities (single grid cell)")
        p.add_argument("--policy", help="comma-separated scheduler names")
        p.add_argument("--m", type=int, help="truncation for table and online schedulers")
        p.add_argument("--gamma", type=float, help="online step-size scale a in a/t")
        p.add_argument("--seed", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--artifacts", default="artifacts", help="directory of policy artifacts")

    p_solve = sub.add_parser("solve", help="solve truncated MDPs and write policy artifacts")
    experiment_flags(p_solve)
    p_solve.add_argument("--tol", type=float, default=1e-9)
    p_solve.add_argument("--max-iters", type=int, default=100_000)
    p_solve.add_argument("--buffered", action="store_true")
    p_solve.set_defaults(func=cmd_solve)

    p_run = sub.add_parser("run", help="simulate schedulers over a grid and write CSV")
    experiment_flags(p_run)
    p_run.add_argument("--out", default="results.csv")
    p_run.add_argument("--solve-missing", action="store_true", help="solve absent policy artifacts first")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="run every property and oracle check")
    p_verify.add_argument("--only", help="substring filter on check ids")
    p_verify.add_argument("--list", action="store_true")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
