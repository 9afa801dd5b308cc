import csv
import io

import numpy as np
import pytest

from aoisched.core import ArrivalModel, derive_seed
from aoisched.schedulers import (
    AlwaysIdle,
    BaselinePolicy,
    FunctionPolicy,
    IndexPolicy,
    StructuralMDPPolicy,
)
from aoisched.mdp import SolveConfig, solve
from aoisched.sim import (
    SchedulerSpec,
    SimConfig,
    SimulationError,
    csv_header,
    decision_agreement,
    rows_to_csv,
    run,
    run_buffered,
    simulate_trajectory,
    sweep,
)

PAIR_GRID = [(p1, p2) for p1 in (0.3, 0.6, 0.9) for p2 in (0.3, 0.6, 0.9)]


def index_factory(probs):
    return IndexPolicy(probs)


def max_age_factory(probs):
    return BaselinePolicy("max_age_arrival", len(probs))


def broken_factory(probs):
    if probs[0] > 0.5:
        raise RuntimeError("cannot build")
    return AlwaysIdle(len(probs))


@pytest.mark.parametrize("horizon", [1, 2, 10, 1000])
@pytest.mark.parametrize("engine", ["auto", "python"])
def test_always_idle_single_user(horizon, engine):
    # ages after slot t are t + 2, so the mean over T slots is (T + 3) / 2
    m = run(AlwaysIdle(1), SimConfig(ArrivalModel((0.5,)), horizon, engine=engine))
    assert m.avg_total_age == (horizon + 3) / 2
    assert m.update_counts == (0,)


def test_max_age_alternates_with_certain_arrivals():
    m = run(BaselinePolicy("max_age_arrival", 2), SimConfig(ArrivalModel((1.0, 1.0)), 100_000))
    assert m.avg_total_age == pytest.approx(3.0, abs=0.01)


def test_index_single_user_half_rate():
    m = run(IndexPolicy((0.5,)), SimConfig(ArrivalModel((0.5,)), 1_000_000, seed=5))
    assert m.avg_total_age == pytest.approx(2.0, abs=0.02)


def test_update_only_on_arrival():
    # serving a user without a packet changes nothing
    pol = FunctionPolicy(1, lambda obs, t: 1, "always_serve")
    traj = simulate_trajectory(pol, SimConfig(ArrivalModel((0.5,)), 300, seed=2))
    for (obs, _), (nxt, _) in zip(traj, traj[1:]):
        assert nxt.ages[0] == (1 if obs.arrivals[0] else obs.ages[0] + 1)


def test_buffered_equals_plain_with_certain_arrivals():
    cfg = SimConfig(ArrivalModel((1.0, 1.0)), 5000)
    plain = run(BaselinePolicy("max_age_arrival", 2), cfg)
    buf = run_buffered(BaselinePolicy("max_age_arrival", 2), SimConfig(ArrivalModel((1.0, 1.0)), 5000, buffered=True))
    assert plain.avg_total_age == buf.avg_total_age == 3.0


def test_buffered_empty_buffer_is_a_no_op():
    pol = FunctionPolicy(1, lambda obs, t: 1, "always_serve")
    cfg = SimConfig(ArrivalModel((0.0,)), 50, buffered=True, engine="python")
    m = run_buffered(pol, cfg)
    assert m.update_counts == (0,)
    assert m.avg_total_age == (50 + 3) / 2


def test_buffered_delivers_stale_packet():
    # serving delivers the buffered packet, so the next age is its buffer age plus one
    pol = FunctionPolicy(1, lambda obs, t: 1, "always_serve")
    cfg = SimConfig(ArrivalModel((0.5,)), 200, seed=1, buffered=True)
    traj = simulate_trajectory(pol, cfg)
    for (obs, _), (nxt, _) in zip(traj, traj[1:]):
        y = obs.buffer_ages[0]
        if y < 2**62:
            assert nxt.ages[0] == y + 1


def test_run_buffered_requires_buffered_config():
    with pytest.raises(ValueError):
        run_buffered(AlwaysIdle(1), SimConfig(ArrivalModel((0.5,)), 10))


@pytest.mark.parametrize("bad", [3, -1, 1.5, None])
def test_invalid_decision_names_the_slot(bad):
    pol = FunctionPolicy(2, lambda obs, t: bad if t == 7 else 0, "bad")
    cfg = SimConfig(ArrivalModel((0.5, 0.5)), 20, engine="python")
    with pytest.raises(SimulationError) as info:
        run(pol, cfg)
    assert info.value.slot == 7


def test_policy_exception_becomes_simulation_error():
    def boom(obs, t):
        if t == 4:
            raise KeyError("x")
        return 0

    with pytest.raises(SimulationError) as info:
        run(FunctionPolicy(1, boom), SimConfig(ArrivalModel((0.5,)), 10))
    assert info.value.slot == 4


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(ArrivalModel((0.5,)), 0)
    with pytest.raises(ValueError):
        SimConfig(ArrivalModel((0.5,)), 10, warmup=10)
    with pytest.raises(ValueError):
        SimConfig(ArrivalModel((0.5,)), 10, initial_ages=(1, 2))
    with pytest.raises(ValueError):
        run(AlwaysIdle(3), SimConfig(ArrivalModel((0.5, 0.5)), 10))


def test_same_seed_same_metrics_different_seed_differs():
    model = ArrivalModel((0.4, 0.7))
    a = run(BaselinePolicy("random_arrival", 2), SimConfig(model, 20_000, seed=3))
    b = run(BaselinePolicy("random_arrival", 2), SimConfig(model, 20_000, seed=3))
    c = run(BaselinePolicy("random_arrival", 2), SimConfig(model, 20_000, seed=4))
    assert a == b
    assert a != c


def test_warmup_and_trace():
    cfg = SimConfig(ArrivalModel((0.5,)), 10, warmup=4, trace_every=3)
    m = run(AlwaysIdle(1), cfg)
    assert m.slots == 6
    # ages after slots 4..9 are 6..11
    assert m.avg_total_age == sum(range(6, 12)) / 6
    assert m.trace == (2, 5, 8, 11)


def test_average_cost_adds_update_charge():
    m = run(BaselinePolicy("max_age_arrival", 2), SimConfig(ArrivalModel((1.0, 1.0)), 1000))
    assert m.average_cost(2.0) == pytest.approx(m.avg_total_age + 2.0)


def test_decision_agreement_self_is_one():
    model = ArrivalModel((0.6, 0.3))
    cfg = SimConfig(model, 3000, seed=1)
    assert decision_agreement(IndexPolicy(model.probs), IndexPolicy(model.probs), cfg, start=100) == 1.0
    idle = decision_agreement(IndexPolicy(model.probs), AlwaysIdle(2), cfg)
    assert 0.0 < idle < 1.0


def test_sweep_shape_and_order():
    specs = [SchedulerSpec("index", index_factory), SchedulerSpec("max_age_arrival", max_age_factory)]
    rows = sweep(specs, PAIR_GRID, 2000, seed=11)
    assert len(rows) == 18
    assert [r.policy for r in rows[:4]] == ["index", "max_age_arrival", "index", "max_age_arrival"]
    assert sum(r.policy == "index" for r in rows) == 9
    assert all(r.error is None for r in rows)


def test_sweep_cell_equals_direct_run():
    specs = [SchedulerSpec("index", index_factory)]
    rows = sweep(specs, PAIR_GRID, 3000, seed=11, warmup=100)
    gi = 4
    direct = run(IndexPolicy(PAIR_GRID[gi]), SimConfig(ArrivalModel(PAIR_GRID[gi]), 3000, derive_seed(11, gi), 100))
    assert rows[gi].metrics == direct
    assert rows[gi].seed == derive_seed(11, gi)


def test_sweep_uses_common_random_numbers():
    # both rules serve the only user with a packet when N = 1, so they see identical paths
    grid = [(0.3,), (0.8,)]
    specs = [SchedulerSpec("index", index_factory), SchedulerSpec("max_age_arrival", max_age_factory)]
    rows = sweep(specs, grid, 2000, seed=2)
    assert rows[0].metrics == rows[1].metrics
    assert rows[2].metrics == rows[3].metrics


def test_sweep_collects_cell_errors():
    specs = [SchedulerSpec("fragile", broken_factory)]
    rows = sweep(specs, PAIR_GRID, 500)
    bad = [r for r in rows if r.error]
    assert len(bad) == 6
    assert all("cannot build" in r.error for r in bad)
    text = rows_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert sum(1 for r in parsed if r["error"]) == 6
    assert all(r["avg_total_age"] == "" for r in parsed if r["error"])


def test_parallel_sweep_matches_serial():
    specs = [SchedulerSpec("index", index_factory), SchedulerSpec("max_age_arrival", max_age_factory)]
    a = sweep(specs, PAIR_GRID[:4], 2000, seed=3, jobs=1)
    b = sweep(specs, PAIR_GRID[:4], 2000, seed=3, jobs=2)
    assert [r.metrics for r in a] == [r.metrics for r in b]


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        sweep([SchedulerSpec("index", index_factory)], [], 100)


def test_csv_header_and_padding():
    assert csv_header(2) == [
        "policy", "N", "p_1", "p_2", "horizon", "seed", "buffered", "avg_total_age",
        "age_1", "age_2", "updates_1", "updates_2", "error",
    ]
    specs = [SchedulerSpec("index", index_factory)]
    rows = sweep(specs, [(0.5,), (0.5, 0.5)], 200)
    parsed = list(csv.reader(io.StringIO(rows_to_csv(rows))))
    assert parsed[0] == csv_header(2)
    assert parsed[1][3] == "" and parsed[2][3] == "0.5"


def test_truncated_table_policy_runs_past_truncation():
    table = solve(SolveConfig((0.2, 0.2), 6)).policy
    m = run(StructuralMDPPolicy(table), SimConfig(ArrivalModel((0.2, 0.2)), 20_000, seed=1))
    assert np.isfinite(m.avg_total_age) and m.avg_total_age > 2
