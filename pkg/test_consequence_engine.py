import math

import numpy as np
import pytest

from arena import Arena, Pose, RobotBody
from config import CEConfig
from consequence_engine import (
    CEBudget,
    CandidateAction,
    ConsequenceEngine,
    ce_cycle,
    danger,
    evaluate,
    generate_actions,
    simulate_action,
    simulate_actions,
    snapshot,
)
from geometry import wrap_angle
from telemetry import EventLog


def lone_robot(pose, goal=None):
    arena = Arena()
    arena.add_robot(RobotBody(0), pose, goal=goal)
    return arena


def test_generate_actions():
    actions = generate_actions(CEBudget(k=30), 0.3)
    assert len(actions) == 30
    assert actions[-1].kind == "stop"
    assert abs(actions[0].target - 0.3) < 1e-12
    spacing = 2 * math.pi / 29
    assert abs(actions[1].heading_change(0.3) - spacing) < 1e-9


def test_budget_validation():
    with pytest.raises(ValueError):
        CEBudget(k=1)
    with pytest.raises(ValueError):
        CEBudget(horizon=0.5, cycle_period=0.5)
    with pytest.raises(ValueError):
        CandidateAction("hold_heading", 0)


def test_goal_straight_ahead_keeps_heading():
    arena = lone_robot(Pose(0.0, 0.0, 0.0), goal=(0.5, 0.0))
    result = ce_cycle(arena, 0, CEBudget(k=30))
    assert result.selected.index == 0
    record = result.selected_record
    assert not record.outcome.is_collision
    assert record.goal_reached
    assert len(result.records) == 30


def test_wall_ahead_without_goal_prefers_stop():
    arena = lone_robot(Pose(1.0, 0.0, 0.0))
    result = ce_cycle(arena, 0, CEBudget(k=30))
    ahead = result.records[0]
    assert ahead.outcome.kind == "collision" and ahead.outcome.with_ == "wall"
    # 0.213 m to contact at 0.1 m/s
    assert abs(ahead.outcome.time_to_contact - 2.13) < 1e-6
    assert result.selected.kind == "stop"
    assert evaluate(result.selected_record) == 0.0
    assert danger(ahead) > 100.0


def test_head_on_robot_is_avoided():
    arena = Arena()
    arena.add_robot(RobotBody(0), Pose(-0.8, 0.0, 0.0), goal=(0.8, 0.0))
    arena.add_robot(RobotBody(1), Pose(0.8, 0.0, math.pi), goal=(-0.8, 0.0))
    result = ce_cycle(arena, 0, CEBudget(k=30), other_model="conspecific")
    assert result.records[0].outcome.with_ == 1
    assert not result.selected_record.outcome.is_collision
    assert result.selected.index != 0


def test_batch_and_single_simulation_agree():
    arena = lone_robot(Pose(0.2, -0.1, 0.7), goal=(-0.6, 0.5))
    snap = snapshot(arena, 0)
    budget = CEBudget(k=12)
    actions = generate_actions(budget, snap.self_state.theta)
    batch = simulate_actions(snap, actions, budget=budget)
    for action in (actions[0], actions[5], actions[-1]):
        single = simulate_action(snap, action, budget=budget)
        assert np.allclose(single.trajectory, batch[action.index].trajectory)
        assert single.outcome.kind == batch[action.index].outcome.kind
        assert single.outcome.with_ == batch[action.index].outcome.with_


def test_prediction_matches_the_world_for_one_cycle():
    arena = lone_robot(Pose(-0.5, 0.0, 0.0), goal=(0.5, 0.0))
    engine = ConsequenceEngine(0, CEConfig(k=30))
    result = engine.cycle(arena)
    steps = int(round(engine.budget.cycle_period / arena.dt))
    for _ in range(steps):
        arena.step({0: engine.command(arena)})
    predicted = result.selected_record.trajectory[int(round(engine.budget.cycle_period / engine.budget.inner_dt))]
    pose = arena.robot(0).pose
    assert abs(pose.x - predicted[0]) < 1e-9 and abs(pose.y - predicted[1]) < 1e-9


def test_trace_and_short_term_memory():
    log = EventLog()
    seen = []
    arena = lone_robot(Pose(0.0, 0.0, 0.0), goal=(0.3, 0.3))
    engine = ConsequenceEngine(0, CEConfig(k=10), log=log, trace=True, on_cycle=seen.append)
    engine.cycle(arena)
    engine.cycle(arena)
    traces = log.of_kind("ce_trace")
    assert [e["payload"]["cycle"] for e in traces] == [0, 1]
    assert len(traces[0]["payload"]["records"]) == 10
    assert len(engine.short_term) == 10
    assert [r.cycle_index for r in seen] == [0, 1]


def test_stop_selected_has_zero_length_trajectory():
    arena = lone_robot(Pose(1.0, 0.0, 0.0))
    result = ce_cycle(arena, 0, CEBudget(k=30))
    path = result.selected_record.trajectory
    assert np.allclose(path, path[0])


def brute_force_selection(snap, budget):
    """Simulate every candidate on its own, score it and pick the cheapest."""
    theta = snap.self_state.theta
    best = None
    for action in generate_actions(budget, theta):
        record = simulate_action(snap, action, budget=budget)
        cost = record.goal_distance
        if record.outcome.kind == "collision":
            cost += 100.0 * (1.0 + (budget.horizon - record.outcome.time_to_contact) / budget.horizon)
        turn = 0.0 if action.kind == "stop" else abs(wrap_angle(action.target - theta))
        key = (round(cost, 9), round(turn, 9), action.index)
        if best is None or key < best:
            best = key
    return best[2]


def random_arena(rng):
    while True:
        arena = Arena()
        for rid in range(int(rng.integers(1, 4))):
            pose = Pose(float(rng.uniform(-1.1, 1.1)), float(rng.uniform(-0.85, 0.85)),
                        float(rng.uniform(-math.pi, math.pi)))
            goal = (float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-0.8, 0.8)))
            arena.add_robot(RobotBody(rid), pose, goal=goal)
        if arena.penetration_free():
            return arena


def test_selection_matches_brute_force_evaluator():
    rng = np.random.default_rng(2024)
    budget = CEBudget(k=30)
    for _ in range(100):
        arena = random_arena(rng)
        result = ce_cycle(arena, 0, budget)
        assert result.selected.index == brute_force_selection(result.snapshot, budget)


def test_cycle_budget_from_traces():
    log = EventLog()
    arena = Arena(log=log)
    arena.add_robot(RobotBody(0), Pose(-0.8, 0.0, 0.0), goal=(0.8, 0.0))
    arena.add_robot(RobotBody(1), Pose(0.8, 0.1, math.pi), goal=(-0.8, 0.1))
    engines = {rid: ConsequenceEngine(rid, CEConfig(), log=log, trace=True) for rid in (0, 1)}
    cycle_steps = int(round(0.5 / arena.dt))
    for step in range(4 * cycle_steps):
        if step % cycle_steps == 0:
            for engine in engines.values():
                engine.cycle(arena)
        arena.step({rid: engine.command(arena) for rid, engine in engines.items()})

    traces = [e for e in log.of_kind("ce_trace") if e["payload"]["robot"] == 0]
    assert len(traces) == 4
    assert np.allclose(np.diff([e["t"] for e in traces]), 0.5)
    for trace in traces:
        assert trace["payload"]["horizon"] == 10.0
        records = trace["payload"]["records"]
        assert len(records) == 30
        assert all(len(record["trajectory"]) == 101 for record in records)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
