"""
Consequence Engine: a robot's internal simulation of itself and the robots
around it, run as a generate-and-test loop.

Each cycle the robot snapshots the world, generates K candidate actions,
simulates every one of them for the horizon with the same kinematics and
controller the real robots use, scores the outcomes and picks the cheapest.
All K candidates are integrated together as numpy arrays.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from arena import Arena, Wall
from config import CEConfig
from controller import controller_command
from geometry import integrate_unicycle, sweep_circle_circle, sweep_circle_segment, wrap_angle
from telemetry import EventLog

logger = logging.getLogger(__name__)

# Costs closer than this are treated as equal before tie-breaking
COST_RESOLUTION = 9


@dataclass(frozen=True)
class ActorState:
    id: int
    x: float
    y: float
    theta: float
    v: float
    w: float
    radius: float
    goal: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class CESnapshot:
    robot_id: int
    time: float
    actors: Tuple[ActorState, ...]
    walls: Tuple[Wall, ...]
    w_max: float

    @property
    def self_state(self) -> ActorState:
        for actor in self.actors:
            if actor.id == self.robot_id:
                return actor
        raise LookupError(f"Snapshot has no state for robot {self.robot_id}")

    @property
    def others(self) -> Tuple[ActorState, ...]:
        return tuple(actor for actor in self.actors if actor.id != self.robot_id)


@dataclass(frozen=True)
class CandidateAction:
    kind: str
    index: int
    target: Optional[float] = None
    # Travel cap in metres (FORWARD-style actions decoded from stories)
    max_distance: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("hold_heading", "stop"):
            raise ValueError(f"Unknown action kind '{self.kind}'")
        if self.kind == "hold_heading" and self.target is None:
            raise ValueError("hold_heading needs a target heading")

    def heading_change(self, current_heading: float) -> float:
        if self.kind == "stop":
            return 0.0
        return abs(wrap_angle(self.target - current_heading))

    def to_record(self) -> dict:
        return {"kind": self.kind, "index": self.index, "target": self.target, "max_distance": self.max_distance}


@dataclass(frozen=True)
class Outcome:
    kind: str
    with_: Optional[Union[str, int]] = None
    time_to_contact: Optional[float] = None

    @property
    def is_collision(self) -> bool:
        return self.kind == "collision"

    def to_record(self) -> dict:
        return {"kind": self.kind, "with": self.with_, "time_to_contact": self.time_to_contact}


SAFE = Outcome("safe")


@dataclass(frozen=True, eq=False)
class ConsequenceRecord:
    action: CandidateAction
    trajectory: np.ndarray
    outcome: Outcome
    goal_distance: float
    start_heading: float
    travelled: float
    halted: bool
    goal_reached: bool
    horizon: float
    cost: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "action": self.action.to_record(),
            "trajectory": self.trajectory.tolist(),
            "outcome": self.outcome.to_record(),
            "goal_distance": self.goal_distance,
            "cost": self.cost,
        }


@dataclass(frozen=True)
class CEBudget:
    k: int = 30
    horizon: float = 10.0
    cycle_period: float = 0.5
    inner_dt: float = 0.1

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("K must be at least 2")
        if self.horizon <= self.cycle_period:
            raise ValueError("horizon must exceed cycle_period")
        if self.inner_dt > self.cycle_period:
            raise ValueError("inner_dt must not exceed cycle_period")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.inner_dt))

    @classmethod
    def from_config(cls, config: CEConfig) -> "CEBudget":
        return cls(config.k, config.horizon, config.cycle_period, config.inner_dt)


@dataclass(frozen=True)
class EvaluationWeights:
    w_collision: float = 100.0
    w_goal: float = 1.0


def snapshot(arena: Arena, robot_id: int, tracker_noise: float = 0.0,
             rng: Optional[np.random.Generator] = None) -> CESnapshot:
    """
    Immutable copy of what the object tracker-localiser reports to one robot:
    every active robot's pose, velocity and goal, plus the walls.
    """
    me = arena.robot(robot_id)
    if tracker_noise > 0.0 and rng is None:
        rng = arena.seeds.robot_stream(robot_id, "tracker")
    actors = []
    for rid in arena.active_ids():
        state = arena.robot(rid)
        x, y, theta = state.pose.x, state.pose.y, state.pose.theta
        if tracker_noise > 0.0:
            dx, dy, dth = rng.normal(0.0, tracker_noise, size=3)
            x, y, theta = x + dx, y + dy, wrap_angle(theta + dth)
        actors.append(
            ActorState(rid, x, y, theta, state.v, state.w, state.body.radius,
                       tuple(state.goal) if state.goal is not None else None)
        )
    return CESnapshot(robot_id, arena.time, tuple(actors), tuple(arena.walls), me.body.max_turn_rate)


def generate_actions(budget: CEBudget, current_heading: float) -> List[CandidateAction]:
    """K-1 evenly spaced held headings (the first equal to the current one) plus stop."""
    n = budget.k - 1
    actions = [
        CandidateAction("hold_heading", j, wrap_angle(current_heading + j * 2.0 * math.pi / n))
        for j in range(n)
    ]
    actions.append(CandidateAction("stop", n))
    return actions


def _predict_others(snap: CESnapshot, budget: CEBudget, other_model: str, v_nom: float,
                    goal_tolerance: float) -> List[np.ndarray]:
    """Positions (n_steps + 1, 2) of every other actor; they do not react to self."""
    dt = budget.inner_dt
    paths = []
    for other in snap.others:
        x, y, theta = other.x, other.y, other.theta
        path = np.empty((budget.n_steps + 1, 2))
        path[0] = (x, y)
        for i in range(budget.n_steps):
            if other_model == "conspecific" and other.goal is not None:
                heading = math.atan2(other.goal[1] - y, other.goal[0] - x)
                v, w = controller_command(x, y, theta, heading, v_nom, snap.w_max, dt,
                                          goal_x=other.goal[0], goal_y=other.goal[1],
                                          goal_tolerance=goal_tolerance)
            else:
                v, w = other.v, other.w
            x, y, theta = (float(c) for c in integrate_unicycle(x, y, theta, v, w, dt))
            path[i + 1] = (x, y)
        paths.append(path)
    return paths


def simulate_actions(
    snap: CESnapshot,
    actions: Sequence[CandidateAction],
    other_model: str = "conspecific",
    budget: Optional[CEBudget] = None,
    v_nom: float = 0.1,
    goal_tolerance: float = 0.05,
    goal_seeking: bool = True,
) -> List[ConsequenceRecord]:
    """
    Forward-simulate every action for the horizon at inner_dt.

    Self follows the shared heading controller (stop = stand still) and
    holds position after its first contact. Others follow other_model.
    With goal_seeking=False the goal is only measured, never steered to.
    """
    budget = budget or CEBudget()
    me = snap.self_state
    dt = budget.inner_dt
    n_steps = budget.n_steps
    k = len(actions)

    is_stop = np.array([a.kind == "stop" for a in actions])
    target = np.array([me.theta if a.kind == "stop" else a.target for a in actions], dtype=float)
    max_distance = np.array(
        [np.inf if a.max_distance is None else a.max_distance for a in actions], dtype=float
    )

    x = np.full(k, me.x)
    y = np.full(k, me.y)
    theta = np.full(k, me.theta)
    travelled = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    contact_t = np.full(k, np.inf)
    contact_with: List[Optional[Union[str, int]]] = [None] * k
    last_v = np.zeros(k)
    last_w = np.zeros(k)
    trajectory = np.empty((n_steps + 1, k, 2))
    trajectory[0, :, 0] = x
    trajectory[0, :, 1] = y

    others = snap.others
    other_paths = _predict_others(snap, budget, other_model, v_nom, goal_tolerance)
    goal = me.goal if goal_seeking else None

    for i in range(n_steps):
        v, w = controller_command(
            x, y, theta, target, v_nom, snap.w_max, dt,
            goal_x=None if goal is None else goal[0],
            goal_y=None if goal is None else goal[1],
            goal_tolerance=goal_tolerance,
            remaining=max_distance - travelled,
        )
        moving = alive & ~is_stop
        v = np.where(moving, v, 0.0)
        w = np.where(moving, w, 0.0)
        nx, ny, ntheta = integrate_unicycle(x, y, theta, v, w, dt)
        dx, dy = nx - x, ny - y

        s_best = np.full(k, np.inf)
        hit_with = np.full(k, -1)
        for wall in snap.walls:
            s = sweep_circle_segment(x, y, dx, dy, me.radius, wall.x1, wall.y1, wall.x2, wall.y2)
            better = s < s_best
            s_best = np.where(better, s, s_best)
            hit_with = np.where(better, -2, hit_with)
        for j, other in enumerate(others):
            o0, o1 = other_paths[j][i], other_paths[j][i + 1]
            s = sweep_circle_circle(x, y, dx - (o1[0] - o0[0]), dy - (o1[1] - o0[1]),
                                    o0[0], o0[1], me.radius + other.radius)
            better = s < s_best
            s_best = np.where(better, s, s_best)
            hit_with = np.where(better, j, hit_with)

        hit = alive & np.isfinite(s_best)
        frac = np.where(hit, s_best, 1.0)
        for idx in np.flatnonzero(hit):
            contact_t[idx] = i * dt + frac[idx] * dt
            contact_with[idx] = "wall" if hit_with[idx] == -2 else others[hit_with[idx]].id

        new_x = x + frac * dx
        new_y = y + frac * dy
        new_theta = np.where(hit, wrap_angle(theta + frac * w * dt), ntheta)
        travelled += np.hypot(new_x - x, new_y - y)
        x, y, theta = new_x, new_y, new_theta
        alive &= ~hit
        last_v, last_w = v, w
        trajectory[i + 1, :, 0] = x
        trajectory[i + 1, :, 1] = y

    records = []
    for idx, action in enumerate(actions):
        if np.isfinite(contact_t[idx]):
            outcome = Outcome("collision", contact_with[idx], float(contact_t[idx]))
        else:
            outcome = SAFE
        if me.goal is not None:
            goal_distance = math.hypot(me.goal[0] - x[idx], me.goal[1] - y[idx])
        else:
            goal_distance = 0.0
        records.append(
            ConsequenceRecord(
                action=action,
                trajectory=trajectory[:, idx, :].copy(),
                outcome=outcome,
                goal_distance=goal_distance,
                start_heading=me.theta,
                travelled=float(travelled[idx]),
                halted=bool(alive[idx] and not is_stop[idx] and abs(last_v[idx]) < 1e-9 and last_w[idx] == 0.0),
                goal_reached=bool(me.goal is not None and goal_distance < goal_tolerance),
                horizon=n_steps * dt,
            )
        )
    return records


def simulate_action(snap: CESnapshot, action: CandidateAction, other_model: str = "conspecific",
                    budget: Optional[CEBudget] = None, **kwargs) -> ConsequenceRecord:
    return simulate_actions(snap, [action], other_model, budget, **kwargs)[0]


def evaluate(record: ConsequenceRecord, weights: EvaluationWeights = EvaluationWeights()) -> float:
    """Collision urgency plus distance still to go at the horizon."""
    cost = weights.w_goal * record.goal_distance
    if record.outcome.is_collision:
        urgency = 1.0 + (record.horizon - record.outcome.time_to_contact) / record.horizon
        cost += weights.w_collision * urgency
    return float(cost)


def danger(record: ConsequenceRecord, weights: EvaluationWeights = EvaluationWeights()) -> float:
    """The evaluator with the goal term switched off."""
    return evaluate(record, EvaluationWeights(weights.w_collision, 0.0))


def selection_key(record: ConsequenceRecord) -> Tuple[float, float, int]:
    return (
        round(record.cost, COST_RESOLUTION),
        round(record.action.heading_change(record.start_heading), COST_RESOLUTION),
        record.action.index,
    )


@dataclass
class CycleResult:
    selected: CandidateAction
    records: List[ConsequenceRecord]
    snapshot: CESnapshot
    cycle_index: int = 0

    @property
    def selected_record(self) -> ConsequenceRecord:
        return self.records[self.selected.index]

    @property
    def simulated_time(self) -> float:
        return sum(record.horizon for record in self.records)


def ce_cycle(
    arena: Arena,
    robot_id: int,
    budget: Optional[CEBudget] = None,
    other_model: str = "conspecific",
    weights: EvaluationWeights = EvaluationWeights(),
    v_nom: float = 0.1,
    goal_tolerance: float = 0.05,
    tracker_noise: float = 0.0,
) -> CycleResult:
    """snapshot -> generate -> simulate -> evaluate -> select the cheapest action."""
    budget = budget or CEBudget()
    snap = snapshot(arena, robot_id, tracker_noise)
    actions = generate_actions(budget, snap.self_state.theta)
    records = simulate_actions(snap, actions, other_model, budget, v_nom, goal_tolerance)
    records = [replace(record, cost=evaluate(record, weights)) for record in records]
    best = min(records, key=selection_key)
    return CycleResult(best.action, records, snap)


class ConsequenceEngine:
    """
    Per-robot CE with short-term memory of the last cycle's what-ifs.

    Records from one cycle are dropped when the next one starts; an
    `on_cycle` hook (the autobiographical memory) sees them first.
    """

    def __init__(
        self,
        robot_id: int,
        config: Optional[CEConfig] = None,
        tracker_noise: float = 0.0,
        log: Optional[EventLog] = None,
        trace: bool = False,
        on_cycle: Optional[Callable[[CycleResult], None]] = None,
    ):
        self.robot_id = robot_id
        self.config = config or CEConfig()
        self.budget = CEBudget.from_config(self.config)
        self.weights = EvaluationWeights(self.config.w_collision, self.config.w_goal)
        self.tracker_noise = tracker_noise
        self.log = log
        self.trace = trace
        self.on_cycle = on_cycle
        self.cycles = 0
        self.short_term: List[ConsequenceRecord] = []
        self.current: Optional[CycleResult] = None

    def cycle(self, arena: Arena) -> CycleResult:
        self.short_term = []
        result = ce_cycle(
            arena,
            self.robot_id,
            self.budget,
            self.config.other_model,
            self.weights,
            self.config.v_nom,
            self.config.goal_tolerance,
            self.tracker_noise,
        )
        result.cycle_index = self.cycles
        self.cycles += 1
        self.short_term = list(result.records)
        self.current = result
        if self.on_cycle is not None:
            self.on_cycle(result)
        if self.trace and self.log is not None:
            self.log.emit(
                "ce_trace",
                arena.time,
                [self.robot_id],
                robot=self.robot_id,
                cycle=result.cycle_index,
                selected=result.selected.index,
                horizon=self.budget.horizon,
                inner_dt=self.budget.inner_dt,
                records=[record.to_record() for record in result.records],
            )
        return result

    def command(self, arena: Arena) -> Tuple[float, float]:
        """(v, w) for the current arena step under the selected action."""
        if self.current is None or self.current.selected.kind == "stop":
            return 0.0, 0.0
        state = arena.robot(self.robot_id)
        goal = state.goal
        v, w = controller_command(
            state.pose.x, state.pose.y, state.pose.theta, self.current.selected.target,
            self.config.v_nom, state.body.max_turn_rate, arena.dt,
            goal_x=None if goal is None else goal[0],
            goal_y=None if goal is None else goal[1],
            goal_tolerance=self.config.goal_tolerance,
        )
        return float(v), float(w)
