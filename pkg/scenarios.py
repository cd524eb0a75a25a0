"""
The experiments: Copybot free-run, imitation-enhanced reinforcement
learning, the pedestrian trial, Storybot free-run, plus the memory-size
study and the imitation trials used for calibration.

Every scenario is parameterised by a RunConfig and reproducible from
(config, seed). Trial batches fan out with joblib, one derived seed per
trial, and are reduced in trial order.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import wilcoxon

from arena import Arena, Pose, RobotBody, ring_poses
from config import ArenaConfig, ConfigError, RobotSpec, RunConfig
from consequence_engine import ConsequenceEngine
from controller import drive_to
from geometry import point_segment_distance, wrap_angle
from meme_memory import MemeStore, MemoryPolicy, collective_memory, seed_robots
from memes import ImitationFailure, MemeRegistry, demonstrate, imitate, seed_segments
from rl_task import episodes_to_criterion, train_demonstrator
from seeding import SeedManager
from storytelling import ChannelModel, StoryRegistry, Storybot, storybot_encounter
from telemetry import EVENTS_FILE, EventLog, write_manifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CreatureProfile:
    """Which layers of generate-and-test a robot carries."""

    name: str
    skinnerian: bool = False
    popperian: bool = False
    gregorian: bool = False
    darwinian: bool = True

    def __post_init__(self):
        if not self.darwinian:
            raise ValueError("Every robot is darwinian")
        if self.gregorian and not self.popperian:
            raise ValueError(f"Profile '{self.name}': storytelling needs a Consequence Engine")


PROFILES = {
    "basic_copybot": CreatureProfile("basic_copybot"),
    "rl_copybot": CreatureProfile("rl_copybot", skinnerian=True),
    "ce_robot": CreatureProfile("ce_robot", popperian=True),
    "storybot": CreatureProfile("storybot", popperian=True, gregorian=True),
}


def profile_for(name: str) -> CreatureProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"Unknown creature profile '{name}' (choose from {sorted(PROFILES)})") from None


# L-shaped obstacle near the top-right corner, as offsets from that corner
HAZARD_CORNER = ((-0.6, -0.35, -0.35, -0.35), (-0.35, -0.35, -0.35, -0.6))


def hazard_segments(width: float, height: float) -> List[Tuple[float, float, float, float]]:
    hw, hh = width / 2.0, height / 2.0
    return [(hw + x1, hh + y1, hw + x2, hh + y2) for x1, y1, x2, y2 in HAZARD_CORNER]


def robot_specs(config: RunConfig, default_profile: str, radius: Optional[float] = None) -> List[RobotSpec]:
    """The configured robots, or n_robots on a ring facing the centre."""
    if config.robots:
        return list(config.robots)
    poses = ring_poses(config.scenario.n_robots, radius or config.scenario.ring_radius)
    return [RobotSpec(id=i, x=p.x, y=p.y, theta=p.theta, profile=default_profile) for i, p in enumerate(poses)]


def build_arena(config: RunConfig, seeds: SeedManager, log: Optional[EventLog], specs: Sequence[RobotSpec],
                inactive: Sequence[int] = ()) -> Arena:
    arena = Arena.from_config(config, seeds, log)
    for spec in specs:
        arena.add_robot(RobotBody.from_spec(spec), Pose(spec.x, spec.y, spec.theta),
                        goal=spec.goal, active=spec.id not in inactive)
    if not arena.penetration_free():
        raise ConfigError("Initial robot poses overlap each other or a wall")
    return arena


def memory_policy(config: RunConfig) -> MemoryPolicy:
    memory = config.memory
    return MemoryPolicy(memory.policy, memory.capacity if memory.policy == "limited" else None)


def with_overrides(config: RunConfig, **sections) -> RunConfig:
    """Copy of config with some fields replaced, re-validated."""
    data = config.model_dump(mode="json")
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key].update(value)
        else:
            data[key] = value
    return RunConfig.model_validate(data)


# ---------------------------------------------------------------- Copybots


@dataclass
class CopybotsResult:
    registry: MemeRegistry
    stores: Dict[int, MemeStore]
    seeds: list
    fidelities: List[float] = field(default_factory=list)
    failures: int = 0
    no_enactments: int = 0

    @property
    def collective(self) -> Counter:
        return collective_memory(self.stores.values())


def run_copybots(config: RunConfig, log: Optional[EventLog] = None) -> CopybotsResult:
    """
    Free-run the Copybots: robots take turns (round robin) to enact a meme
    picked uniformly from their store while every other robot watches and
    tries to imitate it.
    """
    seeds = SeedManager(config.seed)
    specs = robot_specs(config, "basic_copybot")
    if len(specs) < 2:
        raise ConfigError("Copybots need at least two robots")
    arena = build_arena(config, seeds, log, specs)
    ids = arena.active_ids()
    homes = {spec.id: (spec.x, spec.y) for spec in specs}

    policy = memory_policy(config)
    stores = {rid: MemeStore(rid, policy, log) for rid in ids}
    registry = MemeRegistry()
    seed_memes = seed_robots(list(stores.values()), config.scenario.seed_memes, registry, arena.time, log)
    result = CopybotsResult(registry, stores, seed_memes)

    for round_index in range(config.scenario.rounds):
        teacher_id = ids[round_index % len(ids)]
        meme_id = stores[teacher_id].select_for_enactment(seeds.robot_stream(teacher_id, "selection"))
        if meme_id is None:
            result.no_enactments += 1
            if log is not None:
                log.emit("no_enactment", arena.time, [teacher_id], robot=teacher_id, round=round_index)
        else:
            watchers = [rid for rid in ids if rid != teacher_id]
            demo = demonstrate(arena, teacher_id, registry.get(meme_id), watchers, config.imitation,
                               home=homes[teacher_id], log=log)
            for learner_id in watchers:
                try:
                    child, score = imitate(arena, learner_id, teacher_id, demo, registry, config.imitation, log)
                except ImitationFailure:
                    result.failures += 1
                    continue
                stores[learner_id].store(child, arena.time)
                result.fidelities.append(score.value)
            home = homes[teacher_id]
            if not drive_to(arena, teacher_id, home[0], home[1], 0.0, config.imitation.v_nom):
                arena.place(teacher_id, Pose(home[0], home[1], 0.0))

        if log is not None:
            log.emit("store_snapshot", arena.time, ids, round=round_index,
                     stores={rid: store.meme_ids for rid, store in stores.items()})

    logger.info(
        "Copybots: %d rounds, %d memes registered, %d imitation failures",
        config.scenario.rounds, len(registry), result.failures,
    )
    return result


@dataclass
class ImitationTrials:
    fidelities: List[float]
    failures: int

    @property
    def mean_fidelity(self) -> float:
        return float(np.mean(self.fidelities)) if self.fidelities else 0.0


def imitation_trials(config: RunConfig, n_trials: Optional[int] = None, learner_distance: float = 0.5,
                     log: Optional[EventLog] = None) -> ImitationTrials:
    """One teacher repeatedly demonstrates the first seed meme to one stationary learner."""
    n_trials = n_trials or config.scenario.trials
    seeds = SeedManager(config.seed)
    specs = [
        RobotSpec(id=0, x=0.0, y=0.0, theta=0.0),
        RobotSpec(id=1, x=-learner_distance, y=0.0, theta=0.0),
    ]
    arena = build_arena(config, seeds, log, specs)
    registry = MemeRegistry()
    parent = registry.register_seed(seed_memes_of(config)[0], tag=1, owners=[0])

    fidelities, failures = [], 0
    for _ in range(n_trials):
        demo = demonstrate(arena, 0, parent, [1], config.imitation, home=(0.0, 0.0), log=log)
        try:
            _, score = imitate(arena, 1, 0, demo, registry, config.imitation, log)
        except ImitationFailure:
            failures += 1
            continue
        fidelities.append(score.value)
    return ImitationTrials(fidelities, failures)


def seed_memes_of(config: RunConfig):
    if not config.scenario.seed_memes:
        raise ConfigError("At least one seed meme is needed")
    return [seed_segments(shape) for shape in config.scenario.seed_memes]


# --------------------------------------------------------------- Pedestrian


@dataclass
class PedestrianOutcome:
    label: str
    paired_reversals: int
    reversals: Dict[int, int]
    duration: float
    collisions: int
    reached: Dict[int, bool]

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "paired_reversals": self.paired_reversals,
            "reversals": self.reversals,
            "duration": self.duration,
            "collisions": self.collisions,
            "reached": self.reached,
        }


@dataclass(frozen=True)
class CourseLine:
    """A robot's straight start-to-goal line, fixed for the whole trial."""

    x0: float
    y0: float
    ux: float
    uy: float

    @classmethod
    def between(cls, start: Pose, goal: Tuple[float, float]) -> "CourseLine":
        length = math.hypot(goal[0] - start.x, goal[1] - start.y)
        if length == 0.0:
            raise ConfigError("A pedestrian robot must start away from its goal")
        return cls(start.x, start.y, (goal[0] - start.x) / length, (goal[1] - start.y) / length)

    def offset(self, pose: Pose) -> float:
        """Signed lateral distance from the line, positive to the left."""
        return self.ux * (pose.y - self.y0) - self.uy * (pose.x - self.x0)

    def ahead(self, pose: Pose, other: Pose) -> float:
        """How far `other` lies in front of `pose` along the line."""
        return self.ux * (other.x - pose.x) + self.uy * (other.y - pose.y)


def deflection_sign(line: CourseLine, pose: Pose, deadband: float) -> int:
    """Which side of its own course line a robot has stepped to (0 = on course)."""
    offset = line.offset(pose)
    if abs(offset) <= deadband:
        return 0
    return 1 if offset > 0 else -1


def reversal_cycles(signs: Sequence[Tuple[int, int]]) -> List[int]:
    """Cycle indices where the lateral deflection flips side."""
    reversals = []
    previous = 0
    for cycle, sign in signs:
        if sign == 0:
            continue
        if previous != 0 and sign != previous:
            reversals.append(cycle)
        previous = sign
    return reversals


def paired_reversals(a: Sequence[int], b: Sequence[int], window: int = 1) -> int:
    """Reversals of the two robots that happen within `window` cycles of each other."""
    unused = list(b)
    pairs = 0
    for cycle in a:
        match = next((c for c in unused if abs(c - cycle) <= window), None)
        if match is not None:
            unused.remove(match)
            pairs += 1
    return pairs


def pedestrian_specs(config: RunConfig) -> List[RobotSpec]:
    if config.robots:
        specs = list(config.robots)
        if len(specs) != 2 or any(spec.goal is None for spec in specs):
            raise ConfigError("The pedestrian trial needs exactly two robots with goals")
        return specs
    half = config.scenario.pedestrian_separation / 2.0
    return [
        RobotSpec(id=0, x=-half, y=0.0, theta=0.0, profile="ce_robot", goal=(half, 0.0)),
        RobotSpec(id=1, x=half, y=0.0, theta=math.pi, profile="ce_robot", goal=(-half, 0.0)),
    ]


def pedestrian_trial(config: RunConfig, seed: int, log: Optional[EventLog] = None) -> PedestrianOutcome:
    """
    Two CE robots walk toward each other's start. Labelled collision,
    timeout, dance (at least two paired deflection reversals) or clean_pass.
    """
    specs = pedestrian_specs(config)
    for spec in specs:
        if not profile_for(spec.profile).popperian:
            raise ConfigError(f"Robot {spec.id} has no Consequence Engine (profile '{spec.profile}')")
    seeds = SeedManager(seed)
    arena = build_arena(config, seeds, log, specs)
    ce = config.ce_budget
    noise = config.effective_noise()
    engines = {
        rid: ConsequenceEngine(rid, ce, noise.tracker_sigma, log, trace=config.telemetry.ce_trace)
        for rid in arena.active_ids()
    }
    lines = {rid: CourseLine.between(arena.robot(rid).pose, arena.robot(rid).goal) for rid in engines}
    # sidesteps smaller than half a body are wheel-slip drift, not a side
    deadband = 0.5 * min(arena.robot(rid).body.radius for rid in engines)
    cycle_steps = max(1, int(round(ce.cycle_period / arena.dt)))
    max_steps = int(math.ceil(config.scenario.timeout / arena.dt - 1e-9))

    a, b = sorted(engines)
    reached = {rid: False for rid in engines}
    signs: Dict[int, List[Tuple[int, int]]] = {rid: [] for rid in engines}
    separation = math.inf
    collisions = 0
    for step in range(max_steps):
        if all(reached.values()):
            break
        if step % cycle_steps == 0:
            cycle = step // cycle_steps
            poses = {rid: arena.robot(rid).pose for rid in engines}
            gap = poses[a].distance_to(poses[b])
            # only sidesteps made while closing in count; homing after the pass does not
            approaching = gap <= separation
            separation = gap
            for rid, other in ((a, b), (b, a)):
                if approaching and not reached[rid] and lines[rid].ahead(poses[rid], poses[other]) > 0.0:
                    signs[rid].append((cycle, deflection_sign(lines[rid], poses[rid], deadband)))
            for rid, engine in engines.items():
                if not reached[rid]:
                    engine.cycle(arena)
        commands = {rid: (0.0, 0.0) if reached[rid] else engine.command(arena) for rid, engine in engines.items()}
        arena.step(commands)
        collisions += len(arena.last_collisions)
        for rid in engines:
            state = arena.robot(rid)
            if math.hypot(state.goal[0] - state.pose.x, state.goal[1] - state.pose.y) < ce.goal_tolerance:
                reached[rid] = True

    rev_a, rev_b = reversal_cycles(signs[a]), reversal_cycles(signs[b])
    paired = paired_reversals(rev_a, rev_b)
    if collisions:
        label = "collision"
    elif not all(reached.values()):
        label = "timeout"
    elif paired >= 2:
        label = "dance"
    else:
        label = "clean_pass"
    return PedestrianOutcome(label, paired, {a: len(rev_a), b: len(rev_b)}, arena.time, collisions, reached)


@dataclass
class PedestrianSummary:
    outcomes: List[PedestrianOutcome]

    @property
    def fractions(self) -> Dict[str, float]:
        counts = Counter(outcome.label for outcome in self.outcomes)
        n = len(self.outcomes)
        return {label: counts.get(label, 0) / n for label in ("clean_pass", "dance", "collision", "timeout")}


def pedestrian_batch(config: RunConfig, n_trials: int, n_jobs: int = 1) -> List[PedestrianOutcome]:
    """Untraced trials with derived seeds, returned in trial order."""
    seeds = SeedManager(config.seed)
    trial_seeds = [seeds.child_seed(f"pedestrian:{i}") for i in range(n_trials)]
    return Parallel(n_jobs=n_jobs)(delayed(pedestrian_trial)(config, seed) for seed in trial_seeds)


def run_pedestrian(config: RunConfig, log: Optional[EventLog] = None) -> PedestrianSummary:
    """Trial 0 runs on the master seed with full telemetry; the rest run untraced in parallel."""
    first = pedestrian_trial(config, config.seed, log)
    rest = pedestrian_batch(config, config.scenario.trials - 1, config.scenario.n_jobs)
    outcomes = [first, *rest]
    if log is not None:
        t = first.duration
        for index, outcome in enumerate(outcomes):
            log.emit("trial", t, [], scenario="pedestrian", trial=index, **outcome.to_record())
    summary = PedestrianSummary(outcomes)
    logger.info("Pedestrian: %s over %d trials", summary.fractions, len(outcomes))
    return summary


# ---------------------------------------------------------------- Storybots


@dataclass
class StorybotsResult:
    registry: StoryRegistry
    bots: Dict[int, Storybot]
    exchanges: list
    spawn_times: Dict[int, float]


def random_goal(arena: Arena, rng: np.random.Generator, margin: float = 0.15) -> Tuple[float, float]:
    """A uniform goal at least `margin` away from every wall segment."""
    hw, hh = arena.width / 2.0 - margin, arena.height / 2.0 - margin
    for _ in range(100):
        x, y = float(rng.uniform(-hw, hw)), float(rng.uniform(-hh, hh))
        clear = all(
            point_segment_distance(x, y, w.x1, w.y1, w.x2, w.y2)[0] >= margin for w in arena.walls
        )
        if clear:
            return x, y
    return 0.0, 0.0


def _spawn_clear(arena: Arena, robot_id: int) -> bool:
    """A late joiner waits while an active robot sits on its spawn point."""
    me = arena.robot(robot_id)
    return all(
        me.pose.distance_to(arena.robot(other).pose) >= me.body.radius + arena.robot(other).body.radius
        for other in arena.active_ids()
    )


def run_storybots(config: RunConfig, log: Optional[EventLog] = None) -> StorybotsResult:
    """
    Robots wander between random goals under their Consequence Engines.
    Whenever two idle storybots meet, one tells the other a story.
    Late joiners from the schedule appear at their spawn times.
    """
    arena_cfg = config.arena
    if config.scenario.hazard_corner and not arena_cfg.obstacles:
        arena_cfg = ArenaConfig(**{**arena_cfg.model_dump(),
                                   "obstacles": hazard_segments(arena_cfg.width, arena_cfg.height)})
        config = config.model_copy(update={"arena": arena_cfg})
    seeds = SeedManager(config.seed)
    specs = robot_specs(config, "storybot", radius=0.5)
    profiles = {spec.id: profile_for(spec.profile) for spec in specs}
    if sum(p.gregorian for p in profiles.values()) < 2:
        raise ConfigError("Storybots need at least two gregorian robots")
    spawn_times = {spec.id: 0.0 for spec in specs}
    for entry in config.schedule:
        if entry.robot_id not in spawn_times:
            raise ConfigError(f"Schedule names unknown robot {entry.robot_id}")
        spawn_times[entry.robot_id] = entry.spawn_time
    arena = build_arena(config, seeds, log, specs, inactive=[r for r, t in spawn_times.items() if t > 0.0])

    ce, story = config.ce_budget, config.story
    tracker = config.effective_noise().tracker_sigma
    engines = {
        rid: ConsequenceEngine(rid, ce, tracker, log, trace=config.telemetry.ce_trace)
        for rid, profile in profiles.items() if profile.popperian
    }
    bots = {
        rid: Storybot(rid, engines[rid], story, seeds.robot_stream(rid, "stories"))
        for rid, profile in profiles.items() if profile.gregorian
    }
    registry = StoryRegistry()
    channel = ChannelModel.from_config(config.channel, [spec.id for spec in specs])
    exchanges = []
    goal_set_at: Dict[int, float] = {}
    goal_timeout = ce.horizon * 3.0

    cycle_steps = max(1, int(round(ce.cycle_period / arena.dt)))
    n_steps = int(math.ceil(config.scenario.duration_minutes * 60.0 / arena.dt - 1e-9))
    for step in range(n_steps):
        t = arena.time
        for rid, spawn_time in spawn_times.items():
            state = arena.robot(rid)
            if not state.active and spawn_time <= t + 1e-9 and _spawn_clear(arena, rid):
                arena.activate(rid)

        if step % cycle_steps == 0:
            for rid in arena.active_ids():
                if rid not in engines:
                    continue
                state = arena.robot(rid)
                stale = t - goal_set_at.get(rid, -math.inf) >= goal_timeout
                near = state.goal is not None and math.hypot(
                    state.goal[0] - state.pose.x, state.goal[1] - state.pose.y) < ce.goal_tolerance
                if state.goal is None or near or stale:
                    state.goal = random_goal(arena, seeds.robot_stream(rid, "goals"))
                    goal_set_at[rid] = t
                if rid not in bots or bots[rid].is_idle(t):
                    engines[rid].cycle(arena)

            talked = set()
            for a, b in arena.encounter_pairs(story.r_enc):
                if a not in bots or b not in bots or talked & {a, b}:
                    continue
                if not (bots[a].ready_for(b, t, story.cooldown) and bots[b].ready_for(a, t, story.cooldown)):
                    continue
                if log is not None:
                    log.emit("encounter", t, [a, b], pair=[a, b])
                exchanges.append(storybot_encounter(arena, (a, b), bots, registry, channel, story, ce, log))
                talked |= {a, b}

        commands = {}
        for rid in arena.active_ids():
            busy = rid in bots and not bots[rid].is_idle(arena.time)
            commands[rid] = engines[rid].command(arena) if rid in engines and not busy else (0.0, 0.0)
        arena.step(commands)

    logger.info("Storybots: %d exchanges, %d stories registered", len(exchanges), len(registry))
    return StorybotsResult(registry, bots, exchanges, spawn_times)


# ----------------------------------------------------------------- RL study


def _rl_pair(config: RunConfig, seed: int, demonstrator) -> Tuple[int, int, list, list]:
    logs = []
    results = []
    for with_imitation in (False, True):
        log = EventLog()
        results.append(episodes_to_criterion(config.rl, seed, with_imitation, demonstrator,
                                             config.effective_noise(), config.imitation, log))
        logs.append(log.events)
    return results[0], results[1], logs[0], logs[1]


def run_rl(config: RunConfig, log: Optional[EventLog] = None) -> pd.DataFrame:
    """
    Paired learners per seed, with and without imitation of a pre-trained
    demonstrator. Returns episodes-to-criterion per seed and condition; a
    one-sided Wilcoxon test (with < without) is attached as frame attrs.
    """
    seeds = SeedManager(config.seed)
    demonstrator = train_demonstrator(config.rl, seeds.child_seed("rl:demonstrator"))
    run_seeds = [seeds.child_seed(f"rl:{k}") for k in range(config.scenario.seeds)]
    pairs = Parallel(n_jobs=config.scenario.n_jobs)(
        delayed(_rl_pair)(config, seed, demonstrator) for seed in run_seeds
    )

    rows = []
    offset = 0.0
    for k, (without, with_, events_without, events_with) in enumerate(pairs):
        rows.append({"seed_index": k, "seed": run_seeds[k], "with_imitation": False, "episodes_to_criterion": without})
        rows.append({"seed_index": k, "seed": run_seeds[k], "with_imitation": True, "episodes_to_criterion": with_})
        if log is not None:
            for event in [*events_without, *events_with]:
                offset += 1.0
                log.emit("rl_episode", offset, event["robots"], **event["payload"])
    frame = pd.DataFrame(rows)

    without = frame.loc[~frame.with_imitation, "episodes_to_criterion"].to_numpy()
    with_ = frame.loc[frame.with_imitation, "episodes_to_criterion"].to_numpy()
    try:
        p_value = float(wilcoxon(with_, without, alternative="less").pvalue)
    except ValueError:
        p_value = math.nan
    if not math.isfinite(p_value):
        # every pair tied
        p_value = 1.0
    frame.attrs.update(
        median_with=float(np.median(with_)),
        median_without=float(np.median(without)),
        wilcoxon_p=p_value,
    )
    logger.info("RL: median episodes to criterion %.1f with imitation vs %.1f without (p=%.4g)",
                frame.attrs["median_with"], frame.attrs["median_without"], p_value)
    return frame


# ------------------------------------------------------------- Memory study


def _memory_cell(config: RunConfig, condition: str, seed: int, out_dir: Optional[str]):
    policy = MemoryPolicy.parse(condition, config.memory.capacity)
    cell = with_overrides(
        config,
        seed=seed,
        memory={"policy": policy.kind, "capacity": policy.capacity or config.memory.capacity},
        scenario={"kind": "copybots"},
    )
    if out_dir is None:
        log = EventLog()
        run_copybots(cell, log)
        return log.events
    path = Path(out_dir)
    with EventLog(path / EVENTS_FILE, keep_in_memory=False) as log:
        run_copybots(cell, log)
    write_manifest(path, cell, seed, {"condition": policy.label})
    return str(path)


def memory_study_cells(config: RunConfig) -> List[Tuple[str, int, int]]:
    """(condition label, seed index, seed); seeds are paired across conditions."""
    seeds = SeedManager(config.seed)
    cells = []
    for condition in config.scenario.conditions:
        label = MemoryPolicy.parse(condition, config.memory.capacity).label
        for k in range(config.scenario.seeds):
            cells.append((label, k, seeds.child_seed(f"memory_study:{k}")))
    return cells


def run_memory_study(config: RunConfig, log: Optional[EventLog] = None, out_dir=None) -> Dict[Tuple[str, int], object]:
    """
    Copybot runs for every memory condition x seed. With an out_dir each
    cell writes its own sub-run log and a `trial` event points at it;
    otherwise the cells' events are returned in memory.
    """
    cells = memory_study_cells(config)
    targets = [
        None if out_dir is None else str(Path(out_dir) / "memory_study" / label / f"seed_{k:03d}")
        for label, k, _ in cells
    ]
    results = Parallel(n_jobs=config.scenario.n_jobs)(
        delayed(_memory_cell)(config, label, seed, target) for (label, _, seed), target in zip(cells, targets)
    )
    runs = {}
    for index, ((label, k, seed), result) in enumerate(zip(cells, results)):
        runs[(label, k)] = result
        if log is not None:
            payload = {"scenario": "memory_study", "condition": label, "seed_index": k, "seed": seed}
            if isinstance(result, str):
                payload["path"] = str(Path(result).relative_to(out_dir))
            log.emit("trial", float(index), [], **payload)
    return runs


# ----------------------------------------------------------------- dispatch


def run_scenario(config: RunConfig, log: Optional[EventLog] = None, out_dir=None) -> dict:
    """Run the configured scenario and return a JSON-friendly summary."""
    kind = config.scenario.kind
    if kind == "copybots":
        result = run_copybots(config, log)
        collective = result.collective
        return {
            "memes": len(result.registry),
            "imitations": len(result.fidelities),
            "failures": result.failures,
            "mean_fidelity": float(np.mean(result.fidelities)) if result.fidelities else None,
            "collective_memory": sum(collective.values()),
        }
    if kind == "imitation_trials":
        trials = imitation_trials(config, log=log)
        return {"trials": config.scenario.trials, "failures": trials.failures, "mean_fidelity": trials.mean_fidelity}
    if kind == "pedestrian":
        return {"fractions": run_pedestrian(config, log).fractions}
    if kind == "storybots":
        result = run_storybots(config, log)
        return {
            "exchanges": len(result.exchanges),
            "stories": len(result.registry),
            "discards": sum(exchange.discarded for exchange in result.exchanges),
        }
    if kind == "rl":
        frame = run_rl(config, log)
        return dict(frame.attrs)
    if kind == "memory_study":
        runs = run_memory_study(config, log, out_dir)
        return {"cells": len(runs)}
    raise ConfigError(f"Unknown scenario kind '{kind}'")


def _mean_fidelity(config: RunConfig, n_trials: int) -> float:
    return imitation_trials(config, n_trials).mean_fidelity


def calibrate(config: RunConfig, scales: Sequence[float] = (0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0),
              n_trials: int = 20, band: Tuple[float, float] = (0.5, 0.9), target: float = 0.7,
              pedestrian_trials: int = 0,
              tracker_sigmas: Sequence[float] = (0.0, 0.005, 0.01, 0.02, 0.04),
              dance_target: float = 0.2) -> dict:
    """
    Pick the noise scale whose mean imitation fidelity is closest to the
    target inside the band; optionally pick the CE tracker noise whose
    pedestrian dance fraction is closest to dance_target.
    """
    n_jobs = config.scenario.n_jobs
    candidates = [with_overrides(config, noise_scale=scale) for scale in scales]
    means = Parallel(n_jobs=n_jobs)(delayed(_mean_fidelity)(c, n_trials) for c in candidates)
    table = [{"noise_scale": s, "mean_fidelity": m} for s, m in zip(scales, means)]
    in_band = [row for row in table if band[0] <= row["mean_fidelity"] <= band[1]] or table
    best = min(in_band, key=lambda row: (abs(row["mean_fidelity"] - target), row["noise_scale"]))
    calibration = {
        "noise_scale": best["noise_scale"],
        "mean_fidelity": best["mean_fidelity"],
        "fidelity_band": list(band),
        "in_band": band[0] <= best["mean_fidelity"] <= band[1],
        "scan": table,
    }

    if pedestrian_trials > 0:
        scaled = with_overrides(config, noise_scale=best["noise_scale"])
        scan = []
        for sigma in tracker_sigmas:
            # tracker noise is multiplied by the noise scale at run time
            raw = sigma / best["noise_scale"] if best["noise_scale"] > 0 else 0.0
            trial_config = with_overrides(scaled, noise={"tracker_sigma": raw})
            fractions = PedestrianSummary(pedestrian_batch(trial_config, pedestrian_trials, n_jobs)).fractions
            scan.append({"tracker_sigma": raw, **fractions})
        choice = min(scan, key=lambda row: (abs(row["dance"] - dance_target), row["collision"]))
        calibration["noise"] = {"tracker_sigma": choice["tracker_sigma"]}
        calibration["pedestrian_scan"] = scan
    return calibration
