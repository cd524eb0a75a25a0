"""
Grid-world reinforcement learning task and the imitation bridge.

A learner robot runs tabular Q-learning on a small grid laid over the arena.
With imitation enabled it periodically watches a trained demonstrator drive
its greedy route in the arena, infers the route through the same embodied
imitation pipeline the Copybots use, and replays the inferred
(state, action) pairs as extra Q-updates.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import joblib
import numpy as np

from arena import Arena, NoiseProfile, Pose, RobotBody
from config import ImitationConfig, NoiseConfig, RLConfig
from geometry import wrap_angle
from memes import MAX_ADVANCE, MAX_SEGMENTS, ImitationFailure, Meme, demonstrate, imitate_from_observation, meme_polyline
from seeding import SeedManager
from telemetry import EventLog

logger = logging.getLogger(__name__)

FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTIONS = ("forward", "turn_left", "turn_right")
N_OCTANTS = 8

GOAL_REWARD = 1.0
STEP_REWARD = -0.01
COLLISION_REWARD = -0.5

OCTANT_STEPS = tuple(
    (int(round(math.cos(o * math.pi / 4))), int(round(math.sin(o * math.pi / 4)))) for o in range(N_OCTANTS)
)


@dataclass(frozen=True)
class GridState:
    x: int
    y: int
    octant: int


class GridTask:
    """Deterministic grid: forward moves one cell along the octant, turns change octant by one."""

    def __init__(self, config: Optional[RLConfig] = None):
        self.config = config or RLConfig()
        self.width = self.config.grid_width
        self.height = self.config.grid_height
        self.blocked = {tuple(cell) for cell in self.config.blocked_cells}
        # The start faces octant 0, the arena reference heading
        self.start = GridState(*self.config.start_cell, 0)
        self.goal = tuple(self.config.goal_cell)
        for cell in (self.config.start_cell, self.goal):
            if not self._free(*cell):
                raise ValueError(f"Cell {cell} is outside the grid or blocked")

    def _free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and (x, y) not in self.blocked

    def is_goal(self, state: GridState) -> bool:
        return (state.x, state.y) == self.goal

    def step(self, state: GridState, action: int) -> Tuple[GridState, float, bool]:
        """(next state, reward, done). Bumping a wall or blocked cell leaves the state unchanged."""
        if action == TURN_LEFT:
            nxt = GridState(state.x, state.y, (state.octant + 1) % N_OCTANTS)
        elif action == TURN_RIGHT:
            nxt = GridState(state.x, state.y, (state.octant - 1) % N_OCTANTS)
        elif action == FORWARD:
            dx, dy = OCTANT_STEPS[state.octant]
            if not self._free(state.x + dx, state.y + dy):
                return state, COLLISION_REWARD, False
            nxt = GridState(state.x + dx, state.y + dy, state.octant)
        else:
            raise ValueError(f"Unknown action {action}")
        if self.is_goal(nxt):
            return nxt, GOAL_REWARD, True
        return nxt, STEP_REWARD, False

    def cell_centre(self, x: float, y: float) -> Tuple[float, float]:
        ox, oy = self.config.origin
        return ox + x * self.config.cell_size, oy + y * self.config.cell_size

    def step_length(self, octant: int) -> float:
        dx, dy = OCTANT_STEPS[octant]
        return self.config.cell_size * math.hypot(dx, dy)


class QLearner:
    """
    Tabular Q-learning with an epsilon-greedy schedule.
    """

    def __init__(self, task: GridTask, config: Optional[RLConfig] = None, rng: Optional[np.random.Generator] = None):
        self.task = task
        self.config = config or task.config
        self.rng = rng or np.random.default_rng(0)
        self.q = np.zeros((task.width, task.height, N_OCTANTS, len(ACTIONS)))
        self.epsilon = self.config.epsilon_start
        self.episodes = 0

    def greedy(self, state: GridState) -> int:
        return int(np.argmax(self.q[state.x, state.y, state.octant]))

    def choose(self, state: GridState) -> int:
        if self.rng.random() < self.epsilon:
            return int(self.rng.integers(len(ACTIONS)))
        return self.greedy(state)

    def update(self, state: GridState, action: int, reward: float, nxt: GridState, done: bool):
        target = reward if done else reward + self.config.gamma * self.q[nxt.x, nxt.y, nxt.octant].max()
        idx = (state.x, state.y, state.octant, action)
        self.q[idx] += self.config.alpha * (target - self.q[idx])

    def run_episode(self) -> Tuple[bool, int, float]:
        """One exploring episode from the start cell: (reached goal, steps, return)."""
        state = self.task.start
        total = 0.0
        reached = False
        steps = 0
        for steps in range(1, self.config.max_steps + 1):
            action = self.choose(state)
            nxt, reward, done = self.task.step(state, action)
            self.update(state, action, reward, nxt, done)
            total += reward
            state = nxt
            if done:
                reached = True
                break
        self.episodes += 1
        self.epsilon = max(self.config.epsilon_end, self.epsilon * self.config.epsilon_decay)
        return reached, steps, total

    def greedy_path(self) -> Tuple[List[GridState], List[int], bool]:
        """Roll out the greedy policy; stops at the goal, a revisited state or max_steps."""
        state = self.task.start
        states, actions = [state], []
        seen = {state}
        for _ in range(self.config.max_steps):
            action = self.greedy(state)
            nxt, _, done = self.task.step(state, action)
            actions.append(action)
            states.append(nxt)
            if done:
                return states, actions, True
            if nxt in seen:
                break
            seen.add(nxt)
            state = nxt
        return states, actions, False

    def greedy_succeeds(self) -> bool:
        return self.greedy_path()[2]

    def replay(self, pairs: Sequence[Tuple[GridState, int]], sweeps: Optional[int] = None):
        """Extra Q-updates over observed (state, action) pairs, last pair first."""
        for _ in range(sweeps or self.config.replay_sweeps):
            for state, action in reversed(pairs):
                nxt, reward, done = self.task.step(state, action)
                self.update(state, action, reward, nxt, done)

    def save_model(self, filepath):
        joblib.dump({"q": self.q, "epsilon": self.epsilon, "episodes": self.episodes,
                     "config": self.config.model_dump()}, filepath)
        logger.info("Demonstrator saved to %s", filepath)

    def load_model(self, filepath):
        data = joblib.load(filepath)
        if data["q"].shape != self.q.shape:
            raise ValueError(f"Saved Q-table shape {data['q'].shape} does not match the task")
        self.q = data["q"]
        self.epsilon = data["epsilon"]
        self.episodes = data["episodes"]
        logger.info("Demonstrator loaded from %s", filepath)


def train_to_criterion(learner: QLearner, on_episode=None, imitation=None) -> int:
    """
    Train until the greedy policy has reached the goal after
    `criterion_successes` consecutive episodes. Returns the episode count at
    that point, or max_episodes when the criterion is never met.
    """
    config = learner.config
    streak = 0
    for episode in range(1, config.max_episodes + 1):
        reached, steps, total = learner.run_episode()
        if imitation is not None and episode % config.imitation_period == 0:
            imitation(learner, episode)
        streak = streak + 1 if learner.greedy_succeeds() else 0
        if on_episode is not None:
            on_episode(episode, reached, steps, total, streak)
        if streak >= config.criterion_successes:
            return episode
    return config.max_episodes


def train_demonstrator(config: Optional[RLConfig] = None, seed: int = 0) -> QLearner:
    """A learner trained alone to criterion, loaded from disk when a saved copy exists."""
    config = config or RLConfig()
    task = GridTask(config)
    demonstrator = QLearner(task, config, np.random.default_rng(seed))
    path = Path(config.demonstrator_path) if config.demonstrator_path else None
    if path is not None and path.exists():
        demonstrator.load_model(path)
        return demonstrator
    episodes = train_to_criterion(demonstrator)
    if not demonstrator.greedy_succeeds():
        raise RuntimeError(f"Demonstrator failed to learn the task in {episodes} episodes")
    logger.info("Demonstrator reached criterion after %d episodes", episodes)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        demonstrator.save_model(path)
    return demonstrator


def route_to_segments(task: GridTask, states: Sequence[GridState]) -> Tuple[Tuple[float, float], ...]:
    """The cell route as meme segments, starting from heading 0."""
    segments = []
    heading = 0.0
    for a, b in zip(states[:-1], states[1:]):
        if (a.x, a.y) == (b.x, b.y):
            continue
        direction = b.octant * math.pi / 4
        length = task.step_length(b.octant)
        if segments and abs(wrap_angle(direction - heading)) < 1e-9 and segments[-1][1] + length <= MAX_ADVANCE + 1e-9:
            turn, advance = segments[-1]
            segments[-1] = (turn, advance + length)
            continue
        segments.append((wrap_angle(direction - heading), length))
        heading = direction
    if not segments or len(segments) > MAX_SEGMENTS:
        raise ImitationFailure(f"Route cannot be enacted as a meme ({len(segments)} segments)")
    return tuple(segments)


def segments_to_pairs(task: GridTask, segments) -> List[Tuple[GridState, int]]:
    """
    Map an inferred meme back onto grid actions: each leg's heading is
    rounded to an octant and its length to whole cells.
    """
    vertices = meme_polyline(segments)
    pairs = []
    state = task.start
    for a, b in zip(vertices[:-1], vertices[1:]):
        length = math.dist(a, b)
        if length < 1e-9:
            continue
        heading = math.atan2(b[1] - a[1], b[0] - a[0])
        octant = int(round(heading / (math.pi / 4))) % N_OCTANTS
        delta = (octant - state.octant) % N_OCTANTS
        turns = [TURN_LEFT] * delta if delta <= 4 else [TURN_RIGHT] * (N_OCTANTS - delta)
        cells = int(round(length / task.step_length(octant)))
        for action in turns + [FORWARD] * cells:
            pairs.append((state, action))
            state, _, done = task.step(state, action)
            if done:
                return pairs
    return pairs


@dataclass
class DemonstrationSetup:
    arena: Arena
    demonstrator_id: int
    learner_id: int
    home: Tuple[float, float]


def demonstration_setup(task: GridTask, seeds: SeedManager, noise: Optional[NoiseConfig] = None) -> DemonstrationSetup:
    """The arena where the demonstrator shows its route and the learner watches."""
    config = task.config
    noise = (noise or NoiseConfig()).scaled(config.observation_noise_scale)
    arena = Arena(noise=NoiseProfile.from_config(noise, seeds.seed), seeds=seeds)
    home = task.cell_centre(*config.start_cell)
    arena.add_robot(RobotBody(0), Pose(home[0], home[1], 0.0))
    arena.add_robot(RobotBody(1), Pose(*config.observer_pose))
    return DemonstrationSetup(arena, 0, 1, home)


def observe_demonstrator(setup: DemonstrationSetup, task: GridTask, route: Sequence[GridState],
                         imitation: Optional[ImitationConfig] = None) -> List[Tuple[GridState, int]]:
    """Enact the route in the arena and return the (state, action) pairs the learner infers."""
    imitation = imitation or ImitationConfig()
    meme = Meme(route_to_segments(task, route), meme_id=0)
    demo = demonstrate(setup.arena, setup.demonstrator_id, meme, [setup.learner_id], imitation, home=setup.home)
    observation = demo.observations[setup.learner_id]
    body = setup.arena.robot(setup.demonstrator_id).body
    segments = imitate_from_observation(observation, body.radius, imitation, initial_heading=0.0)
    return segments_to_pairs(task, segments)


def episodes_to_criterion(config: RLConfig, seed: int, with_imitation: bool,
                          demonstrator: Optional[QLearner] = None,
                          noise: Optional[NoiseConfig] = None,
                          imitation_config: Optional[ImitationConfig] = None,
                          log: Optional[EventLog] = None, t_offset: float = 0.0) -> int:
    """One learner run. With imitation, every `imitation_period` episodes it watches the demonstrator."""
    seeds = SeedManager(seed)
    task = GridTask(config)
    learner = QLearner(task, config, seeds.stream("rl:learner"))

    imitation = None
    if with_imitation:
        demonstrator = demonstrator or train_demonstrator(config)
        route, _, ok = demonstrator.greedy_path()
        if not ok:
            raise ValueError("Demonstrator's greedy route does not reach the goal")
        setup = demonstration_setup(task, seeds, noise)

        def imitation(agent: QLearner, episode: int):
            try:
                pairs = observe_demonstrator(setup, task, route, imitation_config)
            except ImitationFailure as e:
                logger.debug("Episode %d: learner missed the demonstration (%s)", episode, e)
                return
            agent.replay(pairs)

    def on_episode(episode, reached, steps, total, streak):
        if log is not None:
            log.emit("rl_episode", t_offset + episode, [], seed=seed, with_imitation=with_imitation,
                     episode=episode, reached=reached, steps=steps, total_reward=round(total, 9),
                     epsilon=learner.epsilon, streak=streak)

    return train_to_criterion(learner, on_episode, imitation)
