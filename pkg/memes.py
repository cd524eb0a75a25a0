"""
Movement memes and embodied imitation.

A meme is a short dance: an ordered list of (turn, advance) segments. A
teacher robot enacts it in the arena, watchers record what their cameras
see, and each watcher infers its own (usually imperfect) copy from that
first-person observation alone.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from arena import Arena, ObservationSample, Pose, range_from_size
from config import ImitationConfig
from controller import drive_to, face_each_other
from geometry import (
    bounding_circle_diameter,
    integrate_unicycle,
    point_segment_distance,
    polyline_diameter,
    resample_polyline,
    wrap_angle,
)
from telemetry import EventLog

logger = logging.getLogger(__name__)

MAX_SEGMENTS = 16
MAX_ADVANCE = 0.5
ANGLE_EPS = 1e-9

# Consecutive samples further apart than this many dt form a gap
GAP_FACTOR = 1.5

Segment = Tuple[float, float]

SEED_SHAPES: Dict[str, List[Segment]] = {
    "triangle": [(2.0 * math.pi / 3.0, 0.15)] * 3,
    "square": [(math.pi / 2.0, 0.15)] * 4,
}


class InvalidMemeError(ValueError):
    """Raised for segment lists that break the meme invariants."""


class ImitationFailure(RuntimeError):
    """Raised when a watcher cannot infer a meme from what it saw."""


def validate_segments(segments: Iterable[Sequence[float]]) -> Tuple[Segment, ...]:
    try:
        segs = tuple((float(turn), float(advance)) for turn, advance in segments)
    except (TypeError, ValueError) as e:
        raise InvalidMemeError(f"Segments must be (turn, advance) pairs: {e}") from e
    if not 1 <= len(segs) <= MAX_SEGMENTS:
        raise InvalidMemeError(f"A meme has 1..{MAX_SEGMENTS} segments, got {len(segs)}")
    for turn, advance in segs:
        if not (math.isfinite(turn) and math.isfinite(advance)):
            raise InvalidMemeError("Segment values must be finite")
        if abs(turn) > math.pi + ANGLE_EPS:
            raise InvalidMemeError(f"Turn {turn} exceeds pi")
        if advance < 0.0 or advance > MAX_ADVANCE + ANGLE_EPS:
            raise InvalidMemeError(f"Advance {advance} outside [0, {MAX_ADVANCE}]")
    return segs


def seed_segments(shape: Union[str, Sequence[Sequence[float]]]) -> Tuple[Segment, ...]:
    """Segments of a named seed shape, or an explicit segment list."""
    if isinstance(shape, str):
        try:
            return validate_segments(SEED_SHAPES[shape])
        except KeyError:
            raise InvalidMemeError(f"Unknown seed shape '{shape}'") from None
    return validate_segments(shape)


@dataclass
class Meme:
    segments: Tuple[Segment, ...]
    meme_id: int
    parent_id: Optional[int] = None
    owner_history: List[int] = field(default_factory=list)
    seed_tag: Optional[int] = None
    created_at: float = 0.0

    def __post_init__(self):
        self.segments = validate_segments(self.segments)

    @property
    def is_seed(self) -> bool:
        return self.parent_id is None

    def to_record(self) -> dict:
        return {
            "meme_id": self.meme_id,
            "parent_id": self.parent_id,
            "segments": [list(segment) for segment in self.segments],
            "owners": list(self.owner_history),
            "seed_tag": self.seed_tag,
            "t": self.created_at,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Meme":
        return cls(
            segments=record["segments"],
            meme_id=record["meme_id"],
            parent_id=record.get("parent_id"),
            owner_history=list(record.get("owners", [])),
            seed_tag=record.get("seed_tag"),
            created_at=record.get("t", 0.0),
        )


class MemeRegistry:
    """Global lineage registry: hands out meme ids and remembers every meme."""

    def __init__(self):
        self._memes: Dict[int, Meme] = {}
        self._next_id = 1

    def _allocate(self) -> int:
        meme_id = self._next_id
        self._next_id += 1
        return meme_id

    def register_seed(self, segments, tag: int, t: float = 0.0, owners: Sequence[int] = ()) -> Meme:
        meme = Meme(segments, self._allocate(), None, list(owners), seed_tag=tag, created_at=t)
        self._memes[meme.meme_id] = meme
        return meme

    def register_copy(self, segments, parent_id: int, owner_id: int, t: float) -> Meme:
        parent = self.get(parent_id)
        if t < parent.created_at:
            raise InvalidMemeError("A copy cannot predate its parent")
        meme = Meme(segments, self._allocate(), parent_id, [owner_id], created_at=t)
        self._memes[meme.meme_id] = meme
        return meme

    def add_owner(self, meme_id: int, robot_id: int):
        self.get(meme_id).owner_history.append(robot_id)

    def get(self, meme_id: int) -> Meme:
        try:
            return self._memes[meme_id]
        except KeyError:
            raise InvalidMemeError(f"Meme {meme_id} is not registered") from None

    def roots(self) -> List[Meme]:
        return [meme for meme in self._memes.values() if meme.is_seed]

    def __contains__(self, meme_id) -> bool:
        return meme_id in self._memes

    def __len__(self) -> int:
        return len(self._memes)

    def __iter__(self) -> Iterator[Meme]:
        return iter(self._memes.values())


def _segments_of(meme) -> Tuple[Segment, ...]:
    return meme.segments if isinstance(meme, Meme) else validate_segments(meme)


def meme_polyline(meme, start: Tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Vertices of the ideal enactment path, starting at `start`."""
    x, y, heading = start
    points = [(x, y)]
    for turn, advance in _segments_of(meme):
        heading += turn
        if advance > 0.0:
            x += advance * math.cos(heading)
            y += advance * math.sin(heading)
            points.append((x, y))
    return np.asarray(points, dtype=float)


def meme_end_pose(meme, start: Pose) -> Pose:
    x, y, heading = start.x, start.y, start.theta
    for turn, advance in _segments_of(meme):
        heading += turn
        x += advance * math.cos(heading)
        y += advance * math.sin(heading)
    return Pose(x, y, heading)


@dataclass(frozen=True)
class CommandSchedule:
    """Per-step (v, w) commands, one row per arena step of length dt."""

    dt: float
    commands: np.ndarray
    start_pose: Pose
    end_pose: Pose

    def __len__(self) -> int:
        return len(self.commands)

    @property
    def duration(self) -> float:
        return len(self.commands) * self.dt

    def times(self) -> np.ndarray:
        return np.arange(len(self.commands)) * self.dt

    def integrate(self, start: Optional[Pose] = None) -> Pose:
        """Noise-free execution of the schedule."""
        pose = start or self.start_pose
        x, y, theta = pose.x, pose.y, pose.theta
        for v, w in self.commands:
            x, y, theta = integrate_unicycle(x, y, theta, v, w, self.dt)
        return Pose(float(x), float(y), float(theta))


def _n_steps(amount: float, rate: float, dt: float) -> int:
    if amount == 0.0:
        return 0
    return max(1, math.ceil(abs(amount) / (rate * dt) - 1e-9))


def enact(meme, start_pose: Pose, v_nom: float = 0.1, w_nom: float = 1.0, dt: float = 0.05) -> CommandSchedule:
    """
    Command schedule for one enactment: per segment, turn in place, then advance.

    Rates are trimmed slightly below nominal so each turn and advance fills
    a whole number of steps exactly.
    """
    rows = []
    for turn, advance in _segments_of(meme):
        n_turn = _n_steps(turn, w_nom, dt)
        if n_turn:
            rows.extend([(0.0, turn / (n_turn * dt))] * n_turn)
        n_adv = _n_steps(advance, v_nom, dt)
        if n_adv:
            rows.extend([(advance / (n_adv * dt), 0.0)] * n_adv)
    commands = np.asarray(rows, dtype=float).reshape(-1, 2)
    return CommandSchedule(dt, commands, start_pose, meme_end_pose(meme, start_pose))


@dataclass
class Observation:
    observer_id: int
    target_id: int
    dt: float
    samples: List[ObservationSample] = field(default_factory=list)
    observer_poses: List[Pose] = field(default_factory=list)

    def add(self, sample: ObservationSample, observer_pose: Pose):
        if self.samples and sample.t <= self.samples[-1].t:
            raise ValueError("Observation sample times must strictly increase")
        self.samples.append(sample)
        self.observer_poses.append(observer_pose)

    @property
    def times(self) -> np.ndarray:
        return np.asarray([s.t for s in self.samples], dtype=float)

    @property
    def gaps(self) -> List[Tuple[float, float]]:
        """Intervals during which the target went unseen."""
        times = self.times
        if len(times) < 2:
            return []
        jumps = np.flatnonzero(np.diff(times) > GAP_FACTOR * self.dt)
        return [(float(times[i]), float(times[i + 1])) for i in jumps]


@dataclass(frozen=True)
class Track:
    times: np.ndarray
    points: np.ndarray


def reconstruct_trajectory(
    observation: Observation,
    observer_poses: Optional[Union[Pose, Sequence[Pose]]] = None,
    target_radius: float = 0.037,
    config: Optional[ImitationConfig] = None,
) -> List[Track]:
    """
    World-frame target positions inferred from bearing and apparent size.

    Gaps up to max_gap seconds are linearly interpolated; longer gaps split
    the result into several tracks. Every track is smoothed with a centred
    rolling mean.
    """
    config = config or ImitationConfig()
    samples = observation.samples
    if len(samples) < config.min_samples:
        raise ImitationFailure(f"Only {len(samples)} samples observed (need {config.min_samples})")

    if observer_poses is None:
        observer_poses = observation.observer_poses
    if isinstance(observer_poses, Pose):
        observer_poses = [observer_poses] * len(samples)
    if len(observer_poses) != len(samples):
        raise ValueError("One observer pose per sample is required")

    times = observation.times
    bearing = np.asarray([s.bearing for s in samples])
    size = np.asarray([s.apparent_size for s in samples])
    distance = range_from_size(target_radius, size)
    ox = np.asarray([p.x for p in observer_poses])
    oy = np.asarray([p.y for p in observer_poses])
    heading = np.asarray([p.theta for p in observer_poses]) + bearing
    xs = ox + distance * np.cos(heading)
    ys = oy + distance * np.sin(heading)

    breaks = np.flatnonzero(np.diff(times) > config.max_gap) + 1
    tracks = []
    for idx in np.split(np.arange(len(times)), breaks):
        if len(idx) < 2:
            continue
        t = times[idx]
        n_grid = int(round((t[-1] - t[0]) / observation.dt)) + 1
        grid = t[0] + observation.dt * np.arange(n_grid)
        frame = pd.DataFrame(
            {"x": np.interp(grid, t, xs[idx]), "y": np.interp(grid, t, ys[idx])},
            index=pd.Index(grid, name="t"),
        )
        smooth = frame.rolling(config.smoothing_window, center=True, min_periods=1).mean()
        tracks.append(Track(times=grid, points=smooth.to_numpy()))
    return tracks


def _douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        start, end = stack.pop()
        if end <= start + 1:
            continue
        inner = points[start + 1:end]
        d, _, _ = point_segment_distance(
            inner[:, 0], inner[:, 1], points[start, 0], points[start, 1], points[end, 0], points[end, 1]
        )
        k = int(np.argmax(d))
        if d[k] > tolerance:
            split = start + 1 + k
            keep[split] = True
            stack.append((start, split))
            stack.append((split, end))
    return np.flatnonzero(keep)


def _edge_turn(a, b, c) -> float:
    h1 = math.atan2(b[1] - a[1], b[0] - a[0])
    h2 = math.atan2(c[1] - b[1], c[0] - b[0])
    return wrap_angle(h2 - h1)


def _merge_vertices(vertices: List[np.ndarray], d_min: float, theta_cp: float) -> List[np.ndarray]:
    """Drop vertices that make edges shorter than d_min or turns below theta_cp."""
    verts = list(vertices)
    changed = True
    while changed and len(verts) > 2:
        changed = False
        for i in range(1, len(verts)):
            if math.dist(verts[i - 1], verts[i]) < d_min:
                del verts[i if i < len(verts) - 1 else i - 1]
                changed = True
                break
        if changed:
            continue
        for i in range(1, len(verts) - 1):
            if abs(_edge_turn(verts[i - 1], verts[i], verts[i + 1])) < theta_cp:
                del verts[i]
                changed = True
                break
    return verts


def segment_to_meme(
    polyline, config: Optional[ImitationConfig] = None, initial_heading: float = 0.0
) -> Tuple[Segment, ...]:
    """
    Infer (turn, advance) segments from a path.

    Corners are found by simplifying the path, then merged wherever the
    heading change is below theta_cp or an edge is shorter than d_min.
    The first turn is relative to initial_heading. Returns the segment
    list; the registry gives it an identity.
    """
    config = config or ImitationConfig()
    points = np.asarray(polyline, dtype=float)
    if len(points) < 2:
        raise ImitationFailure("Need at least two points to segment")
    if polyline_diameter(points) < config.d_min:
        raise ImitationFailure("Observed path is degenerate (all points within d_min)")

    keep = _douglas_peucker(points, config.simplify_tolerance)
    vertices = _merge_vertices([points[i] for i in keep], config.d_min, config.theta_cp)
    if len(vertices) == 2 and math.dist(vertices[0], vertices[1]) < config.d_min:
        raise ImitationFailure("Observed path is degenerate (all points within d_min)")

    segments: List[Segment] = []
    heading = initial_heading
    for a, b in zip(vertices[:-1], vertices[1:]):
        edge_heading = math.atan2(b[1] - a[1], b[0] - a[0])
        turn = wrap_angle(edge_heading - heading)
        heading = edge_heading
        length = math.dist(a, b)
        while length > MAX_ADVANCE:
            segments.append((turn, MAX_ADVANCE))
            turn = 0.0
            length -= MAX_ADVANCE
        segments.append((turn, length))

    if len(segments) > MAX_SEGMENTS:
        logger.debug("Clamping inferred meme from %d to %d segments", len(segments), MAX_SEGMENTS)
    return validate_segments(segments[:MAX_SEGMENTS])


@dataclass(frozen=True)
class FidelityScore:
    value: float
    high_fidelity: bool
    tau_hf: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"Fidelity {self.value} outside [0, 1]")
        if self.high_fidelity != (self.value >= self.tau_hf):
            raise ValueError("high_fidelity must agree with tau_hf")


def fidelity_value(meme_a, meme_b, n_points: int = 100) -> float:
    path_a = meme_polyline(meme_a)
    path_b = meme_polyline(meme_b)
    d_norm = max(bounding_circle_diameter(path_a), bounding_circle_diameter(path_b))
    if d_norm == 0.0:
        return 1.0
    a = resample_polyline(path_a, n_points)
    b = resample_polyline(path_b, n_points)
    mean_distance = float(np.mean(np.hypot(*(a - b).T)))
    return max(0.0, 1.0 - mean_distance / d_norm)


def fidelity(meme_a, meme_b, tau_hf: float = 0.8, n_points: int = 100) -> FidelityScore:
    """Similarity of two memes' ideal enactment paths, from a common start pose."""
    value = min(1.0, fidelity_value(meme_a, meme_b, n_points))
    return FidelityScore(value=value, high_fidelity=value >= tau_hf, tau_hf=tau_hf)


@dataclass
class Demonstration:
    meme: Meme
    teacher_id: int
    start_time: float
    end_time: float
    observations: Dict[int, Observation]
    teacher_path: np.ndarray


def demonstrate(
    arena: Arena,
    teacher_id: int,
    meme: Meme,
    watcher_ids: Sequence[int],
    config: Optional[ImitationConfig] = None,
    home: Optional[Tuple[float, float]] = None,
    log: Optional[EventLog] = None,
) -> Demonstration:
    """
    One teacher-mode turn: the teacher returns home facing theta = 0, the
    watchers turn to face it, then it enacts the meme once while every
    watcher records its camera samples.
    """
    config = config or ImitationConfig()
    if home is not None:
        if not drive_to(arena, teacher_id, home[0], home[1], 0.0, config.v_nom):
            arena.place(teacher_id, Pose(home[0], home[1], 0.0))
        face_each_other(arena, watcher_ids, teacher_id)

    teacher = arena.robot(teacher_id)
    schedule = enact(meme, teacher.pose, config.v_nom, config.w_nom, arena.dt)
    if log is not None:
        log.emit(
            "enactment",
            arena.time,
            [teacher_id, *watcher_ids],
            teacher=teacher_id,
            meme_id=meme.meme_id,
            watchers=list(watcher_ids),
            steps=len(schedule),
        )

    observations = {w: Observation(w, teacher_id, arena.dt) for w in watcher_ids}
    start_time = arena.time
    path = [(teacher.pose.x, teacher.pose.y)]

    def record():
        for watcher_id in watcher_ids:
            sample = arena.observe(watcher_id, teacher_id)
            if sample is not None:
                observations[watcher_id].add(sample, arena.robot(watcher_id).pose)

    record()
    for _ in range(config.settle_steps):
        arena.step()
        record()
    for v, w in schedule.commands:
        arena.step({teacher_id: (float(v), float(w))})
        path.append((teacher.pose.x, teacher.pose.y))
        record()
    for _ in range(config.settle_steps):
        arena.step()
        record()

    return Demonstration(meme, teacher_id, start_time, arena.time, observations, np.asarray(path))


def imitate_from_observation(
    observation: Observation,
    target_radius: float = 0.037,
    config: Optional[ImitationConfig] = None,
    initial_heading: float = 0.0,
) -> Tuple[Segment, ...]:
    """observe -> reconstruct -> segment, without touching any registry."""
    config = config or ImitationConfig()
    tracks = reconstruct_trajectory(observation, None, target_radius, config)
    if len(tracks) != 1:
        raise ImitationFailure(f"Lost sight of the teacher ({len(tracks)} track pieces)")
    if len(tracks[0].points) < config.min_samples:
        raise ImitationFailure("Track too short to segment")
    return segment_to_meme(tracks[0].points, config, initial_heading)


def imitate(
    arena: Arena,
    learner_id: int,
    teacher_id: int,
    meme_enactment: Demonstration,
    registry: MemeRegistry,
    config: Optional[ImitationConfig] = None,
    log: Optional[EventLog] = None,
) -> Tuple[Meme, FidelityScore]:
    """
    Infer the learner's copy of a demonstrated meme and register it.

    Raises ImitationFailure (after logging an imitation_failure event)
    when nothing usable was seen.
    """
    config = config or ImitationConfig()
    parent = meme_enactment.meme
    observation = meme_enactment.observations.get(learner_id)
    try:
        if observation is None:
            raise ImitationFailure(f"Robot {learner_id} did not watch this demonstration")
        radius = arena.robot(teacher_id).body.radius
        segments = imitate_from_observation(observation, radius, config)
    except ImitationFailure as e:
        if log is not None:
            log.emit(
                "imitation_failure",
                arena.time,
                [learner_id, teacher_id],
                learner=learner_id,
                teacher=teacher_id,
                parent_id=parent.meme_id,
                reason=str(e),
            )
        raise

    child = registry.register_copy(segments, parent.meme_id, learner_id, arena.time)
    score = fidelity(child, parent, config.tau_hf, config.fidelity_points)
    if log is not None:
        log.emit(
            "imitation",
            arena.time,
            [learner_id, teacher_id],
            learner=learner_id,
            teacher=teacher_id,
            meme=child.to_record(),
            parent_id=parent.meme_id,
            fidelity=score.value,
            high_fidelity=score.high_fidelity,
        )
    logger.debug("Robot %s copied meme %s -> %s (fidelity %.3f)",
                 learner_id, parent.meme_id, child.meme_id, score.value)
    return child, score
