"""
Deterministic 2D arena with differential-drive (unicycle) robots.

The arena owns ground truth: robot poses, walls and the clock. Robots sense
it only through the synthetic camera (bearing + apparent size of another
robot) and the eight infra-red proximity rays.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import ArenaConfig, NoiseConfig, RobotSpec, RunConfig
from geometry import (
    integrate_unicycle,
    point_segment_distance,
    ray_circle_distance,
    ray_segment_distance,
    segment_circle_intersects,
    segments_intersect,
    sweep_circle_circle,
    sweep_circle_segment,
    wrap_angle,
)
from seeding import SeedManager
from telemetry import EventLog

logger = logging.getLogger(__name__)

IR_COUNT = 8
# Body-frame sensor directions: front, then counter-clockwise every 45 degrees
IR_ANGLES = tuple(k * math.pi / 4.0 for k in range(IR_COUNT))

# Allowed interpenetration when checking logged states
PENETRATION_EPS = 1e-9


class UnknownRobotError(KeyError):
    """Raised when a robot id is not present in the arena."""


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"Pose must be finite, got {self}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.theta]


@dataclass
class RobotBody:
    id: int
    radius: float = 0.037
    wheel_base: float = 0.053
    max_speed: float = 0.13
    max_turn_rate: Optional[float] = None
    camera_fov: float = 1.4
    camera_resolution: int = 640
    ir_count: int = IR_COUNT
    ir_range: float = 0.06

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.ir_count != IR_COUNT:
            raise ValueError("e-puck bodies carry exactly 8 proximity sensors")
        if not 0 < self.camera_fov < math.pi:
            raise ValueError("camera_fov must lie in (0, pi)")
        if self.max_turn_rate is None:
            # Both wheels at full speed in opposite directions
            self.max_turn_rate = 2.0 * self.max_speed / self.wheel_base

    @classmethod
    def from_spec(cls, spec: RobotSpec) -> "RobotBody":
        return cls(
            id=spec.id,
            radius=spec.radius,
            wheel_base=spec.wheel_base,
            max_speed=spec.max_speed,
            max_turn_rate=spec.max_turn_rate,
            camera_fov=spec.camera_fov,
            camera_resolution=spec.camera_resolution,
            ir_range=spec.ir_range,
        )


@dataclass(frozen=True)
class Wall:
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class NoiseProfile:
    bearing_sigma: float = 0.0
    size_sigma: float = 0.0
    wheel_slip_sigma: float = 0.0
    ir_sigma: float = 0.0
    occlusion_enabled: bool = True
    rng_seed: int = 0
    tracker_sigma: float = 0.0

    def __post_init__(self):
        for name in ("bearing_sigma", "size_sigma", "wheel_slip_sigma", "ir_sigma", "tracker_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, noise: NoiseConfig, seed: int) -> "NoiseProfile":
        return cls(
            bearing_sigma=noise.bearing_sigma,
            size_sigma=noise.size_sigma,
            wheel_slip_sigma=noise.wheel_slip_sigma,
            ir_sigma=noise.ir_sigma,
            occlusion_enabled=noise.occlusion_enabled,
            rng_seed=seed,
            tracker_sigma=noise.tracker_sigma,
        )


@dataclass
class RobotState:
    body: RobotBody
    pose: Pose
    v: float = 0.0
    w: float = 0.0
    goal: Optional[Tuple[float, float]] = None
    active: bool = True


@dataclass(frozen=True)
class ObservationSample:
    t: float
    bearing: float
    apparent_size: float


def apparent_size(radius: float, distance: float) -> float:
    """Angle subtended by a robot of the given radius at the given range."""
    return 2.0 * math.atan(radius / distance)


def range_from_size(radius: float, size: float) -> float:
    """Inverse of apparent_size. Accepts a scalar or an array of sizes."""
    return radius / np.tan(np.asarray(size, dtype=float) / 2.0)


class Arena:
    """Rectangular arena centred on the origin, stepped at a fixed dt."""

    def __init__(
        self,
        width: float = 2.5,
        height: float = 2.0,
        dt: float = 0.05,
        noise: Optional[NoiseProfile] = None,
        seeds: Optional[SeedManager] = None,
        walls: Optional[Sequence[Wall]] = None,
        obstacles: Sequence[Tuple[float, float, float, float]] = (),
        log: Optional[EventLog] = None,
        pose_every: int = 2,
    ):
        self.width = width
        self.height = height
        self.dt = dt
        self.noise = noise or NoiseProfile()
        self.seeds = seeds or SeedManager(self.noise.rng_seed)
        self.log = log
        self.pose_every = pose_every
        self.time = 0.0
        self.step_count = 0
        self.robots: Dict[int, RobotState] = {}
        # (t, robot, wall-or-robot) contacts of the latest step
        self.last_collisions: List[Tuple[float, int, object]] = []

        if walls is None:
            hw, hh = width / 2.0, height / 2.0
            walls = [
                Wall(-hw, -hh, hw, -hh),
                Wall(hw, -hh, hw, hh),
                Wall(hw, hh, -hw, hh),
                Wall(-hw, hh, -hw, -hh),
            ]
        self.walls: List[Wall] = list(walls) + [Wall(*seg) for seg in obstacles]

    @classmethod
    def from_config(cls, config: RunConfig, seeds: SeedManager, log: Optional[EventLog] = None) -> "Arena":
        arena_cfg: ArenaConfig = config.arena
        noise = NoiseProfile.from_config(config.effective_noise(), seeds.seed)
        pose_every = 1 if config.telemetry.full_rate else config.telemetry.pose_every
        return cls(
            width=arena_cfg.width,
            height=arena_cfg.height,
            dt=arena_cfg.dt,
            noise=noise,
            seeds=seeds,
            obstacles=arena_cfg.obstacles,
            log=log,
            pose_every=pose_every,
        )

    # ------------------------------------------------------------------ robots

    def add_robot(self, body: RobotBody, pose: Pose, goal=None, active: bool = True) -> RobotState:
        if body.id in self.robots:
            raise ValueError(f"Robot {body.id} already in the arena")
        state = RobotState(body=body, pose=pose, goal=goal, active=active)
        self.robots[body.id] = state
        self.robots = dict(sorted(self.robots.items()))
        if active and self.log is not None:
            self.log.emit("spawn", self.time, [body.id], pose=pose.as_list())
        return state

    def activate(self, robot_id: int):
        state = self.robot(robot_id)
        if not state.active:
            state.active = True
            if self.log is not None:
                self.log.emit("spawn", self.time, [robot_id], pose=state.pose.as_list())

    def robot(self, robot_id: int) -> RobotState:
        try:
            return self.robots[robot_id]
        except KeyError:
            raise UnknownRobotError(robot_id) from None

    def active_ids(self) -> List[int]:
        return [rid for rid, state in self.robots.items() if state.active]

    def place(self, robot_id: int, pose: Pose):
        """Move a robot directly (scenario setup and resets)."""
        state = self.robot(robot_id)
        state.pose = pose
        state.v = state.w = 0.0
        if self.log is not None:
            self.log.emit("reposition", self.time, [robot_id], pose=pose.as_list())

    # -------------------------------------------------------------- stepping

    def step(self, commands: Optional[Dict[int, Tuple[float, float]]] = None) -> "Arena":
        """
        Advance every active robot by one dt under (v, w) commands.

        Commands are clamped to the body limits, perturbed by multiplicative
        wheel slip, and motion stops at the first contact with a wall or
        another robot.
        """
        commands = commands or {}
        t0 = self.time
        collisions = []

        for rid in self.active_ids():
            state = self.robots[rid]
            body = state.body
            v, w = commands.get(rid, (0.0, 0.0))
            v = float(np.clip(v, -body.max_speed, body.max_speed))
            w = float(np.clip(w, -body.max_turn_rate, body.max_turn_rate))

            wheels = self.seeds.robot_stream(rid, "wheels")
            slip = wheels.normal(0.0, self.noise.wheel_slip_sigma, size=2)
            v *= 1.0 + slip[0]
            w *= 1.0 + slip[1]

            pose = state.pose
            x, y, theta = integrate_unicycle(pose.x, pose.y, pose.theta, v, w, self.dt)
            dx, dy = float(x) - pose.x, float(y) - pose.y

            s, hit = self._first_contact(rid, pose.x, pose.y, dx, dy, body.radius)
            if math.isfinite(s):
                state.pose = Pose(pose.x + s * dx, pose.y + s * dy, pose.theta + s * w * self.dt)
                state.v, state.w = 0.0, w
                collisions.append((t0 + s * self.dt, rid, hit))
            else:
                state.pose = Pose(float(x), float(y), float(theta))
                state.v, state.w = v, w

        self.step_count += 1
        self.time = self.step_count * self.dt
        self.last_collisions = sorted(collisions, key=lambda c: (c[0], c[1]))

        if self.log is not None:
            for t_contact, rid, hit in self.last_collisions:
                robots = [rid] if hit == "wall" else [rid, hit]
                self.log.emit("collision", t_contact, robots, robot=rid, target=hit)
            if self.step_count % self.pose_every == 0:
                self.log.emit(
                    "pose",
                    self.time,
                    self.active_ids(),
                    poses={rid: self.robots[rid].pose.as_list() for rid in self.active_ids()},
                )
        return self

    def _first_contact(self, rid, px, py, dx, dy, radius):
        """Earliest contact fraction of this step's displacement, and what was hit."""
        best, hit = math.inf, None
        if dx == 0.0 and dy == 0.0:
            return best, hit
        for wall in self.walls:
            s = float(sweep_circle_segment(px, py, dx, dy, radius, wall.x1, wall.y1, wall.x2, wall.y2))
            if s < best:
                best, hit = s, "wall"
        for other_id in self.active_ids():
            if other_id == rid:
                continue
            other = self.robots[other_id]
            s = float(
                sweep_circle_circle(px, py, dx, dy, other.pose.x, other.pose.y, radius + other.body.radius)
            )
            if s < best:
                best, hit = s, other_id
        return best, hit

    # --------------------------------------------------------------- sensing

    def _occluded(self, observer: RobotState, target: RobotState) -> bool:
        a = (observer.pose.x, observer.pose.y)
        b = (target.pose.x, target.pose.y)
        for wall in self.walls:
            if segments_intersect(a, b, (wall.x1, wall.y1), (wall.x2, wall.y2)):
                return True
        if not self.noise.occlusion_enabled:
            return False
        for rid in self.active_ids():
            if rid in (observer.body.id, target.body.id):
                continue
            third = self.robots[rid]
            if segment_circle_intersects(a[0], a[1], b[0], b[1], third.pose.x, third.pose.y, third.body.radius):
                return True
        return False

    def _bearing(self, observer: RobotState, target: RobotState) -> Tuple[float, float]:
        dx = target.pose.x - observer.pose.x
        dy = target.pose.y - observer.pose.y
        return wrap_angle(math.atan2(dy, dx) - observer.pose.theta), math.hypot(dx, dy)

    def can_see(self, observer_id: int, target_id: int) -> bool:
        """Noise-free visibility: target centre inside the fov and unoccluded."""
        observer = self.robot(observer_id)
        target = self.robot(target_id)
        if not (observer.active and target.active):
            return False
        bearing, _ = self._bearing(observer, target)
        if abs(bearing) > observer.body.camera_fov / 2.0:
            return False
        return not self._occluded(observer, target)

    def observe(self, observer_id: int, target_id: int) -> Optional[ObservationSample]:
        """
        One camera sample of target_id as seen by observer_id, or None when the
        target is out of view or occluded.
        """
        observer = self.robot(observer_id)
        target = self.robot(target_id)
        if not (observer.active and target.active):
            return None
        fov = observer.body.camera_fov
        bearing, distance = self._bearing(observer, target)
        if abs(bearing) > fov / 2.0 or self._occluded(observer, target):
            return None

        camera = self.seeds.robot_stream(observer_id, "camera")
        bearing_noise, size_noise = camera.normal(0.0, 1.0, size=2)
        noisy = bearing + self.noise.bearing_sigma * bearing_noise
        pixel = fov / observer.body.camera_resolution
        quantised = math.floor(noisy / pixel + 0.5) * pixel
        quantised = float(np.clip(quantised, -fov / 2.0, fov / 2.0))

        size = apparent_size(target.body.radius, distance) * (1.0 + self.noise.size_sigma * size_noise)
        size = max(size, 1e-6)
        return ObservationSample(t=self.time, bearing=quantised, apparent_size=size)

    def read_proximity(self, robot_id: int) -> np.ndarray:
        """Eight IR ranges measured from the body surface, clipped to ir_range."""
        state = self.robot(robot_id)
        body = state.body
        ir = self.seeds.robot_stream(robot_id, "ir")
        noise = ir.normal(0.0, 1.0, size=IR_COUNT)

        ranges = np.empty(IR_COUNT)
        for k, angle in enumerate(IR_ANGLES):
            heading = state.pose.theta + angle
            ux, uy = math.cos(heading), math.sin(heading)
            ox = state.pose.x + body.radius * ux
            oy = state.pose.y + body.radius * uy
            nearest = math.inf
            for wall in self.walls:
                nearest = min(nearest, ray_segment_distance(ox, oy, ux, uy, wall.x1, wall.y1, wall.x2, wall.y2))
            for other_id in self.active_ids():
                if other_id == robot_id:
                    continue
                other = self.robots[other_id]
                nearest = min(
                    nearest, ray_circle_distance(ox, oy, ux, uy, other.pose.x, other.pose.y, other.body.radius)
                )
            reading = min(nearest, body.ir_range) * (1.0 + self.noise.ir_sigma * noise[k])
            ranges[k] = float(np.clip(reading, 0.0, body.ir_range))
        return ranges

    def encounter_pairs(self, r_enc: float) -> List[Tuple[int, int]]:
        """Unordered pairs closer than r_enc that can see each other."""
        if r_enc <= 0:
            raise ValueError("r_enc must be positive")
        ids = self.active_ids()
        pairs = []
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if self.robots[a].pose.distance_to(self.robots[b].pose) >= r_enc:
                    continue
                if self.can_see(a, b) and self.can_see(b, a):
                    pairs.append((a, b))
        return pairs

    # ------------------------------------------------------------- invariants

    def penetration_free(self) -> bool:
        """True when no two robots and no robot and wall overlap."""
        ids = self.active_ids()
        for i, a in enumerate(ids):
            ra = self.robots[a]
            for wall in self.walls:
                d = _point_segment(ra.pose.x, ra.pose.y, wall)
                if d < ra.body.radius - PENETRATION_EPS:
                    return False
            for b in ids[i + 1:]:
                rb = self.robots[b]
                if ra.pose.distance_to(rb.pose) < ra.body.radius + rb.body.radius - PENETRATION_EPS:
                    return False
        return True


def _point_segment(px, py, wall: Wall) -> float:
    d, _, _ = point_segment_distance(px, py, wall.x1, wall.y1, wall.x2, wall.y2)
    return float(d)


def ring_poses(n: int, radius: float, face_centre: bool = True) -> List[Pose]:
    """Evenly spaced poses on a circle around the arena centre."""
    poses = []
    for k in range(n):
        angle = 2.0 * math.pi * k / n
        x, y = radius * math.cos(angle), radius * math.sin(angle)
        theta = angle + math.pi if face_centre else angle
        poses.append(Pose(x, y, theta))
    return poses
