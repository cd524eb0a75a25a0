"""
Run configuration for the Artificial Culture Lab simulator.

Configs are TOML files validated against the pydantic models below. Every
field has a default, so a config only needs to name what it changes.
"""

import hashlib
import json
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

__version__ = "1.0.0"

OUT_DIR_ENV = "CULTURE_LAB_OUT_DIR"
LOG_LEVEL_ENV = "CULTURE_LAB_LOG_LEVEL"


class ConfigError(ValueError):
    """Raised when a run config cannot be read or fails validation."""


class ArenaConfig(BaseModel):
    # Default enclosure, configurable per run
    width: float = Field(2.5, gt=0)
    height: float = Field(2.0, gt=0)
    dt: float = Field(0.05, gt=0)
    # Extra wall segments (x1, y1, x2, y2) inside the boundary
    obstacles: List[Tuple[float, float, float, float]] = Field(default_factory=list)


class RobotSpec(BaseModel):
    id: int = Field(..., ge=0)
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    radius: float = Field(0.037, gt=0)
    wheel_base: float = Field(0.053, gt=0)
    max_speed: float = Field(0.13, gt=0)
    max_turn_rate: Optional[float] = Field(None, gt=0)
    camera_fov: float = Field(1.4, gt=0, lt=math.pi)
    camera_resolution: int = Field(640, gt=0)
    ir_range: float = Field(0.06, gt=0)
    profile: str = "basic_copybot"
    goal: Optional[Tuple[float, float]] = None


class NoiseConfig(BaseModel):
    bearing_sigma: float = Field(0.01, ge=0)
    size_sigma: float = Field(0.05, ge=0)
    wheel_slip_sigma: float = Field(0.05, ge=0)
    ir_sigma: float = Field(0.05, ge=0)
    occlusion_enabled: bool = True
    tracker_sigma: float = Field(0.0, ge=0)

    def scaled(self, factor: float) -> "NoiseConfig":
        """Same profile with every sigma multiplied by factor."""
        return self.model_copy(
            update={
                "bearing_sigma": self.bearing_sigma * factor,
                "size_sigma": self.size_sigma * factor,
                "wheel_slip_sigma": self.wheel_slip_sigma * factor,
                "ir_sigma": self.ir_sigma * factor,
                "tracker_sigma": self.tracker_sigma * factor,
            }
        )


class ImitationConfig(BaseModel):
    v_nom: float = Field(0.1, gt=0)
    w_nom: float = Field(1.0, gt=0)
    tau_hf: float = Field(0.8, gt=0, lt=1)
    theta_cp: float = Field(0.35, gt=0)
    d_min: float = Field(0.02, gt=0)
    # Corner-finding tolerance when simplifying a reconstructed path
    simplify_tolerance: float = Field(0.025, gt=0)
    max_gap: float = Field(1.0, gt=0)
    # Idle steps recorded before and after each demonstration
    settle_steps: int = Field(5, ge=0)
    smoothing_window: int = Field(5, ge=1)
    min_samples: int = Field(4, ge=4)
    fidelity_points: int = Field(100, ge=2)


class MemoryConfig(BaseModel):
    policy: Literal["none", "limited", "unlimited"] = "limited"
    capacity: int = Field(5, ge=1)


class CEConfig(BaseModel):
    k: int = Field(30, ge=2)
    horizon: float = Field(10.0, gt=0)
    cycle_period: float = Field(0.5, gt=0)
    inner_dt: float = Field(0.1, gt=0)
    v_nom: float = Field(0.1, gt=0)
    w_collision: float = Field(100.0, ge=0)
    w_goal: float = Field(1.0, ge=0)
    other_model: Literal["constant_velocity", "conspecific"] = "conspecific"
    goal_tolerance: float = Field(0.05, gt=0)

    @model_validator(mode="after")
    def _check_budget(self):
        if self.horizon <= self.cycle_period:
            raise ValueError("horizon must exceed cycle_period")
        if self.inner_dt > self.cycle_period:
            raise ValueError("inner_dt must not exceed cycle_period")
        return self


class ChannelConfig(BaseModel):
    p0: float = Field(0.02, ge=0)
    k_d: float = Field(0.1, ge=0)
    k_phi: float = Field(0.1, ge=0)


class StoryConfig(BaseModel):
    strategy: Literal["random", "danger", "frequency", "prestige"] = "random"
    memory_policy: Literal["none", "limited", "unlimited"] = "limited"
    memory_capacity: int = Field(5, ge=1)
    autobio_capacity: Optional[int] = Field(None, ge=1)
    t_max: float = Field(5.0, gt=0)
    deference: float = Field(2.0, ge=0)
    r_enc: float = Field(0.3, gt=0)
    cooldown: float = Field(20.0, ge=0)
    utterance_time: float = Field(2.0, ge=0)
    # Keep the tested-but-not-selected what-ifs in autobiographical memory
    verbose_whatifs: bool = False


class RLConfig(BaseModel):
    cell_size: float = Field(0.1, gt=0)
    grid_width: int = Field(8, ge=2)
    grid_height: int = Field(8, ge=2)
    start_cell: Tuple[int, int] = (0, 0)
    goal_cell: Tuple[int, int] = (7, 7)
    # A bar across the middle so the shortest route has corners
    blocked_cells: List[Tuple[int, int]] = Field(default_factory=lambda: [(2, 4), (3, 4), (4, 4), (5, 4)])
    origin: Tuple[float, float] = (-0.15, -0.35)
    observer_pose: Tuple[float, float, float] = (-0.75, 0.0, 0.0)
    alpha: float = Field(0.5, gt=0, le=1)
    gamma: float = Field(0.95, gt=0, le=1)
    epsilon_start: float = Field(0.3, ge=0, le=1)
    epsilon_end: float = Field(0.05, ge=0, le=1)
    epsilon_decay: float = Field(0.97, gt=0, le=1)
    max_steps: int = Field(200, ge=1)
    max_episodes: int = Field(600, ge=1)
    criterion_successes: int = Field(3, ge=1)
    imitation_period: int = Field(5, ge=1)
    replay_sweeps: int = Field(20, ge=1)
    observation_noise_scale: float = Field(1.0, ge=0)
    demonstrator_path: Optional[str] = None


class ScheduleEntry(BaseModel):
    robot_id: int = Field(..., ge=0)
    spawn_time: float = Field(0.0, ge=0)


class ScenarioConfig(BaseModel):
    kind: Literal[
        "copybots", "rl", "pedestrian", "storybots", "memory_study", "imitation_trials"
    ] = "copybots"
    n_robots: int = Field(4, ge=1)
    rounds: int = Field(50, ge=0)
    trials: int = Field(500, ge=1)
    duration_minutes: float = Field(5.0, gt=0)
    seeds: int = Field(20, ge=1)
    conditions: List[str] = Field(default_factory=lambda: ["none", "limited(5)", "unlimited"])
    taus: List[float] = Field(default_factory=lambda: [0.6, 0.7, 0.8])
    seed_memes: List[Union[str, List[Tuple[float, float]]]] = Field(
        default_factory=lambda: ["triangle", "square"]
    )
    ring_radius: float = Field(0.35, gt=0)
    pedestrian_separation: float = Field(1.6, gt=0)
    timeout: float = Field(60.0, gt=0)
    hazard_corner: bool = True
    n_jobs: int = 1

    @field_validator("taus")
    @classmethod
    def _check_taus(cls, taus):
        for tau in taus:
            if not 0.0 < tau < 1.0:
                raise ValueError("every tau must lie in (0, 1)")
        return taus


class TelemetryConfig(BaseModel):
    # Pose snapshots every n arena steps (2 steps of 0.05 s = 10 Hz)
    pose_every: int = Field(2, ge=1)
    full_rate: bool = False
    ce_trace: bool = False


class RunConfig(BaseModel):
    seed: int = 0
    noise_scale: float = Field(1.0, ge=0)
    arena: ArenaConfig = Field(default_factory=ArenaConfig)
    robots: List[RobotSpec] = Field(default_factory=list)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    imitation: ImitationConfig = Field(default_factory=ImitationConfig)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    ce_budget: CEConfig = Field(default_factory=CEConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    story: StoryConfig = Field(default_factory=StoryConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    schedule: List[ScheduleEntry] = Field(default_factory=list)
    telemetry: TelemetryConfig = Field(default_factory=TelemetryConfig)

    @model_validator(mode="after")
    def _check_ids(self):
        ids = [robot.id for robot in self.robots]
        if len(ids) != len(set(ids)):
            raise ValueError("robot ids must be unique")
        return self

    def effective_noise(self) -> NoiseConfig:
        return self.noise.scaled(self.noise_scale)


def parse_config(data: dict) -> RunConfig:
    """Validate a raw config mapping."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e}") from e


def load_config(path) -> RunConfig:
    """Read and validate a TOML run config."""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file is not valid TOML: {path}: {e}") from e
    return parse_config(data)


def apply_calibration(config: RunConfig, calibration_path) -> RunConfig:
    """Apply a calibration JSON written by `calibrate`."""
    try:
        overrides = json.loads(Path(calibration_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read calibration file {calibration_path}: {e}") from e
    data = config.model_dump(mode="json")
    if "noise_scale" in overrides:
        data["noise_scale"] = overrides["noise_scale"]
    for section in ("noise", "channel"):
        if section in overrides:
            data[section].update(overrides[section])
    return parse_config(data)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def default_out_root() -> Path:
    """Output root from the environment (or a .env file), default ./runs."""
    load_dotenv()
    return Path(os.getenv(OUT_DIR_ENV, "runs"))
