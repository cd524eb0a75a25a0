import math

import numpy as np
import pytest

from arena import Arena, NoiseProfile, Pose, RobotBody, UnknownRobotError, apparent_size, ring_poses
from geometry import (
    integrate_unicycle,
    point_segment_distance,
    resample_polyline,
    sweep_circle_circle,
    sweep_circle_segment,
    wrap_angle,
)
from seeding import SeedManager, derive_seed
from telemetry import EventLog


def two_robot_arena(pose_a, pose_b, log=None, noise=None):
    arena = Arena(noise=noise, log=log)
    arena.add_robot(RobotBody(0), pose_a)
    arena.add_robot(RobotBody(1), pose_b)
    return arena


def test_wrap_angle():
    assert abs(abs(wrap_angle(3 * math.pi)) - math.pi) < 1e-9
    assert abs(wrap_angle(2 * math.pi + 0.25) - 0.25) < 1e-12
    wrapped = wrap_angle(np.array([0.0, 4.0, -4.0]))
    assert np.all(wrapped >= -math.pi) and np.all(wrapped < math.pi)


def test_integrate_unicycle_straight_and_spin():
    x, y, theta = integrate_unicycle(0.0, 0.0, 0.0, 0.1, 0.0, 1.0)
    assert abs(x - 0.1) < 1e-12 and abs(y) < 1e-12 and abs(theta) < 1e-12

    x, y, theta = integrate_unicycle(0.0, 0.0, 0.0, 0.0, 1.0, 0.5)
    assert abs(x) < 1e-12 and abs(y) < 1e-12 and abs(theta - 0.5) < 1e-12


def test_integrate_unicycle_quarter_circle():
    # v/w = 1 m radius, quarter turn ends at (1, 1) facing +y
    x, y, theta = integrate_unicycle(0.0, 0.0, 0.0, 1.0, 1.0, math.pi / 2)
    assert abs(x - 1.0) < 1e-9 and abs(y - 1.0) < 1e-9 and abs(theta - math.pi / 2) < 1e-9


def test_sweep_closed_forms():
    # circle of radius 0.1 moving +x by 1 m towards a wall at x = 0.5
    s = sweep_circle_segment(0.0, 0.0, 1.0, 0.0, 0.1, 0.5, -1.0, 0.5, 1.0)
    assert abs(float(s) - 0.4) < 1e-12

    # moving away never hits
    s = sweep_circle_segment(0.0, 0.0, -1.0, 0.0, 0.1, 0.5, -1.0, 0.5, 1.0)
    assert math.isinf(float(s))

    # two discs, radii summing to 0.2, centres 0.5 apart
    s = sweep_circle_circle(0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.2)
    assert abs(float(s) - 0.3) < 1e-12


def test_sweep_against_ray_march():
    rng = np.random.default_rng(42)
    radius = 0.05
    wall = (-0.3, 0.4, 0.5, -0.2)
    checked = 0
    for _ in range(200):
        px, py = rng.uniform(-1, 1, size=2)
        start, _, _ = point_segment_distance(px, py, *wall)
        if start <= radius + 1e-3:
            continue
        dx, dy = rng.uniform(-1.5, 1.5, size=2)
        s = float(sweep_circle_segment(px, py, dx, dy, radius, *wall))
        march = np.linspace(0.0, 1.0, 4001)
        dists, _, _ = point_segment_distance(px + march * dx, py + march * dy, *wall)
        inside = np.nonzero(dists < radius)[0]
        if math.isinf(s):
            assert len(inside) == 0
        else:
            d, _, _ = point_segment_distance(px + s * dx, py + s * dy, *wall)
            assert abs(float(d) - radius) < 1e-9
            if len(inside):
                assert march[inside[0]] >= s - 1e-9
        checked += 1
    assert checked > 100


def test_resample_polyline_uniform():
    points = resample_polyline([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)], 5)
    assert points.shape == (5, 2)
    assert np.allclose(points[2], (1.0, 0.0))
    assert np.allclose(points[-1], (1.0, 1.0))


def test_robot_stops_at_wall():
    log = EventLog()
    arena = Arena(log=log)
    arena.add_robot(RobotBody(0), Pose(1.0, 0.0, 0.0))
    for _ in range(60):
        arena.step({0: (0.13, 0.0)})
        assert arena.penetration_free()
    pose = arena.robot(0).pose
    assert abs(pose.x - (1.25 - 0.037)) < 1e-9
    collisions = log.of_kind("collision")
    assert collisions and collisions[0]["payload"]["target"] == "wall"


def test_head_on_robots_never_interpenetrate():
    arena = two_robot_arena(Pose(-0.2, 0.0, 0.0), Pose(0.2, 0.0, math.pi))
    for _ in range(80):
        arena.step({0: (0.13, 0.0), 1: (0.13, 0.0)})
        assert arena.penetration_free()
    gap = arena.robot(0).pose.distance_to(arena.robot(1).pose)
    assert abs(gap - 0.074) < 1e-6


def test_observe_bearing_size_and_occlusion():
    arena = two_robot_arena(Pose(0.0, 0.0, 0.0), Pose(0.5, 0.0, math.pi))
    sample = arena.observe(0, 1)
    assert sample is not None
    assert abs(sample.bearing) < 1e-9
    assert abs(sample.apparent_size - apparent_size(0.037, 0.5)) < 1e-12

    arena.robot(0).pose = Pose(0.0, 0.0, math.pi)
    assert arena.observe(0, 1) is None

    arena.robot(0).pose = Pose(0.0, 0.0, 0.0)
    arena.add_robot(RobotBody(2), Pose(0.25, 0.0, 0.0))
    assert arena.observe(0, 1) is None


def test_proximity_sensors():
    arena = Arena()
    arena.add_robot(RobotBody(0), Pose(1.2, 0.0, 0.0))
    ranges = arena.read_proximity(0)
    assert ranges.shape == (8,)
    assert abs(ranges[0] - (1.25 - 1.2 - 0.037)) < 1e-9
    assert ranges[4] == pytest.approx(0.06)


def test_encounter_pairs_need_mutual_view():
    arena = two_robot_arena(Pose(-0.1, 0.0, 0.0), Pose(0.1, 0.0, math.pi))
    assert arena.encounter_pairs(0.3) == [(0, 1)]
    arena.robot(1).pose = Pose(0.1, 0.0, 0.0)
    assert arena.encounter_pairs(0.3) == []
    with pytest.raises(ValueError):
        arena.encounter_pairs(0.0)


def test_noisy_runs_repeat_under_the_same_seed():
    noise = NoiseProfile(bearing_sigma=0.02, size_sigma=0.05, wheel_slip_sigma=0.1, rng_seed=9)

    def run():
        arena = two_robot_arena(Pose(-0.5, 0.0, 0.0), Pose(0.5, 0.2, math.pi), noise=noise)
        samples = []
        for _ in range(40):
            arena.step({0: (0.1, 0.3), 1: (0.1, -0.2)})
            samples.append(arena.observe(0, 1))
        return arena.robot(0).pose, arena.robot(1).pose, samples

    assert run() == run()


def test_unknown_robot():
    arena = Arena()
    with pytest.raises(UnknownRobotError):
        arena.robot(99)


def test_seed_streams_are_independent():
    seeds = SeedManager(3)
    first = seeds.robot_stream(0, "camera").normal()
    other = SeedManager(3)
    other.robot_stream(5, "camera").normal()
    assert other.robot_stream(0, "camera").normal() == first
    assert derive_seed(3, "a") != derive_seed(3, "b")


def test_ring_poses_face_centre():
    for pose in ring_poses(4, 0.5):
        bearing = math.atan2(-pose.y, -pose.x)
        assert abs(wrap_angle(bearing - pose.theta)) < 1e-9


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
