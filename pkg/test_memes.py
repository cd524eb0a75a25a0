import math

import numpy as np
import pytest

from arena import Pose
from config import RobotSpec, RunConfig
from geometry import bounding_circle_diameter, resample_polyline
from meme_memory import MemeStore, MemoryPolicy, collective_memory, seed_robots
from memes import (
    MAX_ADVANCE,
    ImitationFailure,
    InvalidMemeError,
    MemeRegistry,
    demonstrate,
    enact,
    fidelity,
    imitate,
    meme_polyline,
    seed_segments,
    segment_to_meme,
    validate_segments,
)
from scenarios import build_arena, imitation_trials
from seeding import SeedManager
from telemetry import EventLog

SQUARE = seed_segments("square")
TRIANGLE = seed_segments("triangle")


def test_invalid_memes_are_rejected():
    for bad in ([], [(0.0, 0.1)] * 17, [(4.0, 0.1)], [(0.0, MAX_ADVANCE + 0.1)], [(0.0, -0.1)], [(math.nan, 0.1)]):
        with pytest.raises(InvalidMemeError):
            validate_segments(bad)
    with pytest.raises(InvalidMemeError):
        seed_segments("hexagon")


def test_triangle_closes():
    path = meme_polyline(TRIANGLE)
    assert path.shape == (4, 2)
    assert np.allclose(path[0], path[-1], atol=1e-12)


def test_enactment_schedule_reaches_end_pose():
    start = Pose(0.3, -0.2, 0.5)
    schedule = enact(SQUARE, start, v_nom=0.1, w_nom=1.0, dt=0.05)
    end = schedule.integrate()
    assert abs(end.x - schedule.end_pose.x) < 1e-9
    assert abs(end.y - schedule.end_pose.y) < 1e-9
    assert np.all(np.abs(schedule.commands[:, 0]) <= 0.1 + 1e-12)
    assert np.all(np.abs(schedule.commands[:, 1]) <= 1.0 + 1e-12)


def test_straight_first_leg_is_enacted():
    start = Pose(0.0, 0.0, 0.0)
    schedule = enact(((0.0, 0.1), (math.pi / 2, 0.1)), start, v_nom=0.1, w_nom=1.0, dt=0.05)
    # 20 steps ahead, 32 turning, 20 ahead
    assert len(schedule) == 72
    assert tuple(schedule.commands[0]) == pytest.approx((0.1, 0.0))
    end = schedule.integrate()
    assert end.x == pytest.approx(0.1, abs=1e-9)
    assert end.y == pytest.approx(0.1, abs=1e-9)
    assert end.theta == pytest.approx(math.pi / 2, abs=1e-9)
    assert schedule.end_pose.x == pytest.approx(end.x, abs=1e-9)


def test_fidelity_scores():
    same = fidelity(SQUARE, SQUARE)
    assert same.value == 1.0 and same.high_fidelity
    different = fidelity(SQUARE, TRIANGLE)
    assert 0.0 <= different.value < 1.0
    assert fidelity(SQUARE, TRIANGLE).value == fidelity(TRIANGLE, SQUARE).value


def test_fidelity_is_normalised_by_the_bounding_circle():
    # 15 cm equilateral triangle: circumscribed circle, not the side length
    assert bounding_circle_diameter(meme_polyline(TRIANGLE)) == pytest.approx(0.3 / math.sqrt(3))
    assert bounding_circle_diameter(meme_polyline(SQUARE)) == pytest.approx(0.15 * math.sqrt(2))
    assert bounding_circle_diameter([(0.0, 0.0), (1.0, 0.0), (0.3, 0.0)]) == pytest.approx(1.0)
    assert bounding_circle_diameter([(0.2, 0.2)]) == 0.0

    a = resample_polyline(meme_polyline(SQUARE), 100)
    b = resample_polyline(meme_polyline(TRIANGLE), 100)
    expected = max(0.0, 1.0 - np.mean(np.hypot(*(a - b).T)) / (0.15 * math.sqrt(2)))
    assert fidelity(SQUARE, TRIANGLE).value == pytest.approx(expected)


def test_segmenting_an_ideal_square():
    dense = resample_polyline(meme_polyline(SQUARE), 200)
    segments = segment_to_meme(dense)
    assert len(segments) == 4
    assert abs(segments[0][0] - math.pi / 2) < 0.1
    assert fidelity(segments, SQUARE).value > 0.95


def test_long_edges_are_split():
    segments = segment_to_meme([(0.0, 0.0), (1.2, 0.0)])
    assert [round(a, 9) for _, a in segments] == [0.5, 0.5, 0.2]
    assert segments[1][0] == 0.0


def test_registry_lineage():
    registry = MemeRegistry()
    root = registry.register_seed(SQUARE, tag=1, owners=[0, 1])
    child = registry.register_copy(TRIANGLE, root.meme_id, owner_id=1, t=5.0)
    assert child.parent_id == root.meme_id
    assert [m.meme_id for m in registry.roots()] == [root.meme_id]
    with pytest.raises(InvalidMemeError):
        registry.register_copy(TRIANGLE, 99, owner_id=1, t=6.0)
    with pytest.raises(InvalidMemeError):
        registry.register_copy(TRIANGLE, child.meme_id, owner_id=0, t=1.0)


def test_zero_noise_imitation_is_high_fidelity():
    config = RunConfig.model_validate({"noise_scale": 0.0, "scenario": {"seed_memes": ["triangle"]}})
    log = EventLog()
    trials = imitation_trials(config, n_trials=2, log=log)
    assert trials.failures == 0
    assert trials.mean_fidelity > 0.8
    imitations = log.of_kind("imitation")
    assert len(imitations) == 2
    assert all(e["payload"]["parent_id"] == 1 for e in imitations)


def test_imitation_round_at_default_noise():
    log = EventLog()
    trials = imitation_trials(RunConfig(), n_trials=1, log=log)
    assert trials.failures + len(trials.fidelities) == 1
    for event in log.of_kind("imitation"):
        payload = event["payload"]
        child = [tuple(segment) for segment in payload["meme"]["segments"]]
        assert payload["fidelity"] == pytest.approx(fidelity(child, TRIANGLE).value)
        assert 0.0 <= payload["fidelity"] <= 1.0


def watch_past_a_bystander(occlusion: bool):
    """Robot 2 stands just in front of the learner, on its line of sight to the teacher."""
    config = RunConfig.model_validate({"noise_scale": 0.0, "noise": {"occlusion_enabled": occlusion}})
    specs = [RobotSpec(id=0), RobotSpec(id=1, x=-0.5), RobotSpec(id=2, x=-0.42, y=0.011)]
    arena = build_arena(config, SeedManager(0), None, specs)
    registry = MemeRegistry()
    parent = registry.register_seed(TRIANGLE, tag=1, owners=[0])
    demo = demonstrate(arena, 0, parent, [1], config.imitation)
    return arena, registry, demo, config


def test_occlusion_hides_the_demonstration():
    arena, registry, demo, config = watch_past_a_bystander(occlusion=False)
    _, score = imitate(arena, 1, 0, demo, registry, config.imitation)
    assert score.value > 0.8

    arena, registry, demo, config = watch_past_a_bystander(occlusion=True)
    assert not demo.observations[1].samples
    log = EventLog()
    with pytest.raises(ImitationFailure):
        imitate(arena, 1, 0, demo, registry, config.imitation, log)
    assert len(log.of_kind("imitation_failure")) == 1
    assert len(registry) == 1


def test_fidelity_drops_as_bearing_noise_rises():
    def mean_fidelity(bearing_sigma):
        config = RunConfig.model_validate({
            "noise": {"bearing_sigma": bearing_sigma, "size_sigma": 0.0, "wheel_slip_sigma": 0.0, "ir_sigma": 0.0},
            "scenario": {"seed_memes": ["triangle"]},
        })
        return imitation_trials(config, n_trials=3).mean_fidelity

    quiet, noisy = mean_fidelity(0.0), mean_fidelity(0.15)
    assert quiet > 0.8
    assert noisy < quiet


def test_memory_policies():
    assert MemoryPolicy.parse("limited(3)").capacity == 3
    assert MemoryPolicy.parse("none").max_entries == 1
    assert MemoryPolicy.parse("unlimited").max_entries is None
    with pytest.raises(ValueError):
        MemoryPolicy.parse("forgetful")

    registry = MemeRegistry()
    memes = [registry.register_seed(SQUARE, tag=i) for i in range(1, 5)]
    log = EventLog()
    store = MemeStore(0, "limited(2)", log)
    evicted = []
    for t, meme in enumerate(memes):
        evicted += store.store(meme, float(t))
    assert store.meme_ids == [3, 4]
    assert evicted == [1, 2]
    assert [e["payload"]["meme_id"] for e in log.of_kind("eviction")] == [1, 2]

    unlimited = MemeStore(1, "unlimited")
    for meme in memes:
        unlimited.store(meme, 0.0)
    assert len(unlimited) == 4


def test_selection_is_uniform_and_empty_store_skips():
    registry = MemeRegistry()
    store = MemeStore(0, "unlimited")
    assert store.select_for_enactment(np.random.default_rng(0)) is None
    for i in range(1, 4):
        store.store(registry.register_seed(SQUARE, tag=i), 0.0)
    rng = np.random.default_rng(1)
    picks = [store.select_for_enactment(rng) for _ in range(3000)]
    counts = np.bincount(picks)[1:]
    assert np.all(np.abs(counts / 3000 - 1 / 3) < 0.05)


def test_seeding_shares_one_root_per_shape():
    registry = MemeRegistry()
    stores = [MemeStore(rid, "limited(5)") for rid in range(3)]
    seeds = seed_robots(stores, ["triangle", "square"], registry)
    assert [m.seed_tag for m in seeds] == [1, 2]
    assert collective_memory(stores) == {1: 3, 2: 3}


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
