import itertools

import numpy as np
import pytest

from lineage_analysis import (
    build_lineage,
    churn,
    cluster,
    cluster_stories,
    collective_clusters,
    final_collective_memory,
    memory_study,
    retell_stats,
    story_population,
    story_similarity,
    write_reports,
)
from memes import Meme
from telemetry import EVENTS_FILE, CorruptLogError, EventLog

LINE = ((0.0, 0.5),)
BENT = ((0.1, 0.5),)  # fidelity 0.95 against LINE
BACK = ((3.0, 0.5),)  # almost nothing in common with LINE

WALL_STORY = "IF I FORWARD 20 THEN COLLIDE WALL".split()
MISHEARD = "IF I FORWARD 40 THEN COLLIDE WALL".split()


def seed(log, meme_id, segments, owners, t=0.0):
    meme = Meme(segments, meme_id, None, list(owners), seed_tag=meme_id, created_at=t)
    log.emit("seed", t, owners, meme=meme.to_record())


def copy(log, meme_id, parent_id, segments, learner, t, value=0.9):
    meme = Meme(segments, meme_id, parent_id, [learner], created_at=t)
    log.emit("imitation", t, [learner], learner=learner, teacher=0, meme=meme.to_record(),
             parent_id=parent_id, fidelity=value, high_fidelity=value >= 0.8)


def meme_run():
    log = EventLog()
    for rid in range(3):
        log.emit("spawn", 0.0, [rid], pose=[0.0, 0.0, 0.0])
    seed(log, 1, LINE, [0, 1, 2])
    copy(log, 2, 1, BENT, learner=1, t=10.0)
    copy(log, 3, 2, BACK, learner=2, t=20.0, value=0.1)
    log.emit("eviction", 20.0, [2], robot=2, meme_id=1)
    log.emit("store_snapshot", 20.0, [0, 1, 2], round=0, stores={0: [1], 1: [1, 2], 2: [3]})
    return log.events


def story(log, story_id, author, tokens, t):
    log.emit("story", t, [author], story={"story_id": story_id, "parent_story_id": None, "teller_id": author,
                                          "root_author": author, "tokens": tokens})


def exchange(log, t, teller, listener, told_id, heard_id, root_author, told_tokens, heard_tokens=None,
             fresh=False):
    heard_tokens = told_tokens if heard_tokens is None else heard_tokens
    log.emit(
        "exchange", t, [teller, listener],
        teller=teller, listener=listener, told_story_id=told_id, root_author=root_author,
        retold=not fresh, fresh=fresh, told_tokens=told_tokens,
        heard={"story_id": heard_id, "parent_story_id": told_id, "root_author": root_author, "tokens": heard_tokens},
        story_id=heard_id, parent_story_id=told_id, discarded=False, divergence=heard_tokens != told_tokens,
    )


def story_run():
    log = EventLog()
    for rid in range(3):
        log.emit("spawn", 0.0, [rid], pose=[0.0, 0.0, 0.0])
    log.emit("spawn", 5.0, [3], pose=[0.0, 0.0, 0.0])
    story(log, 1, 0, WALL_STORY, t=10.0)
    exchange(log, 10.0, 0, 1, 1, 2, 0, WALL_STORY, fresh=True)
    exchange(log, 40.0, 1, 2, 2, 3, 0, WALL_STORY)
    exchange(log, 70.0, 2, 3, 3, 4, 0, WALL_STORY)
    exchange(log, 90.0, 1, 3, 2, 5, 0, WALL_STORY, heard_tokens=MISHEARD)
    return log.events


def test_meme_lineage_is_a_forest():
    lineage = build_lineage(meme_run())
    assert lineage.roots == ["m1"]
    assert lineage.nodes_of("meme") == ["m1", "m2", "m3"]
    assert lineage.root_of("m3") == "m1"
    assert lineage.graph.nodes["m3"]["high_fidelity"] is False
    assert lineage.is_forest()


def test_story_lineage_follows_retellings():
    lineage = build_lineage(story_run())
    assert lineage.roots == ["s1"]
    assert sorted(lineage.graph.successors("s2")) == ["s3", "s5"]
    assert lineage.graph.nodes["s4"]["high_fidelity"]
    assert not lineage.graph.nodes["s5"]["high_fidelity"]


def test_dangling_parent_is_corrupt():
    log = EventLog()
    seed(log, 1, LINE, [0])
    copy(log, 2, 7, BENT, learner=1, t=1.0)
    with pytest.raises(CorruptLogError):
        build_lineage(log.events)

    log = EventLog()
    seed(log, 1, LINE, [0])
    seed(log, 1, LINE, [1])
    with pytest.raises(CorruptLogError):
        build_lineage(log.events)


def union_find_clusters(points, tau):
    parent = {i: i for i in points}

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for a, b in itertools.combinations(sorted(points), 2):
        if 1.0 - abs(points[a] - points[b]) >= tau:
            parent[find(a)] = find(b)
    groups = {}
    for i in sorted(points):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def test_clusters_match_union_find():
    def similarity(ids, values):
        values = np.asarray(values)
        return 1.0 - np.abs(values[:, None] - values[None, :])

    rng = np.random.default_rng(5)
    for _ in range(20):
        points = {i: float(v) for i, v in enumerate(rng.uniform(0, 1, size=12), start=1)}
        for tau in (0.8, 0.9, 0.97):
            report = cluster(points, tau, similarity)
            assert report.clusters == union_find_clusters(points, tau)
            assert report.population == 12


def test_cluster_sizes_use_counts():
    points = {1: 0.0, 2: 0.05, 3: 0.9}

    def similarity(ids, values):
        values = np.asarray(values)
        return 1.0 - np.abs(values[:, None] - values[None, :])

    report = cluster(points, 0.9, similarity, counts={1: 4, 2: 1, 3: 1})
    assert report.clusters == [[1, 2], [3]]
    assert report.sizes == [5, 1]
    assert report.dominance == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        cluster(points, 1.0, similarity)
    assert cluster({}, 0.5, similarity).n_clusters == 0


def test_story_similarity_pads_short_sentences():
    matrix = story_similarity([1, 2, 3], [WALL_STORY, MISHEARD, "IF I STOP THEN SAFE".split()])
    assert matrix[0, 1] == pytest.approx(6 / 7)
    assert matrix[0, 2] == pytest.approx(2 / 7)
    assert np.allclose(np.diag(matrix), 1.0)

    stories, counts = story_population(story_run())
    assert sorted(stories) == [1, 2, 3, 4, 5]
    assert cluster_stories(stories, 0.9, counts).clusters == [[1, 2, 3, 4], [5]]
    assert cluster_stories(stories, 0.8, counts).n_clusters == 1


def test_collective_memory_and_churn():
    events = meme_run()
    assert final_collective_memory(events) == {1: 2, 2: 1, 3: 1}
    report = collective_clusters(events, 0.7)
    assert report.clusters == [[1, 2], [3]]
    assert report.dominance == pytest.approx(0.75)
    assert churn(events) == pytest.approx(1 / 5)


def test_collective_memory_without_rounds():
    log = EventLog()
    seed(log, 1, LINE, [0, 1, 2])
    log.emit("eviction", 0.0, [2], robot=2, meme_id=1)
    assert final_collective_memory(log.events) == {1: 2}


def test_unregistered_meme_in_a_store_is_corrupt():
    log = EventLog()
    seed(log, 1, LINE, [0])
    log.emit("store_snapshot", 1.0, [0], round=0, stores={0: [1, 9]})
    with pytest.raises(CorruptLogError):
        collective_clusters(log.events, 0.7)


def test_memory_study_sign_tests():
    def limited_run():
        log = EventLog()
        seed(log, 1, LINE, [0, 1, 2])
        return log.events

    def unlimited_run():
        log = EventLog()
        seed(log, 1, LINE, [0, 1, 2])
        seed(log, 2, BACK, [0, 1, 2])
        return log.events

    runs = {}
    for k in range(5):
        runs[("limited(5)", k)] = limited_run()
        runs[("unlimited", k)] = unlimited_run()
    report = memory_study(runs, taus=[0.7])

    tests = report.tests.iloc[0]
    assert tests["n_pairs"] == 5
    assert tests["fewer_clusters"] == 5 and tests["more_clusters"] == 0
    assert tests["clusters_p"] == pytest.approx(0.5 ** 5)
    assert tests["higher_dominance"] == 5
    summary = report.summary.set_index("condition")
    assert summary.loc["limited(5)", "median_clusters"] == 1
    assert summary.loc["unlimited", "median_dominance"] == pytest.approx(0.5)


def test_retell_tallies():
    stats = retell_stats(story_run())
    assert stats.tallies == {0: 3, 1: 0, 2: 0, 3: 0}
    assert list(stats.timeseries.tally) == [1, 2, 3]
    assert stats.elder == 0
    assert list(stats.elder_ranks["rank"]) == [1, 1, 1]
    assert stats.spawn_times[3] == 5.0
    assert stats.divergence_rate == pytest.approx(0.25)
    assert stats.collide_share == 1.0


def test_no_exchanges_means_zero_tallies():
    log = EventLog()
    for rid in (2, 0, 1):
        log.emit("spawn", 0.0, [rid], pose=[0.0, 0.0, 0.0])
    stats = retell_stats(log.events)
    assert stats.tallies == {0: 0, 1: 0, 2: 0}
    assert stats.timeseries.empty and stats.elder == 0


def test_reports_are_written(tmp_path):
    with EventLog(tmp_path / EVENTS_FILE) as log:
        for event in story_run():
            log.emit(event["kind"], event["t"], event["robots"], **event["payload"])

    dot = write_reports(tmp_path, "lineage")[0]
    text = dot.read_text()
    assert "s1" in text and "orange" in text and "lightblue" in text
    assert (tmp_path / "reports" / "lineage.csv").is_file()

    written = write_reports(tmp_path, "retell")
    assert [path.name for path in written] == ["retell.csv", "retell_timeseries.csv", "retell_ranks.csv"]
    assert write_reports(tmp_path, "clusters", taus=[0.8])[0].is_file()
    with pytest.raises(ValueError):
        write_reports(tmp_path, "gossip")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
