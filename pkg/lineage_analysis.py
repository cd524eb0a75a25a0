"""
Analyses over run logs: the lineage forest, clusters of related memes or
stories, the memory-size study and storyteller retell statistics.

Everything here reads events only, so re-running an analysis on a copied
log gives the same report.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import binomtest
from sklearn.metrics import pairwise_distances
from sklearn.preprocessing import LabelEncoder

from figures import memory_study_figure
from memes import Meme, fidelity_value
from telemetry import CorruptLogError, read_events

logger = logging.getLogger(__name__)

PAD_TOKEN = "<PAD>"


def meme_node(meme_id: int) -> str:
    return f"m{meme_id}"


def story_node(story_id: int) -> str:
    return f"s{story_id}"


@dataclass
class LineageGraph:
    """Forest of copy events: parent -> child edges, roots are seeds or own what-ifs."""

    graph: nx.DiGraph

    @property
    def roots(self) -> List[str]:
        return sorted((n for n, d in self.graph.in_degree() if d == 0), key=_node_order)

    def nodes_of(self, kind: str) -> List[str]:
        return sorted((n for n, data in self.graph.nodes(data=True) if data["kind"] == kind), key=_node_order)

    def is_forest(self) -> bool:
        return self.graph.number_of_nodes() == 0 or nx.is_branching(self.graph)

    def root_of(self, node: str) -> str:
        while True:
            parents = list(self.graph.predecessors(node))
            if not parents:
                return node
            node = parents[0]

    def write_dot(self, path) -> Path:
        """Graphviz file; high-fidelity copies are orange, low-fidelity ones light blue."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        export = nx.DiGraph()
        for node, data in self.graph.nodes(data=True):
            attrs = {"label": f'"{data["label"]}"', "style": "filled"}
            if data.get("root"):
                attrs["fillcolor"] = "white"
            elif data.get("high_fidelity"):
                attrs["fillcolor"] = "orange"
            else:
                attrs["fillcolor"] = "lightblue"
            export.add_node(node, **attrs)
        export.add_edges_from(self.graph.edges())
        nx.nx_pydot.write_dot(export, path)
        return path


def _node_order(node: str) -> Tuple[str, int]:
    return node[0], int(node[1:])


def build_lineage(events: Sequence[dict], tau_hf: float = 0.8) -> LineageGraph:
    """
    One node per seed, imitation, own what-if and successful retelling.
    Raises CorruptLogError on a parent that never appeared in the log.
    """
    graph = nx.DiGraph()

    def add(node, parent, **data):
        if node in graph:
            raise CorruptLogError(f"Duplicate lineage node {node}")
        if parent is not None and parent not in graph:
            raise CorruptLogError(f"{node} refers to unknown parent {parent}")
        graph.add_node(node, **data)
        if parent is not None:
            graph.add_edge(parent, node)

    for event in events:
        payload = event["payload"]
        kind = event["kind"]
        if kind == "seed":
            meme = payload["meme"]
            add(meme_node(meme["meme_id"]), None, kind="meme", root=True, t=event["t"],
                segments=meme["segments"], label=f"seed {meme.get('seed_tag')}", fidelity=1.0, high_fidelity=True)
        elif kind == "imitation":
            meme = payload["meme"]
            value = payload["fidelity"]
            add(meme_node(meme["meme_id"]), meme_node(payload["parent_id"]), kind="meme", root=False,
                t=event["t"], segments=meme["segments"], label=f"{meme['meme_id']}", fidelity=value,
                high_fidelity=payload.get("high_fidelity", value >= tau_hf), owner=payload["learner"])
        elif kind == "story":
            story = payload["story"]
            add(story_node(story["story_id"]), None, kind="story", root=True, t=event["t"],
                tokens=story["tokens"], label=" ".join(story["tokens"]), author=story["root_author"],
                high_fidelity=True)
        elif kind == "exchange" and not payload["discarded"]:
            heard = payload["heard"]
            told = payload["told_tokens"]
            same = list(heard["tokens"]) == list(told)
            add(story_node(heard["story_id"]), story_node(payload["parent_story_id"]), kind="story", root=False,
                t=event["t"], tokens=heard["tokens"], label=" ".join(heard["tokens"]),
                author=heard["root_author"], holder=payload["listener"], high_fidelity=same)

    lineage = LineageGraph(graph)
    if not lineage.is_forest():
        raise CorruptLogError("Lineage is not a forest")
    return lineage


# ------------------------------------------------------------------ clusters


@dataclass
class ClusterReport:
    tau: float
    labels: Dict[Hashable, int]
    clusters: List[List[Hashable]]
    sizes: List[int]
    population: int

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def dominance(self) -> float:
        return max(self.sizes) / self.population if self.population else 0.0


def _components(ids: Sequence[Hashable], similar: np.ndarray) -> List[List[Hashable]]:
    n_components, labels = connected_components(csr_matrix(similar), directed=False)
    groups: Dict[int, List[Hashable]] = {}
    for item, label in zip(ids, labels):
        groups.setdefault(int(label), []).append(item)
    return sorted((sorted(members) for members in groups.values()), key=lambda members: members[0])


def cluster(population: Mapping[Hashable, object], tau: float, similarity, counts: Optional[Mapping] = None) -> ClusterReport:
    """
    Connected components of the "similarity >= tau" graph over distinct
    items. `similarity(ids, items)` returns the pairwise matrix; `counts`
    gives each item's multiplicity in the population (default 1).
    Clusters are labelled in order of their smallest member id.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    ids = sorted(population)
    if not ids:
        return ClusterReport(tau, {}, [], [], 0)
    matrix = np.asarray(similarity(ids, [population[i] for i in ids]), dtype=float)
    clusters = _components(ids, matrix >= tau - 1e-12)
    counts = counts or {}
    labels = {member: index for index, members in enumerate(clusters) for member in members}
    sizes = [sum(counts.get(member, 1) for member in members) for members in clusters]
    return ClusterReport(tau, labels, clusters, sizes, sum(sizes))


def meme_similarity(ids, segment_lists, n_points: int = 100) -> np.ndarray:
    """Pairwise fidelity between memes."""
    n = len(ids)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = fidelity_value(segment_lists[i], segment_lists[j], n_points)
    return matrix


def story_similarity(ids, token_lists) -> np.ndarray:
    """1 - normalised token Hamming distance; shorter sentences are padded."""
    width = max(len(tokens) for tokens in token_lists)
    padded = [list(tokens) + [PAD_TOKEN] * (width - len(tokens)) for tokens in token_lists]
    encoder = LabelEncoder().fit(sorted({token for tokens in padded for token in tokens}))
    encoded = np.array([encoder.transform(tokens) for tokens in padded])
    return 1.0 - pairwise_distances(encoded, metric="hamming")


def cluster_memes(memes: Mapping[int, object], tau: float, counts: Optional[Mapping] = None) -> ClusterReport:
    segments = {mid: m.segments if isinstance(m, Meme) else m for mid, m in memes.items()}
    return cluster(segments, tau, meme_similarity, counts)


def cluster_stories(stories: Mapping[int, Sequence[str]], tau: float, counts: Optional[Mapping] = None) -> ClusterReport:
    return cluster(stories, tau, story_similarity, counts)


# -------------------------------------------------------- collective memory


def meme_catalogue(events: Sequence[dict]) -> Dict[int, list]:
    """meme_id -> segments for every meme the log registered."""
    catalogue = {}
    for event in events:
        if event["kind"] == "seed":
            meme = event["payload"]["meme"]
        elif event["kind"] == "imitation":
            meme = event["payload"]["meme"]
        else:
            continue
        catalogue[meme["meme_id"]] = meme["segments"]
    return catalogue


def final_collective_memory(events: Sequence[dict]) -> Counter:
    """Multiset of meme ids held by all robots at the last store snapshot."""
    snapshots = [e for e in events if e["kind"] == "store_snapshot"]
    if snapshots:
        stores = snapshots[-1]["payload"]["stores"]
        return Counter(mid for ids in stores.values() for mid in ids)
    # No round played: the seeds, less whatever seeding already evicted
    memory = Counter()
    for event in events:
        if event["kind"] == "seed":
            memory[event["payload"]["meme"]["meme_id"]] += len(event["robots"])
        elif event["kind"] == "eviction":
            memory[event["payload"]["meme_id"]] -= 1
    return +memory


def collective_clusters(events: Sequence[dict], tau: float) -> ClusterReport:
    catalogue = meme_catalogue(events)
    memory = final_collective_memory(events)
    missing = set(memory) - set(catalogue)
    if missing:
        raise CorruptLogError(f"Stored meme ids never registered: {sorted(missing)}")
    return cluster_memes({mid: catalogue[mid] for mid in memory}, tau, memory)


def churn(events: Sequence[dict]) -> float:
    """Evictions per meme ever stored."""
    stored = sum(len(e["robots"]) for e in events if e["kind"] == "seed")
    stored += sum(1 for e in events if e["kind"] == "imitation")
    evicted = sum(1 for e in events if e["kind"] == "eviction")
    return evicted / stored if stored else 0.0


# ------------------------------------------------------------- memory study


@dataclass
class MemoryStudyReport:
    per_seed: pd.DataFrame
    summary: pd.DataFrame
    tests: pd.DataFrame


def _sign_test(better: int, worse: int) -> float:
    n = better + worse
    if n == 0:
        return 1.0
    return float(binomtest(better, n, 0.5, alternative="greater").pvalue)


def memory_study(runs: Mapping[Tuple[str, int], object], taus: Sequence[float] = (0.6, 0.7, 0.8),
                 limited_label: str = "limited(5)", unlimited_label: str = "unlimited") -> MemoryStudyReport:
    """
    Per-condition median cluster count, dominance and churn at run end,
    plus one-sided sign tests (paired by seed index) that limited memory
    gives fewer clusters and higher dominance than unlimited memory.
    """
    rows = []
    for (condition, seed_index), run in sorted(runs.items()):
        events = read_events(run) if isinstance(run, (str, Path)) else run
        turnover = churn(events)
        for tau in taus:
            report = collective_clusters(events, tau)
            rows.append({
                "condition": condition,
                "seed_index": seed_index,
                "tau": tau,
                "clusters": report.n_clusters,
                "dominance": report.dominance,
                "population": report.population,
                "churn": turnover,
            })
    per_seed = pd.DataFrame(rows, columns=["condition", "seed_index", "tau", "clusters", "dominance",
                                           "population", "churn"])

    summary = (
        per_seed.groupby(["condition", "tau"], sort=True)
        .agg(median_clusters=("clusters", "median"), median_dominance=("dominance", "median"),
             median_churn=("churn", "median"), n_seeds=("seed_index", "nunique"))
        .reset_index()
    )

    tests = []
    for tau in taus:
        at_tau = per_seed[per_seed.tau == tau]
        limited = at_tau[at_tau.condition == limited_label].set_index("seed_index")
        unlimited = at_tau[at_tau.condition == unlimited_label].set_index("seed_index")
        paired = limited.index.intersection(unlimited.index)
        if len(paired) == 0:
            continue
        lc, uc = limited.loc[paired, "clusters"], unlimited.loc[paired, "clusters"]
        ld, ud = limited.loc[paired, "dominance"], unlimited.loc[paired, "dominance"]
        tests.append({
            "tau": tau,
            "n_pairs": len(paired),
            "fewer_clusters": int((lc < uc).sum()),
            "more_clusters": int((lc > uc).sum()),
            "clusters_p": _sign_test(int((lc < uc).sum()), int((lc > uc).sum())),
            "higher_dominance": int((ld > ud).sum()),
            "lower_dominance": int((ld < ud).sum()),
            "dominance_p": _sign_test(int((ld > ud).sum()), int((ld < ud).sum())),
        })
    return MemoryStudyReport(per_seed, summary, pd.DataFrame(tests))


def load_memory_study(run_dir) -> Dict[Tuple[str, int], Path]:
    """Sub-run logs of a memory-study run, found through its trial events."""
    run_dir = Path(run_dir)
    runs = {}
    for event in read_events(run_dir):
        payload = event["payload"]
        if event["kind"] == "trial" and payload.get("scenario") == "memory_study":
            if "path" not in payload:
                raise CorruptLogError("Memory-study trial event without a sub-run path")
            runs[(payload["condition"], payload["seed_index"])] = run_dir / payload["path"]
    if not runs:
        raise CorruptLogError(f"{run_dir} holds no memory-study trials")
    return runs


# -------------------------------------------------------------- retell stats


@dataclass
class RetellStats:
    tallies: Dict[int, int]
    timeseries: pd.DataFrame
    ranks: pd.DataFrame
    elder: Optional[int]
    divergence_rate: float = math.nan
    collide_share: float = math.nan
    spawn_times: Dict[int, float] = field(default_factory=dict)

    @property
    def elder_ranks(self) -> pd.DataFrame:
        if self.elder is None or self.ranks.empty:
            return self.ranks.iloc[0:0]
        return self.ranks[self.ranks.robot == self.elder].reset_index(drop=True)


def retell_stats(events: Sequence[dict]) -> RetellStats:
    """
    Global tally of how often each robot's stories were retold by someone
    else, its time series and rank trajectory, and the elder (earliest
    spawned robot, lowest id on ties).
    """
    spawn_times: Dict[int, float] = {}
    for event in events:
        if event["kind"] == "spawn":
            for rid in event["robots"]:
                spawn_times.setdefault(int(rid), event["t"])
    tallies = Counter({rid: 0 for rid in spawn_times})

    series = []
    rank_rows = []
    exchanges = [e for e in events if e["kind"] == "exchange"]
    for event in exchanges:
        payload = event["payload"]
        author = int(payload["root_author"])
        tallies.setdefault(author, 0)
        if author != int(payload["teller"]):
            tallies[author] += 1
            series.append({"t": event["t"], "author": author, "tally": tallies[author]})
            ordered = sorted(tallies, key=lambda rid: (-tallies[rid], rid))
            for rank, rid in enumerate(ordered, start=1):
                rank_rows.append({"t": event["t"], "robot": rid, "rank": rank, "tally": tallies[rid]})

    elder = min(spawn_times, key=lambda rid: (spawn_times[rid], rid)) if spawn_times else None
    heard = [e["payload"] for e in exchanges if not e["payload"]["discarded"]]
    divergence = float(np.mean([p["divergence"] for p in heard])) if heard else math.nan
    retold = [e["payload"] for e in exchanges if e["payload"]["retold"]]
    collide = float(np.mean(["COLLIDE" in p["told_tokens"] for p in retold])) if retold else math.nan
    return RetellStats(
        tallies=dict(sorted(tallies.items())),
        timeseries=pd.DataFrame(series, columns=["t", "author", "tally"]),
        ranks=pd.DataFrame(rank_rows, columns=["t", "robot", "rank", "tally"]),
        elder=elder,
        divergence_rate=divergence,
        collide_share=collide,
        spawn_times=spawn_times,
    )


def story_population(events: Sequence[dict]) -> Tuple[Dict[int, List[str]], Counter]:
    """Distinct stories (id -> tokens) and how many robots hold each, from the lineage nodes."""
    stories = {}
    for event in events:
        payload = event["payload"]
        if event["kind"] == "story":
            stories[payload["story"]["story_id"]] = payload["story"]["tokens"]
        elif event["kind"] == "exchange" and not payload["discarded"]:
            stories[payload["heard"]["story_id"]] = payload["heard"]["tokens"]
    return stories, Counter({sid: 1 for sid in stories})


# ------------------------------------------------------------------- reports


def write_reports(run_dir, report: str, taus: Sequence[float] = (0.6, 0.7, 0.8)) -> List[Path]:
    """Write one analysis of a run directory to reports/ and graphs/; returns the written files."""
    run_dir = Path(run_dir)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    written = []

    if report == "memory-study":
        study = memory_study(load_memory_study(run_dir), taus)
        for name, frame in (("memory_study", study.summary), ("memory_study_seeds", study.per_seed),
                            ("memory_study_tests", study.tests)):
            frame.to_csv(reports / f"{name}.csv", index=False)
            written.append(reports / f"{name}.csv")
        written.append(memory_study_figure(study.per_seed, run_dir / "figures" / "memory_study.svg"))
        return written

    events = read_events(run_dir)
    if report == "lineage":
        lineage = build_lineage(events)
        written.append(lineage.write_dot(run_dir / "graphs" / "lineage.dot"))
        rows = [
            {"node": node, "parent": next(iter(lineage.graph.predecessors(node)), None),
             "root": lineage.root_of(node), **{k: data.get(k) for k in ("kind", "t", "fidelity", "high_fidelity")}}
            for node, data in lineage.graph.nodes(data=True)
        ]
        pd.DataFrame(rows, columns=["node", "parent", "root", "kind", "t", "fidelity", "high_fidelity"]).to_csv(
            reports / "lineage.csv", index=False)
        written.append(reports / "lineage.csv")
    elif report == "clusters":
        rows = []
        memes = meme_catalogue(events)
        stories, story_counts = story_population(events)
        for tau in taus:
            if memes:
                report_ = collective_clusters(events, tau)
                rows.append({"population": "memes", "tau": tau, "clusters": report_.n_clusters,
                             "dominance": report_.dominance, "size": report_.population})
            if stories:
                report_ = cluster_stories(stories, tau, story_counts)
                rows.append({"population": "stories", "tau": tau, "clusters": report_.n_clusters,
                             "dominance": report_.dominance, "size": report_.population})
        pd.DataFrame(rows, columns=["population", "tau", "clusters", "dominance", "size"]).to_csv(
            reports / "clusters.csv", index=False)
        written.append(reports / "clusters.csv")
    elif report == "retell":
        stats = retell_stats(events)
        pd.DataFrame(
            [{"robot": rid, "tally": tally, "spawn_time": stats.spawn_times.get(rid), "elder": rid == stats.elder}
             for rid, tally in stats.tallies.items()],
            columns=["robot", "tally", "spawn_time", "elder"],
        ).to_csv(reports / "retell.csv", index=False)
        stats.timeseries.to_csv(reports / "retell_timeseries.csv", index=False)
        stats.ranks.to_csv(reports / "retell_ranks.csv", index=False)
        written += [reports / "retell.csv", reports / "retell_timeseries.csv", reports / "retell_ranks.csv"]
    else:
        raise ValueError(f"Unknown report '{report}'")
    logger.info("Wrote %d report files for %s", len(written), run_dir)
    return written
