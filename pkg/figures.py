"""
SVG figures rendered from run logs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)


class MissingTraceError(LookupError):
    """No ce_trace event for the requested robot and cycle."""


@dataclass
class ImaginationReplay:
    path: Path
    predicted: int
    highlighted: int
    selected_index: int
    selected_kind: str
    actual: np.ndarray


def find_trace(events: Sequence[dict], robot_id: int, cycle_index: int) -> dict:
    for event in events:
        if event["kind"] != "ce_trace":
            continue
        payload = event["payload"]
        if payload["robot"] == robot_id and payload["cycle"] == cycle_index:
            return event
    traced = sorted({e["payload"]["robot"] for e in events if e["kind"] == "ce_trace"})
    if not traced:
        raise MissingTraceError("This run has no CE traces; re-run with telemetry.ce_trace = true")
    raise MissingTraceError(f"No CE trace for robot {robot_id} at cycle {cycle_index} (traced robots: {traced})")


def actual_trajectory(events: Sequence[dict], robot_id: int, t_start: float, t_end: float) -> np.ndarray:
    """Logged (t, x, y, theta) of one robot between two times."""
    key = str(robot_id)
    rows = []
    for event in events:
        if event["kind"] != "pose" or not t_start - 1e-9 <= event["t"] <= t_end + 1e-9:
            continue
        pose = event["payload"]["poses"].get(key)
        if pose is not None:
            rows.append([event["t"], *pose])
    return np.asarray(rows, dtype=float).reshape(-1, 4)


def replay_imagination(events: Sequence[dict], robot_id: int, cycle_index: int, out_path) -> ImaginationReplay:
    """
    Draw every predicted trajectory of one CE cycle in grey, the selected
    one on top, and the pose trajectory the robot actually followed over
    the same horizon.
    """
    trace = find_trace(events, robot_id, cycle_index)
    payload = trace["payload"]
    records = payload["records"]
    selected = payload["selected"]
    actual = actual_trajectory(events, robot_id, trace["t"], trace["t"] + payload["horizon"])

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 7))
    for record in records:
        path = np.asarray(record["trajectory"], dtype=float)
        ax.plot(path[:, 0], path[:, 1], color="0.75", linewidth=0.8, zorder=1)

    chosen = np.asarray(records[selected]["trajectory"], dtype=float)
    moved = np.ptp(chosen[:, :2], axis=0).max() if len(chosen) > 1 else 0.0
    if moved < 1e-9:
        # stop: nothing to draw but the robot's own spot
        ax.plot(chosen[0, 0], chosen[0, 1], marker="o", markersize=9, color="tab:red", zorder=3,
                label=f"selected #{selected} ({records[selected]['action']['kind']})")
    else:
        ax.plot(chosen[:, 0], chosen[:, 1], color="tab:red", linewidth=2.2, zorder=3,
                label=f"selected #{selected} ({records[selected]['action']['kind']})")
    if len(actual):
        ax.plot(actual[:, 1], actual[:, 2], color="tab:blue", linestyle="--", linewidth=1.5, zorder=4,
                label="actual")

    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"Robot {robot_id}, CE cycle {cycle_index} ({len(records)} candidates)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    logger.info("Imagination replay written to %s", out_path)

    return ImaginationReplay(out_path, len(records), 1, selected, records[selected]["action"]["kind"], actual)


def memory_study_figure(per_seed: pd.DataFrame, out_path) -> Path:
    """Cluster count and dominance per memory condition, one box per tau."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sns.set_theme(style="whitegrid")
    fig, axes = plt.subplots(1, 2, figsize=(12, 5))
    for ax, column, title in ((axes[0], "clusters", "Clusters at run end"),
                              (axes[1], "dominance", "Largest-cluster share")):
        sns.boxplot(data=per_seed, x="condition", y=column, hue="tau", ax=ax)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def rl_curves_figure(episodes: pd.DataFrame, out_path, window: int = 10) -> Path:
    """Smoothed per-episode reward, with and without imitation."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame = episodes.sort_values(["with_imitation", "seed", "episode"]).copy()
    frame["smoothed"] = (
        frame.groupby(["with_imitation", "seed"])["total_reward"]
        .transform(lambda s: s.rolling(window, min_periods=1).mean())
    )
    fig, ax = plt.subplots(figsize=(9, 5))
    sns.lineplot(data=frame, x="episode", y="smoothed", hue="with_imitation", ax=ax, errorbar=None)
    ax.set_ylabel(f"reward ({window}-episode mean)")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


def rl_episode_frame(events: Sequence[dict]) -> pd.DataFrame:
    rows: List[dict] = [e["payload"] for e in events if e["kind"] == "rl_episode"]
    return pd.DataFrame(rows, columns=["seed", "with_imitation", "episode", "reached", "steps", "total_reward"])
