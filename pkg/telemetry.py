"""
Telemetry sink: the append-only JSONL event log of a run, plus the run
manifest written next to it.

The event log is the single source of truth for every analysis, so each line
is written in a canonical form (sorted keys, compact separators) and a run
repeated with the same config and seed produces the same bytes.
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from config import RunConfig, __version__, config_hash

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
MANIFEST_FILE = "manifest.json"

EVENT_KINDS = frozenset(
    {
        "pose",
        "collision",
        "encounter",
        "enactment",
        "imitation",
        "imitation_failure",
        "no_enactment",
        "eviction",
        "store_snapshot",
        "seed",
        "spawn",
        "reposition",
        "ce_trace",
        "story",
        "exchange",
        "discard",
        "rl_episode",
        "trial",
    }
)


class CorruptLogError(ValueError):
    """Raised when an event log is missing, unparsable or inconsistent."""


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain JSON values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return to_jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class EventLog:
    """
    Single-writer event sink.

    Events are kept in memory (for in-process analysis) and, when a path is
    given, streamed to a JSONL file as they are emitted.
    """

    def __init__(self, path: Optional[Path] = None, keep_in_memory: bool = True):
        self.path = Path(path) if path else None
        self.keep_in_memory = keep_in_memory
        self._events: List[Dict[str, Any]] = []
        self._seq = 0
        self._last_t = 0.0
        self._handle = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("w", encoding="utf-8")

    def emit(self, kind: str, t: float, robots: Iterable[int] = (), **payload) -> Dict[str, Any]:
        if kind not in EVENT_KINDS:
            raise ValueError(f"Unknown event kind: {kind}")
        t = float(t)
        if t < self._last_t - 1e-9:
            raise ValueError(f"Event time went backwards: {t} < {self._last_t}")
        self._last_t = max(self._last_t, t)

        event = {
            "seq": self._seq,
            "t": t,
            "kind": kind,
            "robots": [int(r) for r in robots],
            "payload": to_jsonable(payload),
        }
        self._seq += 1
        if self.keep_in_memory:
            self._events.append(event)
        if self._handle is not None:
            self._handle.write(json.dumps(event, sort_keys=True, separators=(",", ":")))
            self._handle.write("\n")
        return event

    @property
    def events(self) -> List[Dict[str, Any]]:
        return list(self._events)

    def of_kind(self, kind: str) -> List[Dict[str, Any]]:
        return [e for e in self._events if e["kind"] == kind]

    def close(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_events(path) -> List[Dict[str, Any]]:
    """Load an events.jsonl file (or the one inside a run directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / EVENTS_FILE
    if not path.is_file():
        raise CorruptLogError(f"No event log at {path}")

    events = []
    last_t = -math.inf
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorruptLogError(f"{path}:{line_no}: invalid JSON ({e})") from e
            if not isinstance(event, dict) or not {"t", "kind", "payload"} <= event.keys():
                raise CorruptLogError(f"{path}:{line_no}: not an event record")
            if event["t"] < last_t - 1e-9:
                raise CorruptLogError(f"{path}:{line_no}: timestamps decrease")
            last_t = event["t"]
            events.append(event)
    if not events:
        raise CorruptLogError(f"Event log {path} is empty")
    return events


def events_frame(events: List[Dict[str, Any]]) -> pd.DataFrame:
    """Flat DataFrame view (t, kind, robots, payload columns) of an event list."""
    frame = pd.DataFrame(events, columns=["seq", "t", "kind", "robots", "payload"])
    return frame.sort_values("seq", kind="stable").reset_index(drop=True)


def write_manifest(out_dir, config: RunConfig, seed: int, extra: Optional[dict] = None) -> Path:
    """Write manifest.json (config hash, seed, code version) into a run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash(config),
        "seed": int(seed),
        "code_version": __version__,
        "scenario": config.scenario.kind,
        "config": config.model_dump(mode="json"),
    }
    if extra:
        manifest.update(to_jsonable(extra))
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("Manifest written to %s", path)
    return path


def read_manifest(run_dir) -> Dict[str, Any]:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.is_file():
        raise CorruptLogError(f"No manifest in {run_dir}")
    return json.loads(path.read_text())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
