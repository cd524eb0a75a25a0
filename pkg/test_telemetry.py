import json

import numpy as np
import pytest

from config import RunConfig, config_hash
from telemetry import (
    EVENTS_FILE,
    CorruptLogError,
    EventLog,
    events_frame,
    read_events,
    read_manifest,
    to_jsonable,
    write_manifest,
)


def test_events_are_canonical_json(tmp_path):
    with EventLog(tmp_path / EVENTS_FILE) as log:
        log.emit("spawn", 0.0, [np.int64(1)], pose=(0.1, np.float64(0.2), 0.0))
        log.emit("pose", 0.1, [1], poses={1: [0.1, 0.2, 0.0]})
    lines = (tmp_path / EVENTS_FILE).read_text().splitlines()
    assert lines[0] == '{"kind":"spawn","payload":{"pose":[0.1,0.2,0.0]},"robots":[1],"seq":0,"t":0.0}'
    events = read_events(tmp_path)
    assert events == log.events
    assert events[1]["payload"]["poses"] == {"1": [0.1, 0.2, 0.0]}


def test_emit_rejects_bad_events():
    log = EventLog()
    with pytest.raises(ValueError):
        log.emit("gossip", 0.0)
    log.emit("collision", 2.0, [0], robot=0, target="wall")
    with pytest.raises(ValueError):
        log.emit("collision", 1.0, [0], robot=0, target="wall")


def test_to_jsonable():
    value = {2: (np.float32(0.5), np.arange(2)), "x": float("inf")}
    assert to_jsonable(value) == {"2": [0.5, [0, 1]], "x": None}


def test_corrupt_logs(tmp_path):
    with pytest.raises(CorruptLogError):
        read_events(tmp_path)

    path = tmp_path / EVENTS_FILE
    path.write_text("")
    with pytest.raises(CorruptLogError):
        read_events(path)

    path.write_text('{"t": 0.0, "kind": "seed", "payload": {}}\nnot json\n')
    with pytest.raises(CorruptLogError):
        read_events(path)

    path.write_text('{"t": 1.0, "kind": "seed", "payload": {}}\n{"t": 0.5, "kind": "seed", "payload": {}}\n')
    with pytest.raises(CorruptLogError):
        read_events(path)

    path.write_text('[1, 2, 3]\n')
    with pytest.raises(CorruptLogError):
        read_events(path)


def test_events_frame_keeps_emission_order():
    log = EventLog()
    log.emit("spawn", 0.0, [0], pose=[0, 0, 0])
    log.emit("spawn", 0.0, [1], pose=[1, 0, 0])
    frame = events_frame(list(reversed(log.events)))
    assert list(frame.seq) == [0, 1]
    assert list(frame.kind) == ["spawn", "spawn"]


def test_manifest(tmp_path):
    config = RunConfig(seed=9)
    write_manifest(tmp_path, config, 9, {"summary": {"memes": np.int64(4)}})
    manifest = read_manifest(tmp_path)
    assert manifest["seed"] == 9
    assert manifest["config_hash"] == config_hash(config)
    assert manifest["summary"] == {"memes": 4}
    assert json.loads((tmp_path / "manifest.json").read_text())["scenario"] == "copybots"
    with pytest.raises(CorruptLogError):
        read_manifest(tmp_path / "elsewhere")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
