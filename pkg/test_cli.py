import json

import pytest

from main import EXIT_CONFIG, EXIT_CORRUPT_LOG, EXIT_OK, cli_main
from telemetry import EVENTS_FILE, MANIFEST_FILE, file_checksum

COPYBOTS = """
seed = 1

[scenario]
kind = "copybots"
n_robots = 3
rounds = 1
"""

PEDESTRIAN = """
seed = 2
noise_scale = 0.0

[scenario]
kind = "pedestrian"
trials = 1
timeout = 5.0

[ce_budget]
k = 12

[telemetry]
ce_trace = true
"""


@pytest.fixture
def copybots_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(COPYBOTS)
    return path


def test_run_writes_manifest_and_events(tmp_path, copybots_config):
    out = tmp_path / "run"
    assert cli_main(["run", str(copybots_config), "--seed", "4", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["seed"] == 4 and manifest["scenario"] == "copybots"
    assert manifest["summary"]["memes"] >= 2
    assert (out / EVENTS_FILE).stat().st_size > 0


def test_same_seed_gives_identical_logs(tmp_path, copybots_config):
    for name in ("a", "b"):
        assert cli_main(["run", str(copybots_config), "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    assert file_checksum(tmp_path / "a" / EVENTS_FILE) == file_checksum(tmp_path / "b" / EVENTS_FILE)


def test_analyze_and_replay(tmp_path, copybots_config):
    out = tmp_path / "run"
    cli_main(["run", str(copybots_config), "--out", str(out)])
    assert cli_main(["analyze", str(out), "--report", "lineage"]) == EXIT_OK
    assert (out / "graphs" / "lineage.dot").is_file()
    assert cli_main(["analyze", str(out), "--report", "clusters", "--tau", "0.75"]) == EXIT_OK
    # copybots runs carry no CE traces
    assert cli_main(["replay", str(out), "--robot", "0", "--cycle", "0"]) == EXIT_CORRUPT_LOG


def test_replay_of_a_traced_run(tmp_path):
    config = tmp_path / "pedestrian.toml"
    config.write_text(PEDESTRIAN)
    out = tmp_path / "run"
    assert cli_main(["run", str(config), "--out", str(out)]) == EXIT_OK
    assert cli_main(["replay", str(out), "--robot", "0", "--cycle", "1"]) == EXIT_OK
    assert (out / "figures" / "imagination_robot0_cycle1.svg").is_file()
    assert cli_main(["replay", str(out), "--robot", "0", "--cycle", "999"]) == EXIT_CORRUPT_LOG


def test_error_exit_codes(tmp_path, copybots_config):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli_main(["analyze", str(empty)]) == EXIT_CORRUPT_LOG
    assert cli_main(["run", str(copybots_config), "--bogus"]) == EXIT_CONFIG
    assert cli_main(["run", str(tmp_path / "missing.toml")]) == EXIT_CONFIG

    broken = tmp_path / "broken.toml"
    broken.write_text('[scenario]\nkind = "juggling"\n')
    assert cli_main(["run", str(broken), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert cli_main(["--help"]) == EXIT_OK


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
