import json
from pathlib import Path

import pytest

from config import (
    OUT_DIR_ENV,
    ConfigError,
    RunConfig,
    apply_calibration,
    config_hash,
    default_out_root,
    load_config,
    parse_config,
)

CONFIGS = Path(__file__).parent / "configs"


def test_shipped_configs_load():
    kinds = {path.stem: load_config(path).scenario.kind for path in CONFIGS.glob("*.toml")}
    assert kinds["copybots"] == "copybots"
    assert kinds["pedestrian"] == "pedestrian"
    assert kinds["storybots"] == "storybots"
    assert kinds["rl"] == "rl"
    assert kinds["memory_study"] == "memory_study"


def test_defaults_fill_an_empty_config(tmp_path):
    path = tmp_path / "empty.toml"
    path.write_text("")
    config = load_config(path)
    assert config == RunConfig()
    assert config.ce_budget.k == 30 and config.memory.capacity == 5


def test_invalid_configs(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        parse_config({"robots": [{"id": 1}, {"id": 1}]})
    with pytest.raises(ConfigError):
        parse_config({"scenario": {"taus": [0.5, 1.0]}})
    with pytest.raises(ConfigError):
        parse_config({"ce_budget": {"k": 1}})


def test_noise_scale_multiplies_every_sigma():
    config = parse_config({"noise_scale": 2.0, "noise": {"tracker_sigma": 0.01}})
    noise = config.effective_noise()
    assert noise.bearing_sigma == pytest.approx(0.02)
    assert noise.tracker_sigma == pytest.approx(0.02)
    assert config.noise.bearing_sigma == 0.01


def test_calibration_overrides(tmp_path):
    path = tmp_path / "calibration.json"
    path.write_text(json.dumps({"noise_scale": 0.5, "noise": {"tracker_sigma": 0.03}, "scan": []}))
    config = apply_calibration(RunConfig(seed=4), path)
    assert config.noise_scale == 0.5 and config.noise.tracker_sigma == 0.03 and config.seed == 4
    with pytest.raises(ConfigError):
        apply_calibration(RunConfig(), tmp_path / "nope.json")


def test_config_hash():
    assert config_hash(RunConfig()) == config_hash(parse_config({}))
    assert config_hash(RunConfig()) != config_hash(RunConfig(seed=1))


def test_out_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "runs"))
    assert default_out_root() == tmp_path / "runs"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
