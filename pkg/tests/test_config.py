import json

import pytest

from groundcalib.config import KeyframeConfig, PipelineConfig, load_config
from groundcalib.errors import ConfigError


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert PipelineConfig.from_dict(None) == cfg


def test_nested_overrides():
    cfg = PipelineConfig.from_dict({"per_cell": 5, "failure": {"persistence": 2}, "optimizer": {"xi_d": [0, 0, 0, 1, 0, 1.5]}})
    assert cfg.per_cell == 5 and cfg.failure.persistence == 2
    assert cfg.optimizer.xi_d == (0.0, 0.0, 0.0, 1.0, 0.0, 1.5)


@pytest.mark.parametrize(
    "d",
    [{"unknown": 1}, {"failure": {"nope": 1}}, {"per_cell": 0}, {"failure": {"persistence": 0}}, {"keyframes": 3}, {"gating_radius": -1.0}],
)
def test_bad_values_raise_config_error(d):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(d)


def test_keyframe_bounds():
    with pytest.raises(ValueError):
        KeyframeConfig(min_speed=50.0)


def test_load_yaml_and_json(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("pipeline:\n  per_cell: 7\n  thresholds:\n    gate_mode: literal\nscenario:\n  seed: 3\n")
    cfg = load_config(y)
    assert cfg.per_cell == 7 and cfg.thresholds.gate_mode == "literal"
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"scenario": {"seed": 3}}))
    assert load_config(j) == PipelineConfig()
    (tmp_path / "e.yaml").write_text("")
    assert load_config(tmp_path / "e.yaml") == PipelineConfig()


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    lst = tmp_path / "list.yaml"
    lst.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(lst)
