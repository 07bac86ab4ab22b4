import json

import pytest

from bgdiff.errors import ConfigurationError
from bgdiff.experiments import DESK_SCHEDULE, ExperimentConfig, preset


@pytest.mark.parametrize("name", ["desk", "smoke"])
def test_config_round_trips_through_json(name, tmp_path):
    cfg = preset(name)
    cfg.dump(tmp_path / "c.json")
    again = ExperimentConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert json.loads((tmp_path / "c.json").read_text())["model"]["schedule"] == DESK_SCHEDULE


def test_partial_config_keeps_defaults():
    cfg = ExperimentConfig.from_dict({"training": {"branch_steps": 7}, "model": {"base_channels": 16}})
    assert cfg.training.branch_steps == 7
    assert cfg.training.backbone_steps == ExperimentConfig().training.backbone_steps
    assert cfg.model_config().base_channels == 16


@pytest.mark.parametrize("data", [
    {"colour": 1},
    {"training": {"epochs": 3}},
    {"model": {"depth": 4}},
    {"inference": 5},
    {"inference": {"preserve_mode": "blur"}},
    {"training": {"backbone_steps": 0}},
    {"model": {"image_size": 64}},
])
def test_invalid_configs_are_rejected(data):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_unknown_preset():
    with pytest.raises(ConfigurationError, match="desk"):
        preset("huge")
