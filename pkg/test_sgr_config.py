"""
Tests for TrainConfig loading and validation
"""

import pytest

from error_handler import ErrorCategory, SGRError
from sgr_config import TrainConfig, load_config, save_config


def test_defaults_are_valid():
    config = load_config()
    assert config == TrainConfig()
    assert config.hidden_size % config.num_heads == 0


def test_file_values_are_typed_and_overrides_win(tmp_path):
    path = tmp_path / "sgr.env"
    path.write_text("hidden_size=16\nlearning_rate=0.001\nuse_structure_encoder=false\nseed=4\n")
    config = load_config(str(path), seed=9, epochs=None)
    assert config.hidden_size == 16
    assert config.learning_rate == 0.001
    assert config.use_structure_encoder is False
    assert config.seed == 9
    assert config.epochs == TrainConfig().epochs


def test_saved_config_loads_back(tmp_path):
    config = TrainConfig(hidden_size=12, num_heads=3, knowledge_test=False)
    path = str(tmp_path / "cfg" / "run.env")
    save_config(config, path)
    assert load_config(path) == config


@pytest.mark.parametrize("values", [
    {"hidden_size": 0},
    {"hidden_size": 10, "num_heads": 4},
    {"max_len": 3},
    {"seed": -1},
])
def test_invalid_values_are_rejected(values):
    with pytest.raises(SGRError) as info:
        TrainConfig(**values)
    assert info.value.category == ErrorCategory.CONTRACT


def test_unknown_key_and_bad_type(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("hiden_size=8\n")
    with pytest.raises(SGRError) as info:
        load_config(str(path))
    assert info.value.context["keys"] == "hiden_size"
    path.write_text("epochs=many\n")
    with pytest.raises(SGRError) as info:
        load_config(str(path))
    assert info.value.context["expected"] == "int"


def test_missing_config_file_is_io_error(tmp_path):
    with pytest.raises(SGRError) as info:
        load_config(str(tmp_path / "none.env"))
    assert info.value.category == ErrorCategory.IO
