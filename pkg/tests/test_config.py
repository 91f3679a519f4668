import json

import pytest

from xkv.config import StreamConfig, apply_overrides, load_config
from xkv.errors import BudgetInfeasibleError, ParameterError


class TestStreamConfig:
    def test_defaults_are_valid(self):
        config = StreamConfig()
        assert config.tokens_per_frame == 1 + config.registers + config.patches
        assert config.pool_size == 16
        assert config.budget == 2048
        assert config.bits == 4
        assert config.group_size == 64

    def test_budget_must_hold_two_frames(self):
        with pytest.raises(BudgetInfeasibleError):
            StreamConfig(patches=64, registers=4, budget=137)
        StreamConfig(patches=64, registers=4, budget=138)  # exactly two frames

    @pytest.mark.parametrize("field,value", [
        ("redundancy", 1.0), ("redundancy", -0.1), ("outlier_amp", 0.5),
        ("bits", 1), ("bits", 9), ("pool_size", 0), ("frames", 0),
        ("outlier_channels", 999),
    ])
    def test_bad_values_rejected(self, field, value):
        with pytest.raises(ParameterError):
            StreamConfig(**{field: value})

    def test_replace(self):
        config = StreamConfig().replace(frames=7, seed=3)
        assert config.frames == 7 and config.seed == 3


class TestConfigFiles:
    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"frames": 12, "seed": 5, "redundancy": 0.5}))
        config = load_config(path)
        assert config.frames == 12 and config.seed == 5 and config.redundancy == 0.5

    def test_toml_roundtrip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("frames = 12\nseed = 5\nredundancy = 0.5\n")
        config = load_config(path)
        assert config.frames == 12 and config.redundancy == 0.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"frames": 12, "cache_len": 99}))
        with pytest.raises(ParameterError, match="cache_len"):
            load_config(path)

    def test_non_integer_count_rejected(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"frames": 2.5}))
        with pytest.raises(ParameterError):
            load_config(path)


class TestOverrides:
    def test_override_wins_over_base(self):
        config = apply_overrides(StreamConfig(), {"frames": "9", "redundancy": "0.25"})
        assert config.frames == 9 and config.redundancy == 0.25

    def test_unknown_override_rejected(self):
        with pytest.raises(ParameterError):
            apply_overrides(StreamConfig(), {"L_max": "100"})

    def test_unparseable_override_rejected(self):
        with pytest.raises(ParameterError):
            apply_overrides(StreamConfig(), {"frames": "many"})
