import pytest

from config import PRESETS, TrainConfig, build_run_config, get_preset, parse_config, read_config_file
from core.exceptions import ConfigError, ParseError


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestConfigFile:

    def test_empty_file_is_desk(self, tmp_path):
        config = parse_config(write(tmp_path, ""), echo=False)
        assert config.preset == "desk"
        assert config.train.iterations == PRESETS["desk"]["iterations"]
        assert config.train.hidden_size == 64

    def test_single_key(self, tmp_path):
        config = parse_config(write(tmp_path, "gamma = 0.97\n"), echo=False)
        assert config.train.gamma == 0.97

    def test_comments_and_types(self, tmp_path):
        text = "# run\nsegments = 10   # per episode\nnoise_decay = false\ngen_channels = 8, 16\n\n"
        config = parse_config(write(tmp_path, text), echo=False)
        assert config.env.segments == 10
        assert config.train.noise_decay is False
        assert config.train.gen_channels == (8, 16)

    def test_unknown_key_names_line(self, tmp_path):
        with pytest.raises(ConfigError, match="gamm.*line 1"):
            parse_config(write(tmp_path, "gamm = 0.97\n"), echo=False)

    def test_missing_equals(self, tmp_path):
        with pytest.raises(ParseError) as excinfo:
            read_config_file(write(tmp_path, "gamma = 0.97\nbatch_size 4\n"))
        assert excinfo.value.line == 2

    def test_invalid_value_names_line(self, tmp_path):
        with pytest.raises(ConfigError, match="batch_size.*line 2"):
            parse_config(write(tmp_path, "gamma = 0.97\nbatch_size = 0\n"), echo=False)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(str(tmp_path / "absent.cfg"), echo=False)

    def test_preset_from_file(self, tmp_path):
        config = parse_config(write(tmp_path, "preset = paper\n"), echo=False)
        assert config.preset == "paper"
        assert config.train.iterations == 1_000_000
        assert config.synth_count == 19769

    def test_precedence(self, tmp_path):
        path = write(tmp_path, "preset = paper\nseed = 4\nbatch_size = 8\n")
        config = parse_config(path, preset="desk", overrides={"seed": 9}, echo=False)
        assert config.preset == "desk"
        assert config.train.seed == 9
        assert config.train.batch_size == 8


class TestValidation:

    @pytest.mark.parametrize("overrides", [
        {"gamma": 1.5}, {"batch_size": 0}, {"loss_variant": "l1"}, {"lr_sawtooth": "sideways"},
        {"train_fraction": 1.0}, {"segments": 0}, {"probe_spacing": 1.0}, {"gen_optimizer": "rmsprop"},
        {"lr_sweep_start": 1.0, "lr_sweep_stop": 0.5},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            build_run_config("desk", overrides)

    def test_generator_stride(self):
        with pytest.raises(ConfigError):
            build_run_config("desk", {"height": 90, "width": 90})

    def test_sweep_keys(self):
        config = build_run_config("desk", {"lr_sweep": "true", "gen_optimizer": "sgd", "lr_sweep_start": "-4"})
        assert config.train.lr_sweep is True
        assert config.train.gen_optimizer == "sgd"
        assert (config.train.lr_sweep_start, config.train.lr_sweep_stop) == (-4.0, 0.5)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            build_run_config("laptop", {})

    def test_intervals(self):
        assert TrainConfig(iterations=12).eval_interval() == 1
        assert TrainConfig(iterations=5000).eval_interval() == 50
        assert TrainConfig(iterations=5000).checkpoint_interval() == 500
        assert TrainConfig(iterations=5000, eval_every=7).eval_interval() == 7


class TestPresets:

    def test_paper_preset_defaults(self):
        config = get_preset("paper")
        assert (config.env.segments, config.env.samples_per_segment) == (20, 20)
        assert config.env.height == config.env.width == 96
        assert config.train.gamma == 0.97
        assert config.train.beta_critic == 0.9997

    def test_copies_are_independent(self):
        first = get_preset("desk")
        first.train.seed = 123
        assert get_preset("desk").train.seed == 0
