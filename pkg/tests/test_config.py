import pytest

from core.config import (KEY_INDEX, LogConfig, ModelConfig, RunConfig, TrainConfig, coerce_value,
                         load_run_config, parse_bool, parse_config_file, suggest_key)
from core.exceptions import ConfigError, ValidationError


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


class TestConfigFile:
    def test_values_and_comments(self, tmp_path):
        path = write(tmp_path, "# header\n\nmodel = cpa\nsteps = 20   # short run\nalpha=0.05\n")
        assert parse_config_file(path) == {"model": "cpa", "steps": "20", "alpha": "0.05"}

    def test_unknown_key_suggests_the_closest(self, tmp_path):
        path = write(tmp_path, "sim_noise_fracton = 0.2\n")
        with pytest.raises(ValidationError) as info:
            parse_config_file(path)
        assert info.value.field == "sim_noise_fracton"
        assert "Did you mean 'sim_noise_fraction'?" in str(info.value)

    def test_line_without_equals(self, tmp_path):
        with pytest.raises(ValidationError) as info:
            parse_config_file(write(tmp_path, "steps 20\n"))
        assert "Line 1" in info.value.args[0]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            parse_config_file(tmp_path / "absent.cfg")

    def test_suggest_key_gives_up_on_noise(self):
        assert suggest_key("zzzzzz") is None


class TestCoercion:
    def test_types(self):
        assert coerce_value("encoder_hidden", "400, 200", KEY_INDEX["encoder_hidden"][2]) == (400, 200)
        assert coerce_value("study_regimes", "fixed-prior",
                            KEY_INDEX["study_regimes"][2]) == ("fixed-prior",)
        assert coerce_value("eval_ate", "yes", bool) is True
        assert coerce_value("steps", " 12 ", int) == 12
        assert coerce_value("dataset", "none", KEY_INDEX["dataset"][2]) is None

    def test_bad_values(self):
        with pytest.raises(ValidationError):
            coerce_value("steps", "1.5", int)
        with pytest.raises(ValidationError):
            coerce_value("alpha", "lots", float)
        with pytest.raises(ValidationError):
            parse_bool("eval_ate", "maybe")

    def test_set_routes_keys_to_sections(self):
        config = RunConfig()
        config.update({"model": "conditional", "sim_genes": "30", "eval_k": 7, "out": "somewhere"})
        assert config.model.kind == "conditional"
        assert config.sim.genes == 30
        assert config.eval.k == 7
        assert config.out == "somewhere"

    def test_flat_dict_lists_every_key(self):
        flat = RunConfig().to_flat_dict()
        assert set(flat) == set(KEY_INDEX)
        assert flat["encoder_hidden"] == [400, 400]


class TestValidation:
    def test_defaults_are_valid(self):
        assert RunConfig().validate_all().is_valid

    def test_errors_name_the_flat_key(self):
        config = RunConfig()
        config.set("sim_noise_fraction", 1.5)
        config.set("alpha", 0.0)
        result = config.validate_all()
        assert not result.is_valid
        fields = {error.field for error in result.errors}
        assert {"sim.sim_noise_fraction", "model.alpha"} <= fields

    def test_errors_are_collected(self):
        config = RunConfig(train=TrainConfig(batch_size=0, steps=0))
        assert len(config.validate_all().errors) >= 2

    def test_conditional_needs_mean_field(self):
        result = ModelConfig(kind="conditional", inference_mode="corr_z").validate()
        assert not result.is_valid

    def test_mode_spellings(self):
        assert ModelConfig(inference_mode="Corr_Both").mode == "corr-both"

    def test_cpa_alpha_warning(self):
        result = ModelConfig(kind="cpa", alpha=0.3).validate()
        assert result.is_valid and result.warnings

    def test_report_of_a_valid_config(self):
        assert RunConfig().validation_report() == "Configuration is valid"

    def test_report_lists_errors_and_warnings(self):
        config = RunConfig()
        config.set("alpha", 0.0)
        config.set("model", "cpa")
        report = config.validation_report()
        assert report.startswith("VALIDATION REPORT")
        assert "ERRORS (1):" in report and "model.alpha" in report
        assert "WARNINGS (1):" in report

    def test_report_reuses_a_given_result(self):
        config = RunConfig()
        result = config.validate_all()
        config.set("alpha", 0.0)
        assert config.validation_report(result) == "Configuration is valid"

    def test_study_steps_key(self, tmp_path):
        config = load_run_config(write(tmp_path, "study_steps = 300\n"))
        assert config.study.steps == 300
        assert config.train.steps == TrainConfig().steps
        config.set("study_steps", 0)
        assert "study.study_steps" in {e.field for e in config.validate_all().errors}

    def test_raise_if_invalid(self):
        config = RunConfig()
        config.out = ""
        with pytest.raises(ConfigError):
            config.raise_if_invalid()


class TestLoading:
    def test_overrides_beat_the_file_and_none_is_ignored(self, tmp_path):
        path = write(tmp_path, "steps = 20\nseed = 3\n")
        config = load_run_config(path, {"steps": 5, "seed": None})
        assert config.train.steps == 5
        assert config.train.seed == 3

    def test_log_environment(self, monkeypatch):
        monkeypatch.setenv("SAMS_LOG", "debug")
        monkeypatch.setenv("SAMS_LOG_FORMAT", "JSON")
        config = load_run_config()
        assert config.logging.level == "DEBUG"
        assert config.logging.format == "json"

    def test_log_environment_keeps_file_values(self, monkeypatch):
        monkeypatch.delenv("SAMS_LOG", raising=False)
        monkeypatch.delenv("SAMS_LOG_FORMAT", raising=False)
        config = LogConfig.from_env(LogConfig(level="WARNING", format="detailed"))
        assert config.level == "WARNING"
        assert config.format == "detailed"
