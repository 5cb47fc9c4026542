import pytest
from pydantic import ValidationError

from timecon.errors import ConfigError
from timecon.models import CheckResult, ExperimentConfig, ExperimentName, ExperimentReport, Verdict
from timecon.services.lattice import TreeMode
from timecon.settings import get_settings, reset_settings


def write_config(tmp_path, text: str):
    path = tmp_path / "run.env"
    path.write_text(text, encoding="utf-8")
    return path


def test_config_from_file(tmp_path):
    path = write_config(tmp_path, "EXPERIMENT=static-value\nBENCHMARK=one_dim\nSTEPS=3\nTREE_MODE=path\n# comment\n")
    config = ExperimentConfig.from_file(path)
    assert config.experiment is ExperimentName.STATIC_VALUE
    assert config.steps == 3
    assert config.tree_mode is TreeMode.PATH
    assert config.run_seed == 0


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.env")


def test_unknown_key_is_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="duality", stepz=3)


def test_stochastic_experiment_needs_seed():
    with pytest.raises(ValidationError) as info:
        ExperimentConfig(experiment="tau-bound")
    assert "SEED" in str(info.value)
    assert ExperimentConfig(experiment="tau-bound", seed=7).run_seed == 7


def test_benchmark_experiment_needs_benchmark():
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="benchmark-verify")
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="benchmark-verify", benchmark="nope")


@pytest.mark.parametrize("field,value", [("horizon", 0.0), ("steps", 0), ("brownian_dim", 4), ("epsilon", -1.0)])
def test_out_of_range_values(field, value):
    with pytest.raises(ValidationError):
        ExperimentConfig(experiment="duality", **{field: value})


def test_hash_ignores_output_dir():
    a = ExperimentConfig(experiment="duality", steps=3)
    b = ExperimentConfig(experiment="duality", steps=3, output_dir="elsewhere")
    c = ExperimentConfig(experiment="duality", steps=4)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 12


def test_benchmark_params_skip_unset_keys():
    config = ExperimentConfig(experiment="benchmark-verify", benchmark="principal_agent", gamma_a=2.0, horizon=0.5)
    assert config.benchmark_params() == {"gamma_a": 2.0, "horizon": 0.5}


def test_check_results():
    assert CheckResult.at_most("x", 0.5, 1.0).verdict is Verdict.PASS
    assert CheckResult.at_most("x", 2.0, 1.0).verdict is Verdict.FAIL
    assert CheckResult.at_most("x", 2.0, 1.0, flag=True).verdict is Verdict.FLAGGED
    assert CheckResult.holds("y", False, measured=3).measured == 3.0


def test_flagged_checks_do_not_fail_a_report():
    report = ExperimentReport(experiment="duality", anchor="a", config={})
    report.checks.append(CheckResult.holds("soft", False, flag=True))
    assert report.passed
    report.checks.append(CheckResult.holds("hard", False))
    assert not report.passed
    assert [c.name for c in report.failures()] == ["hard"]


def test_wall_clock_is_not_serialized():
    report = ExperimentReport(experiment="duality", anchor="a", config={}, wall_clock=1.5)
    assert "wall_clock" not in report.model_dump()


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("TIMECON_PATH_CAP", "10")
    monkeypatch.setenv("TIMECON_POLICY_CAP", "1e3")
    reset_settings()
    settings = get_settings()
    assert settings.path_cap == 10
    assert settings.policy_cap == 1000
    assert get_settings() is settings
