import json

import pytest

from timecon.errors import UnknownExperimentError
from timecon.experiments import registry
from timecon.main import EXIT_ERROR, EXIT_OK, main
from timecon.models import ExperimentName


def write_config(tmp_path, name: str, text: str):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_list_shows_every_experiment(capsys):
    assert main(["list"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ExperimentName:
        assert name.value in out
    assert "duality → §4" in out
    assert "tau-bound → Theorem 5.4 Step 3" in out
    assert len(out.strip().splitlines()) == len(ExperimentName)


def test_validate_ok(tmp_path, capsys):
    path = write_config(tmp_path, "ok.env", "EXPERIMENT=illposed-demo\nSTEPS=4\n")
    assert main(["validate", path]) == EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_validate_reports_missing_seed(tmp_path, capsys):
    path = write_config(tmp_path, "bad.env", "EXPERIMENT=tau-bound\n")
    assert main(["validate", path]) == EXIT_ERROR
    assert "SEED" in capsys.readouterr().err


def test_unknown_experiment_name_in_config(tmp_path):
    path = write_config(tmp_path, "bad.env", "EXPERIMENT=no-such-thing\n")
    assert main(["validate", path]) == EXIT_ERROR


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.env")]) == EXIT_ERROR


def test_registry_lookup_lists_valid_names():
    with pytest.raises(UnknownExperimentError) as info:
        registry.get("no-such-thing")
    assert "illposed-demo" in info.value.valid


def test_run_is_reproducible(tmp_path):
    path = write_config(tmp_path, "illposed.env", "EXPERIMENT=illposed-demo\nHORIZON=1\nSTEPS=4\n")
    out = tmp_path / "runs"
    assert main(["run", path, "-o", str(out)]) == EXIT_OK
    (run_dir,) = list(out.iterdir())
    first = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert set(first) == {"illposed.json", "report.json"}
    report = json.loads(first["report.json"])
    assert all(check["verdict"] == "pass" for check in report["checks"])

    assert main(["run", path, "-o", str(out)]) == EXIT_OK
    second = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert first == second
