import json
import math

import numpy as np

from timecon.models import CheckResult, ExperimentConfig, ExperimentReport
from timecon.store import ArtifactStore


def make_store(tmp_path, **overrides):
    config = ExperimentConfig(experiment="duality", **overrides)
    return config, ArtifactStore(config, root=str(tmp_path))


def test_run_directory_name(tmp_path):
    config, store = make_store(tmp_path, seed=5)
    assert store.name == f"duality-5-{config.config_hash()}"
    assert store.path.parent == tmp_path


def test_csv_cells(tmp_path):
    _, store = make_store(tmp_path)
    target = store.write_csv("t.csv", ["a", "b", "c", "d"], [(1, 0.1, True, None), (np.int64(2), np.float64(1 / 3), np.bool_(False), "x")])
    assert target.read_text(encoding="utf-8") == "a,b,c,d\n1,0.1,true,\n2,0.333333333333,false,x\n"


def test_records_header_follows_first_row(tmp_path):
    _, store = make_store(tmp_path)
    target = store.write_records("r.csv", [{"k": 0, "v": 1.5}, {"k": 1, "v": 2.0}])
    assert target.read_text(encoding="utf-8").splitlines() == ["k,v", "0,1.5", "1,2"]


def test_json_drops_non_finite_values(tmp_path):
    _, store = make_store(tmp_path)
    target = store.write_json("x.json", {"b": np.array([1.0, math.inf]), "a": np.float32(0.5)})
    assert json.loads(target.read_text(encoding="utf-8")) == {"a": 0.5, "b": [1.0, None]}


def test_report_lists_artifacts(tmp_path):
    config, store = make_store(tmp_path)
    store.write_csv("z.csv", ["a"], [(1,)])
    store.write_json("a.json", {})
    report = ExperimentReport(experiment="duality", anchor="a", config=config.model_dump(mode="json"), wall_clock=2.0)
    report.checks.append(CheckResult.at_most("c", 0.0, 1.0))
    target = store.write_report(report)
    payload = json.loads(target.read_text(encoding="utf-8"))
    assert payload["artifacts"] == ["a.json", "z.csv"]
    assert "wall_clock" not in payload
    assert payload["checks"][0]["verdict"] == "pass"


def test_rerun_overwrites_identically(tmp_path):
    _, first = make_store(tmp_path)
    _, second = make_store(tmp_path)
    a = first.write_csv("t.csv", ["x"], [(0.25,)]).read_bytes()
    b = second.write_csv("t.csv", ["x"], [(0.25,)]).read_bytes()
    assert first.path == second.path
    assert a == b
