import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nlident import harness as hz
from nlident.blocknl import PolyNl, SigmoidNet, WienerModel
from nlident.cli import main
from nlident.exceptions import SpecError
from nlident.freqid import RationalTf

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_relative_error_identities():
    y = np.array([1.0, 3.0, -2.0, 5.0])
    assert hz.relative_error(y, y) == 0.0
    assert hz.relative_error(y, np.full(4, y.mean())) == 100.0
    assert hz.relative_error([0.0, 2.0], [1.0, 1.0]) == 100.0
    for bad in (([1.0, 1.0], [0.0, 1.0]), ([1.0, 2.0], [1.0]), ([1.0], [1.0])):
        with pytest.raises(SpecError):
            hz.relative_error(*bad)
    # values above 100% are kept
    assert hz.relative_error([0.0, 2.0], [3.0, -1.0]) > 100.0


def test_parameter_counts():
    tf3 = RationalTf([0.1, 0.2, 0.3, 0.4], [1.0, -0.5, 0.1, 0.01])
    assert hz.count_parameters(hz.BlaModel(tf3)) == 7
    assert hz.table_parameter_count(hz.BlaModel(tf3)) == 8
    tf4 = RationalTf([0.1, 0.2, 0.3, 0.4, 0.1], [1.0, -0.5, 0.1, 0.01, 0.001])
    w = WienerModel(tf4, PolyNl(np.ones(5)))
    assert hz.count_parameters(w) == 14 and hz.table_parameter_count(w) == 15
    net = SigmoidNet.scalar(np.ones(4), np.zeros(4), np.ones(4), 0.0)
    assert hz.count_parameters(net) == 13


def _base_config(**over):
    d = {"seed": 1, "system": {"kind": "lti", "b": [0.0, 0.2, 0.1],
                               "a": [1.0, -1.2, 0.5, -0.08]},
         "protocol": {"offsets": [1.0, 2.0, 3.0], "period_length": 128,
                      "sampling_period": 1.0, "estimation_rms": 1.0, "validation_rms": 0.8},
         "methods": [{"type": "bla"}]}
    d.update(over)
    return d


@pytest.mark.parametrize("change", [
    {"methods": []},
    {"methods": [{"type": "spline"}]},
    {"methods": [{"type": "bla", "degree": 3}]},
    {"methods": [{"type": "bla"}, {"type": "bla"}]},
    {"colour": "red"},
    {"protocol": {"estimation_rms": 1.0, "validation_rms": 1.0}},
    {"protocol": {"offsets": [3.0, 1.0], "estimation_rms": 1.0, "validation_rms": 0.5}},
    {"protocol": {"offsets": [1.0, 2.0], "reference_operating_point": 5,
                  "estimation_rms": 1.0, "validation_rms": 0.5}},
    {"protocol": {"periods": 1, "estimation_rms": 1.0, "validation_rms": 0.5}},
    {"system": {"kind": "moon"}},
])
def test_config_errors(change, tmp_path):
    d = _base_config(**change)
    with pytest.raises(SpecError):
        hz.ExperimentConfig.from_dict(d)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_toml_and_json_equivalent(tmp_path):
    toml = hz.ExperimentConfig.load(CONFIGS / "lti.toml")
    path = tmp_path / "lti.json"
    path.write_text(json.dumps(toml.source))
    js = hz.ExperimentConfig.load(path)
    assert js.protocol == toml.protocol and js.methods == toml.methods
    assert toml.protocol.reference_operating_point == 3


def test_stage_seeds_distinct_and_stable():
    assert hz.stage_seed(1, "a") == hz.stage_seed(1, "a")
    assert hz.stage_seed(1, "a") != hz.stage_seed(1, "b")
    assert hz.stage_seed(1, "a") != hz.stage_seed(2, "a")


def test_lti_experiment_and_determinism(tmp_path):
    cfg = hz.ExperimentConfig.load(CONFIGS / "lti.toml")
    r1 = hz.run_experiment(cfg, tmp_path / "a")
    r2 = hz.run_experiment(cfg, tmp_path / "b")
    assert r1.exit_code == 0
    e = r1.methods[0].e_rel
    assert len(e) == 4 and max(e) < 0.1
    m = r1.methods[0]
    assert m.minimum <= m.average <= m.maximum
    h = [hashlib.sha256((tmp_path / d / "report.json").read_bytes()).hexdigest() for d in "ab"]
    assert h[0] == h[1]
    for d in "ab":
        assert (tmp_path / d / "frf_04.csv").exists()
        assert (tmp_path / d / "model_bla.json").exists()
    header = (tmp_path / "a" / "table.csv").read_text().splitlines()[0]
    assert header.startswith("method,avg,min,max,n_params")
    model = hz.load_model(tmp_path / "a" / "model_bla.json")
    assert hz.count_parameters(model) == 7


def test_model_roundtrip_and_schema(tmp_path):
    tf = RationalTf([0.0, 0.5], [1.0, -0.5])
    net = SigmoidNet.scalar([0.5, -1.0], [0.1, 0.2], [1.0, 2.0], 0.3)
    for model in (hz.BlaModel(tf, 2), WienerModel(tf, net)):
        p = tmp_path / "m.json"
        hz.atomic_write(p, hz.dump_json(hz.model_to_dict(model)))
        back = hz.load_model(p)
        u = np.random.default_rng(0).standard_normal(32)
        np.testing.assert_array_equal(back.simulate(u), model.simulate(u))
    d = json.loads(p.read_text())
    d["schema_version"] = 99
    p.write_text(json.dumps(d))
    with pytest.raises(SpecError, match="schema"):
        hz.load_model(p)
    with pytest.raises(FileNotFoundError):
        hz.load_model(tmp_path / "none.json")


def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "d"
    cfg = str(CONFIGS / "lti.toml")
    assert main(["generate", "--config", cfg, "--out", str(data)]) == 0
    assert (data / "dataset_estimation.csv").exists()
    assert main(["identify", "--data", str(data), "--method", "bla"]) == 0
    assert main(["identify", "--data", str(data), "--method", "ws"]) == 0
    out = capsys.readouterr().out
    assert "e_rel" in out
    assert main(["validate", "--model", str(data / "model_bla.json"),
                 "--data", str(data)]) == 0
    table = capsys.readouterr().out
    assert table.count("\n") >= 6 and "avg" in table
    rep = tmp_path / "rep"
    assert main(["report", str(data / "result_bla.json"), str(data / "result_ws.json"),
                 "--out", str(rep)]) == 0
    rows = (rep / "table.csv").read_text().splitlines()[1:]
    avgs = [float(r.split(",")[1]) for r in rows]
    assert avgs == sorted(avgs) and len(rows) == 2
    assert (rep / "table.md").exists()


def test_cli_exit_codes(tmp_path):
    data = tmp_path / "d"
    cfg = CONFIGS / "lti.toml"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    # missing inputs and unknown methods are configuration errors
    assert main(["validate", "--model", str(tmp_path / "nope.json"), "--data", str(data)]) == 2
    assert main(["identify", "--data", str(tmp_path / "empty"), "--method", "bla"]) == 2
    assert main(["identify", "--data", str(data), "--method", "arx"]) == 2
    # a failing fit: too many basis functions for the cap
    bad = tmp_path / "ws.json"
    d = hz.ExperimentConfig.load(cfg).source
    d["methods"] = [{"type": "ws", "repetitions": 10}]
    bad.write_text(json.dumps(d))
    assert main(["identify", "--data", str(data), "--method", "ws", "--config", str(bad)]) == 3
    # a time budget too small for the method
    assert main(["identify", "--data", str(data), "--method", "pnlss", "--budget", "0.01"]) == 4
    res = json.loads((data / "result_pnlss.json").read_text())
    assert res["status"] == "budget_exceeded"
