import json

import pytest
import yaml

from cbfbandit.cli import main
from cbfbandit.config import ConfigError, SimConfig, config_from_dict, config_to_dict, load_config
from cbfbandit.gp import load_hyperparameters

from conftest import CONFIGS


def test_shipped_configs_load():
    cruise = load_config(CONFIGS / "cruise.yaml")
    assert cruise.plant == "cruise" and cruise.dt_sample == 1e-3 and cruise.horizon == 100.0
    quad = load_config(CONFIGS / "quadrotor.yaml")
    assert quad.plant == "quadrotor" and quad.active_inputs == [0]
    assert quad.hypers_file.endswith("quadrotor_hypers.json")
    kernels, noise = load_hyperparameters(quad.hypers_file)
    assert len(kernels) == 3 and kernels[0].m == 4


def test_dict_roundtrip():
    cfg = load_config(CONFIGS / "cruise.yaml")
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"controler": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"controller": {"dt": 1.0}})
    with pytest.raises(ConfigError):
        SimConfig(delta=1.5)


def test_relative_hypers_path(tmp_path):
    (tmp_path / "h.json").write_text((CONFIGS / "quadrotor_hypers.json").read_text())
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"plant": {"name": "quadrotor"},
                                                     "gp": {"hypers_file": "h.json"}}))
    assert load_config(tmp_path / "c.yaml").hypers_file == str(tmp_path / "h.json")


@pytest.fixture
def short_cruise(tmp_path):
    doc = yaml.safe_load((CONFIGS / "cruise.yaml").read_text())
    doc["simulation"]["horizon"] = 0.5
    doc["controller"]["dt_sample"] = 0.01
    doc["sweep"]["trials"] = 1
    doc["sweep"]["dts"] = [0.1]
    doc["output"]["dir"] = str(tmp_path / "out")
    path = tmp_path / "cruise.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_cli_simulate(short_cruise, tmp_path, capsys):
    assert main(["simulate", str(short_cruise), "--seed", "2"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["safe"] is True and summary["error"] is None
    assert (tmp_path / "out" / "cruise_seed2.csv").exists()


def test_cli_sweep(short_cruise, tmp_path, capsys):
    assert main(["sweep", str(short_cruise), "--trials", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("dt_sample,policy")
    assert len(lines) == 3
    assert (tmp_path / "out" / "cruise_sweep_runs.jsonl").exists()


def test_cli_bounds(short_cruise, capsys):
    assert main(["bounds", str(short_cruise)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["delta_n_max"] is None or report["delta_n_max"] >= 1
    assert "closed_form" in report


def test_cli_fit_hypers(short_cruise, tmp_path):
    out = tmp_path / "h.json"
    assert main(["fit-hypers", str(short_cruise), "--out", str(out), "--points", "6"]) == 0
    kernels, noise = load_hyperparameters(out)
    assert len(kernels) == 2


def test_cli_reports_bad_input(tmp_path, short_cruise):
    assert main(["simulate", str(tmp_path / "missing.yaml")]) == 2
    assert main(["simulate", str(short_cruise), "--x0", "20", "36"]) == 2
