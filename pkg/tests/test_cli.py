import json

import pytest

from spincount.cli import RunConfig, main, parse_config, run
from spincount.errors import ConfigError


def test_minimal_protocol_config_parses(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"kind": "protocol", "S": 30, "schedule": {"ladder": {"dw": 1, "dt": 10}},
                                "eta": 1, "seed": 7}))
    cfg = parse_config(path)
    assert cfg.kind == "protocol" and cfg.seed == 7
    assert cfg.ramp().n_windows == 35


def test_conflicting_and_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        parse_config(overrides={"kind": "protocol", "S": 3, "superpose": [2, 1], "schedule": {"ladder": {"dw": 1, "dt": 1}}})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(overrides={"kind": "master", "S": 1, "omega": 1, "T": 1, "bogus": 1})
    with pytest.raises(ConfigError):
        parse_config(overrides={"kind": "protocol", "S": 3, "schedule": {"ladder": {"dw": 1}}})


def test_dicke_initial_sector_defaults_to_symmetric():
    cfg = parse_config(overrides={"kind": "spectrum", "N": 6, "gamma": 0.1, "omega": 1.0})
    assert cfg.system_spec().max_S == 3
    with pytest.raises(ConfigError, match="needs S"):
        parse_config(overrides={"kind": "spectrum", "omega": 1.0})


def test_config_roundtrip_is_idempotent():
    cfg = parse_config(overrides={"kind": "protocol", "S": "5/2", "schedule": {"linear": {"alpha": 1, "dt": 0.5}},
                                  "eta": 0.5})
    again = RunConfig.model_validate(json.loads(json.dumps(cfg.dump())))
    assert again == cfg and again.dump() == cfg.dump()


def _data_files(out):
    return {p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"}


def test_trajectory_run_is_reproducible(tmp_path):
    args = ["trajectory", "--S", "2", "--omega", "1", "--T", "3", "--eta", "0.6", "--realizations", "5",
            "--seed", "4", "--samples", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a, b = _data_files(tmp_path / "a"), _data_files(tmp_path / "b")
    assert set(a) >= {"records.jsonl", "ensemble.csv", "weights.csv", "config.json"}
    for name in a:
        if name != "config.json":
            assert a[name] == b[name], name
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["schema_version"] == 1 and manifest["seeds"]["seed"] == 4
    assert set(manifest["files"]) == set(a)
    assert "numpy" in manifest["versions"] and manifest["fingerprints"]
    # the manifest alone is enough to re-run
    cfg = RunConfig.model_validate(manifest["config"])
    assert cfg.seed == 4 and cfg.realizations == 5


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINCOUNT_OUT", str(tmp_path))
    out = run(parse_config(overrides={"kind": "spectrum", "S": 1, "omega": 1.0, "k": 4}))
    assert out.parent == tmp_path and (out / "spectrum.csv").exists()


def test_exit_codes(tmp_path, capsys):
    assert main(["protocol", "--S", "3"]) == 2
    assert main(["run"]) == 2
    assert main(["master", "--S", "1", "--omega", "1", "--T", "1", "--method", "rk", "--gamma", "0.1",
                 "--out", str(tmp_path)]) == 2
    assert "ConfigError" in capsys.readouterr().err


@pytest.mark.parametrize("kind,args,files", [
    ("master", ["--S", "1", "--omega", "1", "--T", "2", "--stationary"], {"timeseries.csv", "stationary.json"}),
    ("master", ["--S", "2", "--schedule", "ladder:dw=1,dt=2", "--windows", "4"], {"windows.csv", "estimate.json"}),
    ("scgf", ["--S", "2", "--omega", "1", "--s-grid=-0.1,0.1"], {"scgf.csv", "cumulants.json"}),
    ("spectrum", ["--N", "4", "--S", "1", "--gamma", "0.1", "--omega", "1", "--k", "6"], {"spectrum.csv"}),
    ("freeze", ["--superpose", "2,1", "--omega", "1.5", "--T", "5", "--t-star", "5", "--realizations", "4"],
     {"freeze.json", "weights.csv"}),
    ("protocol", ["--S", "2", "--schedule", "ladder:dw=1,dt=2", "--realizations", "2"],
     {"estimates.json", "windows.csv", "records.jsonl"}),
    ("protocol", ["--S", "2", "--schedule", "ladder:dw=1,dt=2", "--mode", "deterministic_mean"], {"estimate.json"}),
    ("benchmark", ["--S-list", "2", "--dt-list", "1", "--realizations", "2"], {"benchmark.csv"}),
])
def test_every_kind_writes_its_files(tmp_path, kind, args, files):
    assert main([kind, *args, "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert files | {"config.json", "manifest.json"} <= names


def test_config_file_with_flag_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"kind": "scgf", "S": 1, "omega": 1.0, "eta": 0.5}))
    assert main(["run", "--config", str(path), "--eta", "0.25", "--out", str(tmp_path / "o")]) == 0
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echoed["eta"] == 0.25 and echoed["kind"] == "scgf"
