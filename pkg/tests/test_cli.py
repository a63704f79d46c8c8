import copy
import json
import os

import numpy as np
import pytest

from superloc.cli import (
    CSV_HEADER,
    DEFAULT_CONFIG,
    dataset_from_dict,
    main,
    parse_config,
)
from superloc.errors import ConfigError
from superloc.harness import default_scene
from superloc.solver import adcg_solve


def tiny_config(**experiment):
    doc = copy.deepcopy(DEFAULT_CONFIG)
    doc["system"]["num_antennas"] = 8
    doc["system"]["num_subcarriers"] = 16
    doc["solver"]["coarse_grid_points_per_axis"] = 8
    doc["solver"]["max_outer_iters"] = 3
    doc["solver"]["local_descent"]["max_steps"] = 120
    doc["experiment"].update({"trials": 2, "snr_grid_db": [None, 10.0],
                              "seed": 4242, "num_scatterers": 1})
    doc["experiment"].update(experiment)
    return doc


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_parse_config_rejects_unknown_keys():
    doc = copy.deepcopy(DEFAULT_CONFIG)
    doc["system"]["bogus"] = 1
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert "bogus" in str(err.value)


def test_parse_config_rejects_zero_trials(tmp_path):
    doc = tiny_config(trials=0)
    code = main(["run", "--config", write_config(tmp_path, doc)])
    assert code == 2


def test_parse_config_field_diagnostics():
    doc = copy.deepcopy(DEFAULT_CONFIG)
    doc["experiment"]["trials"] = 0
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert err.value.field == "experiment.trials"


def test_parse_config_km_conversion():
    cfg = parse_config(copy.deepcopy(DEFAULT_CONFIG))
    assert {(p.x, p.y) for p in cfg.system.bs_positions} == {
        (0.0, 0.0), (0.0, 1000.0), (1000.0, 0.0), (1000.0, 1000.0)}
    assert cfg.scene.xmax == 1000.0


def test_parse_config_wrong_schema_version():
    doc = copy.deepcopy(DEFAULT_CONFIG)
    doc["schema_version"] = 99
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_init_config_then_parse(tmp_path):
    out = tmp_path / "default.json"
    assert main(["init-config", "--out", str(out)]) == 0
    parse_config(json.loads(out.read_text()))


def test_run_writes_csv_and_summary(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "results.csv"
    code = main(["run", "--config", cfg_path, "--out", str(out)])
    assert code in (0, 3)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + 2 * 2            # two SNR points x two trials
    printed = capsys.readouterr().out
    assert "mean_rmse" in printed


def test_run_byte_identical_across_executions_and_threads(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config())
    outs = []
    for name, threads in [("a.csv", 1), ("b.csv", 1), ("c.csv", 4)]:
        out = tmp_path / name
        main(["run", "--config", cfg_path, "--out", str(out), "--threads", str(threads)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_run_seed_precedence_flag_env_file(tmp_path, monkeypatch):
    cfg_path = write_config(tmp_path, tiny_config())
    base = tmp_path / "base.csv"
    main(["run", "--config", cfg_path, "--out", str(base)])

    monkeypatch.setenv("SUPERLOC_SEED", "777")
    env_out = tmp_path / "env.csv"
    main(["run", "--config", cfg_path, "--out", str(env_out)])
    assert env_out.read_bytes() != base.read_bytes()

    flag_out = tmp_path / "flag.csv"
    main(["run", "--config", cfg_path, "--out", str(flag_out), "--seed", "4242"])
    assert flag_out.read_bytes() == base.read_bytes()   # flag wins over env
    monkeypatch.delenv("SUPERLOC_SEED")


def test_synth_solve_round_trip_matches_in_process(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config(snr_grid_db=[None]))
    data_path = tmp_path / "dataset.json"
    assert main(["synth", "--config", cfg_path, "--out", str(data_path)]) == 0

    doc = json.loads(data_path.read_text())
    run, scenario, measurements = dataset_from_dict(doc)
    assert scenario is not None

    # serialisation is exact: re-read matrices are Frobenius-identical
    doc2 = json.loads(data_path.read_text())
    _, _, meas2 = dataset_from_dict(doc2)
    for a, b in zip(measurements.per_bs, meas2.per_bs):
        assert np.array_equal(a, b)

    scfg = run.solver
    scfg.scene = default_scene(run.system)
    expected = adcg_solve(measurements, run.system, scfg)

    out_path = tmp_path / "solution.json"
    code = main(["solve", "--data", str(data_path), "--out", str(out_path)])
    assert code in (0, 3)
    sol = json.loads(out_path.read_text())
    assert sol["converged"] == expected.converged
    got = sorted(tuple(a["mobile_m"]) + tuple(a["scatter_m"]) for a in sol["atoms"])
    want = sorted((a.mobile.x, a.mobile.y, a.scatter.x, a.scatter.y)
                  for a in expected.candidate.atoms)
    assert got == want
    assert "rmse_m" in sol                     # ground truth present in dataset


def test_solve_without_ground_truth_omits_rmse(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config(snr_grid_db=[None]))
    data_path = tmp_path / "dataset.json"
    main(["synth", "--config", cfg_path, "--out", str(data_path)])
    doc = json.loads(data_path.read_text())
    del doc["scenario"]
    stripped = tmp_path / "stripped.json"
    stripped.write_text(json.dumps(doc))
    out_path = tmp_path / "solution.json"
    code = main(["solve", "--data", str(stripped), "--out", str(out_path)])
    assert code in (0, 3)
    sol = json.loads(out_path.read_text())
    assert "rmse_m" not in sol
    assert "mobile_estimate_m" in sol


def test_solve_truncated_file_schema_error(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config(snr_grid_db=[None]))
    data_path = tmp_path / "dataset.json"
    main(["synth", "--config", cfg_path, "--out", str(data_path)])
    text = data_path.read_text()
    broken = tmp_path / "broken.json"
    broken.write_text(text[: len(text) // 2])
    assert main(["solve", "--data", str(broken)]) == 2


def test_solve_malformed_matrix_schema_error(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config(snr_grid_db=[None]))
    data_path = tmp_path / "dataset.json"
    main(["synth", "--config", cfg_path, "--out", str(data_path)])
    doc = json.loads(data_path.read_text())
    doc["measurements"]["per_bs"][0] = doc["measurements"]["per_bs"][0][:3]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["solve", "--data", str(bad)]) == 2


def test_missing_config_file_exit_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_qpsk_pilot_config_round_trip(tmp_path):
    doc = tiny_config(snr_grid_db=[None])
    doc["system"]["pilot"] = {"kind": "qpsk", "seed": 11}
    cfg = parse_config(doc)
    assert np.allclose(np.abs(cfg.system.symbols), 1.0)
    assert not np.allclose(cfg.system.symbols, np.ones(16))
    data_path = tmp_path / "ds.json"
    assert main(["synth", "--config", write_config(tmp_path, doc), "--out", str(data_path)]) == 0
    run, scen, meas = dataset_from_dict(json.loads(data_path.read_text()))
    assert np.allclose(np.abs(run.system.symbols), 1.0)
