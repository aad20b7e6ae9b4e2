import json

import numpy as np
import pytest

from koopman_empc import cli, pipeline
from koopman_empc.errors import ConfigError
from koopman_empc.plots import inputs_svg, outputs_svg
from koopman_empc.signals import INPUT_HARD_BOUNDS, read_dataset_csv
from koopman_empc.simloop import CostLedger


def test_default_config_valid_and_round_trips():
    cfg = pipeline.RunConfig()
    cfg.validate()
    again = pipeline.config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_config_overrides_and_unknown_keys():
    cfg = pipeline.config_from_dict({"seed": 4, "empc": {"N": 30}, "identify": {"train": {"epochs": 5}}})
    assert cfg.seed == 4 and cfg.empc.N == 30 and cfg.identify.train.epochs == 5
    assert cfg.identify.train.rollout_len == pipeline.RunConfig().identify.train.rollout_len
    with pytest.raises(ConfigError):
        pipeline.config_from_dict({"empc": {"horizon": 30}})
    with pytest.raises(ConfigError):
        pipeline.config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        pipeline.config_from_dict({"scenario": {"timestep": 5.0}})
    with pytest.raises(ConfigError):
        pipeline.config_from_dict({"excitation": {"bounds": [[0.1, 20], [2, 11], [0.45, 1]]}})


def test_load_config_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        pipeline.load_config(tmp_path / "c.json")


def test_gen_data_cli(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 0
    first = (tmp_path / "data" / "train.csv").read_bytes()
    train = read_dataset_csv(tmp_path / "data" / "train.csv")
    test = read_dataset_csv(tmp_path / "data" / "test.csv")
    assert len(train) == len(test) == 1800
    assert train.within_bounds(INPUT_HARD_BOUNDS) and test.within_bounds(INPUT_HARD_BOUNDS)
    assert not np.array_equal(train.U, test.U)
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "data" / "train.csv").read_bytes() == first
    assert cli.main(["gen-data", "--out", str(tmp_path / "other"), "--seed", "5"]) == 0
    assert (tmp_path / "other" / "data" / "train.csv").read_bytes() != first


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_identify_missing_dataset(tmp_path, capsys):
    assert cli.main(["identify", "--out", str(tmp_path)]) == 1
    err = _error(capsys)
    assert err["error"] == "FileNotFoundError" and str(tmp_path / "data" / "train.csv") in err["message"]


def test_simulate_missing_model(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--model", "subspace"]) == 1
    assert "subspace.json" in _error(capsys)["message"]


def test_bad_config_reports_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"empc": {"N": 0}}))
    assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1
    assert _error(capsys)["error"] == "ConfigError"


def test_report_cli(tmp_path, capsys):
    for name in ("subspace_surrogate", "koopman_surrogate"):
        (tmp_path / "results" / name).mkdir(parents=True)
        CostLedger(1.0, 2.0, 3.0, 0.5, 0.1, 0.2, 0.3, scenario="s").save(tmp_path / "results" / name / "ledger.json")
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "Total cost" in out
    assert (tmp_path / "results" / "report_surrogate" / "report.csv").exists()
    CostLedger(scenario="other").save(tmp_path / "results" / "koopman_surrogate" / "ledger.json")
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
    assert _error(capsys)["error"] == "ScenarioMismatch"


def test_parser_rejects_unknown_model():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["simulate", "--model", "n4sid"])


def test_svg_plots_show_bands():
    t = np.arange(50) * 10.0
    Y = np.column_stack([np.linspace(65, 74, 50), np.full(50, 80.0), np.linspace(66, 75, 50)])
    svg = outputs_svg(t, Y)
    assert svg.startswith("<svg") and "min 72.5 degC" in svg and "min 73 degC" in svg
    assert 'fill="#d62728"' in svg and 'fill="#ff7f0e"' in svg
    U = np.tile([6.0, 5.0, 0.6], (50, 1))
    assert svg.count("<polyline") == 3
    assert inputs_svg(t, U).count("stroke-dasharray") >= 6


def test_save_models_writes_training_log(tmp_path):
    from koopman_empc.koopman import LINEAR, TrainConfig, train_koopman
    from koopman_empc.signals import Dataset
    rng = np.random.default_rng(0)
    U = rng.normal(size=(80, 3))
    Y = np.cumsum(U, axis=0) * 0.1
    M = train_koopman(Dataset(1.0, U, Y), LINEAR, 4, TrainConfig(rollout_len=5, epochs=3, batch=8))
    pipeline.save_models({"koopman_linear": M}, tmp_path)
    lines = (tmp_path / "koopman_linear_training.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4
    again = pipeline.load_model(tmp_path, "koopman_linear")
    assert np.array_equal(again.A, M.A) and again.history == []
