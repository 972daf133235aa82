import json

import numpy as np
import pytest

from ppgnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_run_config, main, UsageError
from ppgnet.dataio import Recording, load_windowed, save_recording
from ppgnet.metrics import EvalReport


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "raw"), "--n", "3", "--duration", "30", "--seed", "2"]) == EXIT_OK
    assert main(["prepare", str(root / "raw" / "*.manifest"), "--out", str(root / "ds.bin")]) == EXIT_OK
    return root


def test_synth_prepare_counts(workspace, capsys):
    ds = load_windowed(workspace / "ds.bin")
    assert len(ds) == 3 * 12 and ds.subjects == ["S01", "S02", "S03"]


def test_cv_writes_report_and_histories(workspace, capsys):
    out = workspace / "cv"
    code = main(["cv", str(workspace / "ds.bin"), "--scheme", "kfold:3", "--epochs", "1",
                 "--batch-size", "12", "--out", str(out), "--save-weights"])
    assert code == EXIT_OK
    report = EvalReport.load(out)
    assert len(report) == 36 and report.meta["scheme"] == "KFOLD(3)"
    assert report.meta["run_config"]["train"]["epochs"] == 1
    assert (out / "history_fold2.csv").read_text().startswith("epoch,mean_loss\n1,")
    assert (out / "fold0.weights").exists()
    assert "pooled" in capsys.readouterr().out


def test_train_eval_and_transfer(workspace, capsys):
    w = workspace / "m.weights"
    assert main(["train", str(workspace / "ds.bin"), "--out-weights", str(w), "--epochs", "1",
                 "--batch-size", "36"]) == EXIT_OK
    assert main(["eval", str(w), str(workspace / "ds.bin"), "--out", str(workspace / "ev")]) == EXIT_OK
    assert len(EvalReport.load(workspace / "ev")) == 36
    assert main(["transfer", str(workspace / "ds.bin"), "--condition", "2", "--source-weights", str(w),
                 "--out", str(workspace / "t2")]) == EXIT_OK
    meta = EvalReport.load(workspace / "t2").meta
    assert meta["epochs"] == 0 and meta["optimizer_steps"] == 0
    assert "epochs 0" in capsys.readouterr().out


def test_transfer_without_source_is_usage_error(workspace):
    assert main(["transfer", str(workspace / "ds.bin"), "--condition", "3", "--out", str(workspace / "t3")]) \
        == EXIT_USAGE


def test_short_recording_prepares_zero_windows(tmp_path, capsys):
    rec = Recording("short", np.sin(np.arange(350) / 5.0), 50.0, np.zeros(2800), 400.0)
    manifest = save_recording(rec, tmp_path)
    assert main(["prepare", str(manifest), "--out", str(tmp_path / "d.bin")]) == EXIT_OK
    assert len(load_windowed(tmp_path / "d.bin")) == 0
    assert "kept 0" in capsys.readouterr().out
    assert main(["cv", str(tmp_path / "d.bin"), "--out", str(tmp_path / "cv")]) == EXIT_DATA


def test_exit_codes(tmp_path):
    assert main(["prepare", str(tmp_path / "none*.manifest"), "--out", str(tmp_path / "x.bin")]) == EXIT_DATA
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    assert main(["info", "--set", "train.colour=red"]) == EXIT_USAGE
    assert main(["info", "--set", "model.lstm2_input=300"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["info", "--config", str(bad)]) == EXIT_USAGE


def test_info_prints_counts(capsys):
    assert main(["info"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "total" in out and "400589" in out and "LSTM2_input [8, 384]" in out


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 7, "freeze": ["LSTM2", "Linear"]}, "cv": {"scheme": "loso"}}))
    cfg = load_run_config(str(path), ["train.learning_rate=0.01", "model.dropout=0"])
    assert cfg.train.epochs == 7 and cfg.train.freeze == ("LSTM2", "Linear")
    assert cfg.train.learning_rate == 0.01 and cfg.model.dropout == 0.0 and cfg.cv.scheme == "loso"
    with pytest.raises(UsageError):
        load_run_config(None, ["train.epochs"])
    with pytest.raises(UsageError):
        load_run_config(None, ["train.batch_size=0"])
