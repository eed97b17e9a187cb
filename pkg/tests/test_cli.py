"""End-to-end runs of the ``mcnet`` command line, in process."""

import csv
import io
import json

import numpy as np
import pytest

from mcnet.cli import main
from mcnet.data import save_pgm, synth_sample
from mcnet.model import train as train_mod

TINY = ["--synth", "--depth", "2", "--width", "6", "--side", "32", "--n-samples", "6",
        "--lr", "1e-3"]


def train(out, *extra):
    return main(["train", *TINY, "--epochs", "2", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert train(out) == 0
    return out


def test_train_writes_artifacts(run_dir):
    for name in ("config.json", "checkpoint.mcnt", "loss.csv", "loss.png"):
        assert (run_dir / name).stat().st_size > 0
    rows = list(csv.DictReader(io.StringIO((run_dir / "loss.csv").read_text())))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(float(r["train_loss"]) > 0 and r["test_loss"] for r in rows)
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["model"]["depth"] == 2 and cfg["lr"] == 1e-3


def test_train_prints_loss_csv(tmp_path, capsys):
    train(tmp_path)
    assert capsys.readouterr().out == (tmp_path / "loss.csv").read_text()


def test_train_is_reproducible(run_dir, tmp_path):
    train(tmp_path)
    assert (tmp_path / "loss.csv").read_bytes() == (run_dir / "loss.csv").read_bytes()
    assert (tmp_path / "checkpoint.mcnt").read_bytes() == (run_dir / "checkpoint.mcnt").read_bytes()


@pytest.mark.parametrize("strategy", ["1", "2", "none"])
def test_train_strategies(tmp_path, strategy):
    assert train(tmp_path, "--strategy", strategy, "--epochs", "1") == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["model"]["use_integration_module"] == (strategy == "1")
    assert cfg["model"]["use_cross_deconv"] == (strategy == "2")


def test_eval_writes_metrics_and_is_stable(run_dir, capsys):
    args = ["eval", "--synth", "--n-samples", "6", "--out", str(run_dir)]
    assert main(args) == 0
    first = (run_dir / "metrics.json").read_bytes()
    text = capsys.readouterr().out
    assert "accuracy" in text and "dice_tp" in text
    assert (run_dir / "metrics.png").stat().st_size > 0
    assert main(args) == 0
    assert (run_dir / "metrics.json").read_bytes() == first
    data = json.loads(first)
    assert data["task"] == "binary" and data["n_images"] == 2


def test_eval_architecture_mismatch(run_dir, capsys):
    code = main(["eval", "--synth", "--n-samples", "6", "--depth", "2", "--width", "9",
                 "--out", str(run_dir)])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1
    assert len(err) == 1 and err[0].startswith("error: CheckpointMismatchError: ")


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--synth", "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error: FileNotFoundError: ")


def test_brats_task_column_order(tmp_path, capsys):
    out = tmp_path / "b"
    base = ["--synth", "--n-classes", "4", "--in-channels", "4", "--depth", "2", "--width", "6",
            "--side", "32", "--n-samples", "4", "--out", str(out)]
    assert main(["train", *base, "--epochs", "1"]) == 0
    capsys.readouterr()
    assert main(["eval", *base, "--task", "brats"]) == 0
    header = capsys.readouterr().out.splitlines()[1].split()
    assert header[:3] == ["dice_star_et", "dice_star_wt", "dice_star_tc"]
    assert "naming" in (out / "metrics.txt").read_text()


def test_predict_writes_mask_of_input_size(run_dir, tmp_path):
    img = synth_sample(9, 0, 32, 2).image[0]
    path = save_pgm(np.round(img * 255).astype(np.uint8), tmp_path / "scan.pgm")
    args = ["predict", "--checkpoint", str(run_dir / "checkpoint.mcnt"), "--image", str(path),
            "--out", str(tmp_path), "--visual"]
    assert main(args) == 0
    from mcnet.data import load_pgm
    mask, _ = load_pgm(tmp_path / "scan.mask.pgm")
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 1}
    first = (tmp_path / "scan.mask.pgm").read_bytes()
    assert (tmp_path / "scan.vis.pgm").exists()
    assert main(args) == 0
    assert (tmp_path / "scan.mask.pgm").read_bytes() == first


def test_predict_rejects_wrong_size(run_dir, tmp_path, capsys):
    path = save_pgm(np.zeros((20, 24), np.uint8), tmp_path / "small.pgm")
    code = main(["predict", "--checkpoint", str(run_dir / "checkpoint.mcnt"),
                 "--image", str(path), "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 1 and "ShapeError" in err and "32x32" in err


def test_audit_sweep(tmp_path, capsys):
    assert main(["audit", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("total parameters: ")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "audit.csv").read_text())))
    depths = [r for r in rows if r["variant"].startswith("MC-Net(")]
    assert [int(r["depth"]) for r in depths] == [2, 3, 4, 5]
    by = {r["strategy"]: int(r["params"]) for r in rows if r["variant"].startswith("strategy")}
    assert by["none"] < by["1"] < by["full"] and by["2"] < by["full"]
    assert (tmp_path / "params.png").stat().st_size > 0
    assert "variant sweep" in (tmp_path / "audit.txt").read_text()


def test_non_finite_loss_leaves_aborted_marker(tmp_path, monkeypatch, capsys):
    real = train_mod.batch_loss

    def poisoned(*args, **kw):
        loss = real(*args, **kw)
        loss.data = np.asarray(np.inf, dtype=loss.data.dtype)
        return loss

    monkeypatch.setattr(train_mod, "batch_loss", poisoned)
    assert train(tmp_path) == 1
    assert "error: NonFiniteLossError: " in capsys.readouterr().err
    assert (tmp_path / "checkpoint.mcnt.aborted").exists()
    assert (tmp_path / "checkpoint.mcnt").exists()


def test_usage_error_is_one_line(capsys):
    assert main(["train", "--epochs", "many"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: UsageError: ")


def test_no_dataset_is_config_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigError: ")


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": True, "depth": 2, "width": 6, "side": 32,
                               "n_samples": 6, "epochs": 3, "lr": 1e-3}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["depth"] == 2 and saved["lr"] == 1e-3
    assert len((out / "loss.csv").read_text().splitlines()) == 2


def test_synth_command_round_trips(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--n-samples", "3", "--side", "32", "--out", str(out)]) == 0
    assert len(list((out / "images").glob("*.pgm"))) == 3
    assert main(["train", "--data", str(out), "--depth", "2", "--width", "6", "--side", "32",
                 "--epochs", "1", "--split", "none", "--out", str(tmp_path / "r")]) == 0
