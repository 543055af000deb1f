import json
import subprocess
import sys

import numpy as np
import pytest

from mmisnet import kernels
from mmisnet.cli import main
from mmisnet.gradcheck import run_suite
from mmisnet.network import NetworkConfig, init_parameters
from mmisnet.volume import Volume, write_volume

SPEC = {"seed": 1, "image_size": 16, "datasets": [
    {"id": "a", "count": 3, "annotate": ["organ"]},
    {"id": "b", "count": 3, "annotate": ["lesion"], "modality": "speckle"}]}
CONFIG = {"learning_rate": 0.001, "max_epochs": 2, "batch_size": 2, "patience": 1,
          "base_channels": 2, "depth": 1, "validation_fraction": 0.34}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    (d / "config.json").write_text(json.dumps(CONFIG))
    return d


def test_full_pipeline(workdir, capsys):
    assert main(["gen-data", "--spec", str(workdir / "spec.json"), "--out", str(workdir / "data")]) == 0
    assert (workdir / "data" / "dataset_a" / "manifest.json").is_file()
    assert main(["train", "--config", str(workdir / "config.json"), "--data", str(workdir / "data"),
                 "--out", str(workdir / "run")]) == 0
    ckpt = workdir / "run" / "best.mmck"
    assert ckpt.is_file() and (workdir / "run" / "train_log.csv").is_file()
    assert main(["evaluate", "--ckpt", str(ckpt), "--data", str(workdir / "data"),
                 "--report", str(workdir / "r.csv")]) == 0
    lines = (workdir / "r.csv").read_text().splitlines()
    assert lines[0] == "class,ds,avd_mm3,avd_norm,auc" and lines[-1].startswith("mean,")
    assert main(["evaluate", "--ckpt", str(ckpt), "--data", str(workdir / "data"),
                 "--report", str(workdir / "t.csv"), "--truth", "--split", "val"]) == 0
    img = workdir / "data" / "dataset_a" / "images" / "0000.mmiv"
    assert main(["predict", "--ckpt", str(ckpt), "--in", str(img), "--out", str(workdir / "pred"),
                 "--threshold", "0.5"]) == 0
    assert (workdir / "pred" / "overlay_000.ppm").is_file()


def test_usage_errors_exit_1(workdir, capsys):
    assert main(["train", "--data", "x"]) == 1
    assert main(["no-such-command"]) == 1
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"learning_rate": -1}))
    assert main(["train", "--config", str(bad), "--data", str(workdir), "--out", str(workdir / "o")]) == 1


def test_data_errors_exit_2(workdir, tmp_path, capsys):
    broken = tmp_path / "broken.mmck"
    broken.write_bytes(b"garbage!" * 4)
    assert main(["evaluate", "--ckpt", str(broken), "--data", str(workdir / "data"),
                 "--report", str(tmp_path / "r.csv")]) == 2
    vol = tmp_path / "v.mmiv"
    write_volume(Volume(np.zeros((1, 8, 8))), vol)
    vol.write_bytes(vol.read_bytes()[:-3])
    ckpt = tmp_path / "fresh.mmck"
    init_parameters(NetworkConfig(base_channels=2, depth=1, num_classes=2), 0).save(ckpt)
    assert main(["predict", "--ckpt", str(ckpt), "--in", str(vol), "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--ckpt", str(tmp_path / "missing.mmck"), "--data", str(workdir),
                 "--report", str(tmp_path / "r.csv")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "conv2d/input" in out and "all" in out


def test_gradcheck_report_deterministic():
    a = [(r.name, r.rel_error) for r in run_suite(4)]
    b = [(r.name, r.rel_error) for r in run_suite(4)]
    assert a == b


def test_corrupted_backward_is_named(monkeypatch, capsys):
    real = kernels.col2im
    monkeypatch.setattr(kernels, "col2im", lambda *a: 1.01 * real(*a))
    assert main(["gradcheck"]) == 3
    captured = capsys.readouterr()
    assert "FAIL  conv2d/input" in captured.out
    assert "conv2d/input" in captured.err


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "mmisnet.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
