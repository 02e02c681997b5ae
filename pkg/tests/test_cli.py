import json
import subprocess
import sys

import numpy as np
import pytest

from sslab.cli import main
from sslab.data import read_pgm, read_ppm, write_pgm, write_ppm


@pytest.fixture
def image(tmp_path, rng):
    path = tmp_path / "in.ppm"
    write_ppm(path, rng.uniform(size=(20, 24, 3)))
    return path


def test_warp_identity_round_trips_bytes(tmp_path, image, capsys):
    out = tmp_path / "out.ppm"
    assert main(["warp", str(image), str(out), "--identity"]) == 0
    assert out.read_bytes() == image.read_bytes()
    assert np.all(read_pgm(tmp_path / "out.mask.pgm") == 255)
    tau = json.loads(capsys.readouterr().out)
    assert tau["geometric"]["displacements"] == [[0.0, 0.0]] * 4
    assert tau["photometric"]["permutation"] == [0, 1, 2]


def test_warp_random_is_seeded(tmp_path, image, capsys):
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert main(["warp", str(image), str(a), "--seed", "5"]) == 0
    assert main(["warp", str(image), str(b), "--seed", "5", "--mask", str(tmp_path / "m.pgm")]) == 0
    assert a.read_bytes() == b.read_bytes()
    first, second = capsys.readouterr().out.strip().splitlines()
    assert first == second
    assert abs(json.loads(first)["r"] - 1.0) < 1e-12
    mask = read_pgm(tmp_path / "m.pgm")
    assert set(np.unique(mask)) <= {0, 255}


def test_warp_geometric_only_keeps_colors_on_integer_grid(tmp_path, image):
    out = tmp_path / "o.ppm"
    assert main(["warp", str(image), str(out), "--no-geometric"]) == 0
    assert read_ppm(out).shape == (20, 24, 3)


def test_missing_input_is_io_error(tmp_path, capsys):
    assert main(["warp", str(tmp_path / "nope.ppm"), str(tmp_path / "o.ppm")]) == 1
    assert "sslab:" in capsys.readouterr().err


def test_bad_image_is_io_error(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n000")
    assert main(["warp", str(bad), str(tmp_path / "o.ppm")]) == 1


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train-moons", "--variant", "2w-c1", "--teacher", "mean-teacher"]) == 2
    assert "two-way consistency is not possible with Mean Teacher" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["train-moons", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"task": "dense"}))
    assert main(["train-moons", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train-dense", "--config", str(cfg)]) == 2
    assert main(["sweep", "--variants", "1w-ct,zz", "--epochs", "1"]) == 2


def test_train_moons_config_plus_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"task": "moons", "epochs": 50, "moons_n": 100, "moons_test_n": 100}))
    out = tmp_path / "run"
    assert main(["train-moons", "--config", str(cfg), "--epochs", "10", "--out", str(out)]) == 0
    final = json.loads(capsys.readouterr().out)
    assert final["step"] == 10 and 0 <= final["accuracy"] <= 1
    assert json.loads((out / "config.json").read_text())["epochs"] == 10


def test_train_dense_small(tmp_path, capsys):
    out = tmp_path / "d"
    args = ["train-dense", "--epochs", "1", "--train-scenes", "16", "--val-scenes", "8", "--image-size", "16",
            "--label-proportion", "0.25", "--out", str(out)]
    assert main(args) == 0
    assert "miou" in json.loads(capsys.readouterr().out)
    assert (out / "iou.json").exists()


def test_sweep_command(tmp_path, capsys):
    out = tmp_path / "sw"
    args = ["sweep", "--variants", "supervised,1w-ct", "--seeds", "0,1", "--epochs", "3", "--out", str(out)]
    assert main(args) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"supervised", "1w-ct"}
    assert (out / "summary.json").exists()


def test_miou_command(tmp_path, capsys):
    write_pgm(tmp_path / "p.pgm", np.array([[1, 2, 2], [2, 3, 1]]))
    write_pgm(tmp_path / "t.pgm", np.array([[1, 1, 2], [2, 3, 0]]))
    assert main(["miou", str(tmp_path / "p.pgm"), str(tmp_path / "t.pgm")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["per_class_iou"] == {"1": 0.5, "2": 2 / 3, "3": 1.0}
    write_pgm(tmp_path / "s.pgm", np.ones((1, 1), dtype=int))
    assert main(["miou", str(tmp_path / "p.pgm"), str(tmp_path / "s.pgm")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sslab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "warp" in proc.stdout
