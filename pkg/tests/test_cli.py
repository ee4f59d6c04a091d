import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from poredet.cli import main
from poredet.datasets import load_manifest, parse_annotations, write_annotations
from poredet.fcn import FcnConfig
from poredet.imagecore import OVERLAY_COLOR, GrayImage, PoreSet, save_image

TINY_CFG = """\
patch_size = 13
pore_radius = 4
channels = 6,6,6,6,6
epoch_positives = 300
batch = 64
max_epochs = 2
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--count", "10", "--width", "64", "--height", "48", "--seed", "3",
                 "--out", str(data)]) == 0
    assert main(["splits", "--data", str(data), "--spec", "counts:6,2,2", "--out", str(root / "split")]) == 0
    (root / "tiny.cfg").write_text(TINY_CFG)
    return root


def _ring_count(png):
    rgb = np.asarray(Image.open(png).convert("RGB"))
    ring = np.all(rgb == np.array(OVERLAY_COLOR, dtype=np.uint8), axis=2)
    return ndimage.label(ring, structure=np.ones((3, 3)))[1]


def test_synth_layout(dataset):
    m = load_manifest(dataset / "data", strict=True)
    assert len(m) == 10
    assert len(list((dataset / "data" / "images").glob("*.png"))) == 10
    assert "dpi = 1200" in (dataset / "data" / "manifest.txt").read_text()


def test_train_deterministic_and_logged(dataset, capsys):
    args = ["train", "--config", str(dataset / "tiny.cfg"), "--data", str(dataset / "data"),
            "--train-split", str(dataset / "split" / "train.txt"),
            "--val-split", str(dataset / "split" / "val.txt"), "--seed", "5", "--quiet"]
    assert main(args + ["--out", str(dataset / "a.pdet")]) == 0
    assert main(args + ["--out", str(dataset / "b.pdet")]) == 0
    assert (dataset / "a.pdet").read_bytes() == (dataset / "b.pdet").read_bytes()
    lines = (dataset / "a.csv").read_text().splitlines()
    assert "# seed = 5" in lines and "# patch_size = 13" in lines
    body = [l for l in lines if not l.startswith("#")]
    assert body[0] == "epoch,loss,val_f" and len(body) >= 2
    assert body[1].startswith("1,")


def test_missing_split_file_exit_2(dataset, capsys):
    rc = main(["train", "--data", str(dataset / "data"), "--train-split", str(dataset / "nope.txt"),
               "--val-split", str(dataset / "split" / "val.txt"), "--out", str(dataset / "x.pdet")])
    assert rc == 2
    assert "nope.txt" in capsys.readouterr().err


def test_bad_config_exit_2(dataset, capsys):
    bad = dataset / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["config", "--config", str(bad)]) == 2
    assert main(["config", "--set", "patch_size=16"]) == 2
    assert main(["config", "--set", "lr=0.01"]) == 0
    assert "lr = 0.01" in capsys.readouterr().out


def test_default_config_round_trip(capsys):
    assert main(["config"]) == 0
    assert FcnConfig.from_text(capsys.readouterr().out) == FcnConfig()


def test_argparse_usage_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["detect"])
    assert e.value.code == 2


def test_detect_fcn_and_eval(dataset, capsys):
    if not (dataset / "a.pdet").exists():
        test_train_deterministic_and_logged(dataset, capsys)
    out = dataset / "pred"
    assert main(["detect", "--method", "fcn", "--model", str(dataset / "a.pdet"),
                 "--image", str(dataset / "data" / "images"), "--out", str(out),
                 "--prob-threshold", "0.3"]) == 0
    assert len(list(out.glob("*.txt"))) == 10
    rc = main(["eval", "--pred-dir", str(out), "--gt-dir", str(dataset / "data" / "annotations"),
               "--out", str(dataset / "rep" / "r.json")])
    assert rc == 0
    rep = json.loads((dataset / "rep" / "r.json").read_text())
    assert 0 <= rep["aggregate"]["f"] <= 100
    assert (dataset / "rep" / "r.txt").exists()


def test_fcn_requires_model(dataset):
    assert main(["detect", "--method", "fcn", "--image", str(dataset / "data" / "images"),
                 "--out", str(dataset / "p")]) == 2


def test_eval_identity_and_empty(dataset, tmp_path, capsys):
    gt = dataset / "data" / "annotations"
    assert main(["eval", "--pred-dir", str(gt), "--gt-dir", str(gt), "--criterion", "euclidean:5"]) == 0
    out = capsys.readouterr().out
    assert "F = 100.00" in out and "euclidean:5" in out
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in gt.glob("*.txt"):
        (pred / p.name).write_bytes(b"")
    assert main(["eval", "--pred-dir", str(pred), "--gt-dir", str(gt), "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["tdr"] == 0
    (pred / "extra.txt").write_bytes(b"")
    assert main(["eval", "--pred-dir", str(pred), "--gt-dir", str(gt)]) == 2
    assert main(["eval", "--pred-dir", str(gt), "--gt-dir", str(gt), "--criterion", "euclid:3"]) == 2


def test_dpf_dark_image_and_overlay(tmp_path):
    save_image(GrayImage(np.zeros((40, 40))), tmp_path / "dark.png")
    assert main(["detect", "--method", "dpf", "--image", str(tmp_path / "dark.png"),
                 "--out", str(tmp_path / "d.txt")]) == 0
    assert (tmp_path / "d.txt").read_bytes() == b""
    # three well separated bright blobs on a dark ground
    y, x = np.mgrid[0:60, 0:90]
    img = np.zeros((60, 90))
    for cx, cy in ((15, 15), (45, 40), (75, 20)):
        img += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * 2.0 ** 2))
    save_image(GrayImage(np.clip(img, 0, 1)), tmp_path / "blobs.png")
    assert main(["detect", "--method", "filter", "--image", str(tmp_path / "blobs.png"),
                 "--out", str(tmp_path / "b.txt"), "--overlay", str(tmp_path / "b.png"),
                 "--quantile", "0.995"]) == 0
    pores = parse_annotations(tmp_path / "b.txt")
    assert len(pores) == 3
    assert _ring_count(tmp_path / "b.png") == len(pores)


def test_overlay_command(tmp_path):
    save_image(GrayImage(np.full((50, 50), 0.5)), tmp_path / "g.png")
    write_annotations(PoreSet.from_points([(10, 10), (30, 35)]), tmp_path / "p.txt")
    assert main(["overlay", "--image", str(tmp_path / "g.png"), "--pores", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path / "o.png")]) == 0
    assert _ring_count(tmp_path / "o.png") == 2
    assert main(["overlay", "--image", str(tmp_path / "missing.png"), "--pores", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path / "o.png")]) == 2


def test_crossval_command(dataset):
    out = dataset / "cv"
    args = ["crossval", "--data", str(dataset / "data"), "--folds", "5", "--config", str(dataset / "tiny.cfg"),
            "--max-epochs", "1", "--seed", "2", "--out"]
    assert main(args + [str(out)]) == 0
    fs = [json.loads((out / f"fold_{i}.json").read_text())["aggregate"]["f"] for i in range(5)]
    summary = (out / "summary.txt").read_text()
    assert summary.count("fold") == 5
    assert f"mean F = {np.mean(fs):.2f}" in summary
    assert main(args + [str(dataset / "cv2")]) == 0
    assert (dataset / "cv2" / "summary.txt").read_text() == summary
    assert main(["crossval", "--data", str(dataset / "data"), "--folds", "11", "--out", str(out)]) == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "poredet.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "detect", "eval", "crossval", "synth", "overlay"):
        assert cmd in r.stdout
