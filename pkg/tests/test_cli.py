import json
import subprocess
import sys

import numpy as np
import pytest

from biskdet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, read_config_file
from biskdet.dataio import DatasetManifest
from biskdet.evalmetrics import average_precision_map, class_ap_rows
from biskdet.geometry import Box
from biskdet.head import Detection


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """16 synthetic 32x32 images with split tags, plus a 2-epoch checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--seed", "3", "--counts", "10,3,3", "--size", "32"]) == 0
    (root / "smoke.cfg").write_text("epochs = 2\nbatch_size = 4  # small\nloss = ce\nprecision = float64\n")
    code = main(["train", "--manifest", str(root / "data" / "manifest.json"), "--out", str(root / "run"),
                 "--config", str(root / "smoke.cfg"), "--seed", "0", "--eval-every", "1"])
    assert code == EXIT_OK
    return root


def test_train_outputs(workdir):
    assert (workdir / "run" / "final.ckpt").exists()
    lines = (workdir / "run" / "curves.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,")


def test_flag_overrides_config(workdir, tmp_path):
    code = main(["train", "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(tmp_path),
                 "--config", str(workdir / "smoke.cfg"), "--seed", "0", "--epochs", "1"])
    assert code == EXIT_OK
    assert len((tmp_path / "curves.csv").read_text().splitlines()) == 2


def test_eval_reports(workdir, capsys):
    out = workdir / "report"
    code = main(["eval", "--checkpoint", str(workdir / "run" / "final.ckpt"),
                 "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(out)])
    assert code == EXIT_OK
    table = (out / "class_ap.csv").read_text().splitlines()
    names = [row.split(",")[0] for row in table[1:]]
    assert names == ["Crab", "Fish-big", "Fish-school", "fish-small", "shrimp", "jellyfish", "mAP"]
    assert (out / "confusion.txt").read_text().splitlines()[0].split()[-1] == "background"
    assert "mAP@0.5 =" in capsys.readouterr().out


def test_attack_then_eval_with_perturbation(workdir):
    uap = workdir / "uap.blob"
    assert main(["attack", "--checkpoint", str(workdir / "run" / "final.ckpt"), "--manifest",
                 str(workdir / "data" / "manifest.json"), "--seed", "1", "--samples", "4", "--out", str(uap)]) == 0
    from biskdet.adversarial import Perturbation

    u = Perturbation.load(uap)
    assert np.max(np.abs(u.data)) <= 0.1 and u.shape == (32, 32, 3)
    assert main(["eval", "--checkpoint", str(workdir / "run" / "final.ckpt"), "--manifest",
                 str(workdir / "data" / "manifest.json"), "--uap", str(uap), "--out", str(workdir / "r2")]) == 0


def test_explain_writes_named_pgm(workdir):
    out = workdir / "heat"
    assert main(["explain", "--checkpoint", str(workdir / "run" / "final.ckpt"), "--manifest",
                 str(workdir / "data" / "manifest.json"), "--out", str(out), "--class-id", "2", "--limit", "2"]) == 0
    pgms = sorted(p.name for p in out.glob("*.pgm"))
    assert pgms == ["00013_Fish-school.pgm", "00014_Fish-school.pgm"]
    assert len(list(out.glob("*_overlay.png"))) == 2


def test_kfold_summary(tmp_path, capsys):
    assert main(["eval", "--kfold-scores", "99.5,98.7,98.0,97.0,99.8", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "98.6 ± 1.0"
    assert (tmp_path / "kfold.txt").read_text() == "98.6 ± 1.0\n"


def test_stats_and_anchors(workdir, capsys, tmp_path):
    assert main(["stats", "--counts", "17,29,9,22,8,12"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "mean 16.17, variance 55.81, std 7.47"
    assert main(["anchors", "--manifest", str(workdir / "data" / "manifest.json"), "--k", "2",
                 "--out", str(tmp_path / "a.json")]) == 0
    cfg = json.loads((tmp_path / "a.json").read_text())
    assert len(cfg["aspect_ratios"]) >= 1


def test_prepare_yolo_directory(workdir, tmp_path):
    out = tmp_path / "prepared.json"
    assert main(["prepare", "--input", str(workdir / "data"), "--out", str(out), "--seed", "4"]) == 0
    m = DatasetManifest.from_json(out.read_text())
    assert [m.splits.count(s) for s in ("train", "val", "test")] == [11, 3, 2]
    assert (out.parent / m.records[0].image).resolve().exists()


def test_config_file_rejects_unknown_key(tmp_path):
    (tmp_path / "bad.cfg").write_text("epochs = 3\nlearning_rat = 0.1\n")
    from biskdet.cli import UsageError

    with pytest.raises(UsageError):
        read_config_file(tmp_path / "bad.cfg")


@pytest.mark.parametrize("argv", [
    ["train", "--manifest", "m.json", "--out", "o"],
    ["synth", "--out", "o"],
    ["attack", "--checkpoint", "c", "--manifest", "m", "--out", "u"],
    ["frobnicate"],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_USAGE


def test_bad_config_value_is_usage_error(workdir, tmp_path):
    code = main(["train", "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(tmp_path),
                 "--seed", "0", "--epochs", "two"])
    assert code == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["stats", "--manifest", str(tmp_path / "missing.json")]) == EXIT_DATA
    (tmp_path / "labels").mkdir()
    assert main(["prepare", "--input", str(tmp_path), "--out", str(tmp_path / "m.json")]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the divergence is the point
def test_numeric_failure_exit_code(workdir, tmp_path):
    code = main(["train", "--manifest", str(workdir / "data" / "manifest.json"), "--out", str(tmp_path),
                 "--config", str(workdir / "smoke.cfg"), "--seed", "0", "--optimizer", "sgd",
                 "--learning-rate", "1e30"])
    assert code == EXIT_NUMERIC


def test_ideal_detector_scores_100():
    boxes = [np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]]), np.array([[0.5, 0.5, 0.4, 0.4]])]
    classes = [np.array([0, 4]), np.array([2])]
    dets = [[Detection(Box.from_center(*b), int(c), 1.0) for b, c in zip(bs, cs)] for bs, cs in zip(boxes, classes)]
    res = average_precision_map(dets, boxes, classes, 6)
    assert class_ap_rows(res, ["c"] * 6)[-1][-1] == 100.0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "biskdet", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "explain" in out.stdout
