import csv
import json

import numpy as np
import pytest

from polarseg.cli import main
from polarseg.io import load_config, read_manifest, read_png
from polarseg.polar import PolarConfig

TRAIN_FLAGS = ["--steps", "6", "--depth", "2", "--base-channels", "2", "--bins", "32", "--seed", "7"]


def files_of(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--n", "12", "--size", "80", "--seed", "3", "--margin", "0.1"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(out), *TRAIN_FLAGS]) == 0
    return out


def test_synth_layout(dataset):
    rows = read_manifest(dataset)
    assert len(rows) == 12
    for row in rows:
        assert (dataset / row["image"]).exists() and (dataset / row["disc_mask"]).exists()
        assert row["label"] in ("0", "1")
    assert read_png(dataset / rows[0]["image"]).shape == (80, 80, 3)
    assert set(np.unique(read_png(dataset / rows[0]["disc_mask"]))) <= {0.0, 1.0}
    cfg = load_config(dataset / "run_config.txt")
    assert (cfg.n, cfg.size, cfg.seed) == (12, 80, 3)


def test_eval_identical_directories(dataset, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    assert main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[-1]["name"] == "mean" and len(rows) == 13
    for row in rows:
        for key in ("E_disc", "E_cup", "E_rim", "delta_E"):
            assert float(row[key]) == 0.0
        for key in ("A_disc", "A_cup", "A_rim"):
            assert float(row[key]) == 1.0
    assert (tmp_path / "run_config.txt").exists()


def test_screen_perfect_scores(dataset, tmp_path, capsys):
    ev = tmp_path / "eval.csv"
    main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--out", str(ev)])
    roc = tmp_path / "roc.csv"
    assert main(["screen", "--scores", str(ev), "--gt", str(dataset), "--out", str(roc)]) == 0
    assert "AUC 1.0000" in capsys.readouterr().out
    points = read_csv(roc)
    assert float(points[0]["fpr"]) == 0.0 and float(points[-1]["tpr"]) == 1.0


def test_train_is_byte_reproducible(dataset, checkpoint, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--data", str(dataset), "--out", str(again), *TRAIN_FLAGS]) == 0
    assert files_of(again) == files_of(checkpoint)
    assert (checkpoint / "weights.mnetw").read_bytes()[:6] == b"MNETW1"


def test_rerun_from_resolved_config(dataset, checkpoint, tmp_path):
    rerun = tmp_path / "rerun"
    assert main(["train", "--data", str(dataset), "--out", str(rerun),
                 "--config", str(checkpoint / "run_config.txt")]) == 0
    assert files_of(rerun) == files_of(checkpoint)


def test_resume_continues_from_checkpoint(dataset, checkpoint, tmp_path):
    resumed = tmp_path / "resumed"
    assert main(["train", "--data", str(dataset), "--out", str(resumed), "--resume", str(checkpoint),
                 "--steps", "9", "--bins", "32", "--seed", "7"]) == 0
    assert json.loads((resumed / "state.json").read_text())["step"] == 9
    assert len(read_csv(resumed / "loss.csv")) == 3


def test_segment_twice_is_identical(dataset, checkpoint, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["segment", "--weights", str(checkpoint), "--manifest", str(dataset), "--out", str(out)]) == 0
    assert files_of(a) == files_of(b)
    rows = read_manifest(a)
    assert len(rows) == 12
    record = json.loads((a / "records" / f"{rows[0]['name']}.json").read_text())
    assert {"cdr", "rdar", "disc_ellipse", "cup_ellipse", "cup_missing", "cup_outside_disc"} <= set(record)
    # the prediction manifest feeds straight back into eval
    assert main(["eval", "--pred", str(a), "--gt", str(dataset), "--out", str(tmp_path / "e.csv")]) == 0


def test_segment_with_weights_file_and_auto_center(dataset, checkpoint, tmp_path):
    image = dataset / read_manifest(dataset)[0]["image"]
    out = tmp_path / "seg"
    # a bare weights file needs the run config to rebuild the graph
    assert main(["segment", str(image), "--weights", str(checkpoint / "weights.mnetw"), "--center", "auto",
                 "--config", str(checkpoint / "run_config.txt"), "--out", str(out)]) == 0
    assert (out / "masks" / f"{image.stem}_disc.png").exists()


def test_segment_missing_center_names_all_sources(dataset, checkpoint, tmp_path, capsys):
    image = dataset / read_manifest(dataset)[0]["image"]
    code = main(["segment", str(image), "--weights", str(checkpoint), "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert code == 2
    assert "--center U,V" in err and "--manifest" in err and "--center auto" in err


def test_segment_rejects_corrupt_weights(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.mnetw"
    bad.write_bytes(b"NOTW01" + b"\x00" * 32)
    image = dataset / read_manifest(dataset)[0]["image"]
    code = main(["segment", str(image), "--weights", str(bad), "--center", "40,40", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "MNETW1 expected" in capsys.readouterr().err


def test_unknown_config_key_rejected(dataset, tmp_path, capsys):
    cfg = tmp_path / "run.txt"
    cfg.write_text("seed = 1\nlearning_rate = 0.1\n")
    code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")])
    err = capsys.readouterr().err
    assert code == 2
    assert "run.txt:2" in err and "learning_rate" in err


def test_bad_config_value_rejected(tmp_path, capsys):
    cfg = tmp_path / "run.txt"
    cfg.write_text("# comment\nepochs = many\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "run.txt:2" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("n = 2\nsize = 80\nseed = 4\n")
    out = tmp_path / "s"
    assert main(["synth", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    resolved = load_config(out / "run_config.txt")
    assert (resolved.n, resolved.seed) == (2, 9)


def test_polar_writes_image_and_sidecar(dataset, tmp_path):
    row = read_manifest(dataset)[0]
    out = tmp_path / "polar"
    assert main(["polar", str(dataset / row["image"]), "--center", f"{row['u']},{row['v']}",
                 "--bins", "64", "--out", str(out)]) == 0
    stem = row["image"].split("/")[-1][:-4]
    img = read_png(out / f"{stem}_polar.png")
    cfg = PolarConfig.from_json((out / f"{stem}_polar.json").read_text())
    assert img.shape[:2] == cfg.shape == (64, 64)
    assert cfg.center == (float(row["u"]), float(row["v"])) and cfg.radius == 40.0
    assert (out / "run_config.txt").exists()


def test_polar_without_center_fails(dataset, tmp_path, capsys):
    row = read_manifest(dataset)[0]
    assert main(["polar", str(dataset / row["image"]), "--out", str(tmp_path / "p")]) == 2
    assert "--center" in capsys.readouterr().err


def test_eval_reports_missing_prediction(dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "manifest.csv").write_text("name,image,disc_mask,cup_mask,u,v,cdr,label\n")
    assert main(["eval", "--pred", str(pred), "--gt", str(dataset), "--out", str(tmp_path / "e.csv")]) == 2
    assert "manifest.csv:2" in capsys.readouterr().err


def test_eval_raw_masks_flag_recorded(dataset, tmp_path):
    out = tmp_path / "eval.csv"
    assert main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--out", str(out), "--raw-masks"]) == 0
    assert load_config(tmp_path / "run_config.txt").raw_masks is True
    assert float(read_csv(out)[-1]["E_disc"]) == 0.0


def test_resume_keeps_checkpoint_settings(dataset, checkpoint, tmp_path):
    resumed = tmp_path / "resumed"
    assert main(["train", "--data", str(dataset), "--out", str(resumed), "--resume", str(checkpoint),
                 "--steps", "8"]) == 0
    before, after = load_config(checkpoint / "run_config.txt"), load_config(resumed / "run_config.txt")
    assert (after.depth, after.base_channels, after.bins, after.seed) == (2, 2, 32, 7)
    assert after.steps == 8 and before.steps == 6
