from PanopticRoad.config import config_to_dict, load_config
from PanopticRoad_cli.panroad import main
from PanopticRoad.model import save_checkpoint
from conftest import TINY_SIZE
import pytest
import json
import os

TINY_TRAIN = [f"data.synthetic_size={TINY_SIZE}", "data.synthetic_n=4", "data.synthetic_val_n=2",
              "augment.close_mosaic=1"]


def test_params_of_nano_model(capsys):
    assert main(["params"]) == 0
    out = capsys.readouterr().out
    assert "4,429,443" in out
    assert "backbone" in out and "seg_neck:lane" in out


def test_params_without_gates(capsys):
    assert main(["params", "--no-acm"]) == 0
    assert "4,429,435" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["params", "--scale", "x"],
    ["train", "--epochs", "many"],
    ["train", "--no-log-file", "optim.foo=1"],
    ["train", "--no-log-file", "model.input_size=100"],
])
def test_usage_and_config_errors_exit_with_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_missing_checkpoint_is_a_data_error(tmp_path, capsys):
    assert main(["gates", str(tmp_path / "missing.pt")]) == 2
    assert "missing.pt" in capsys.readouterr().err


def test_predict_on_empty_directory(tmp_path, tiny_model, capsys):
    checkpoint = str(tmp_path / "tiny.pt")
    save_checkpoint(checkpoint, tiny_model, config_to_dict(load_config(overrides=[f"model.input_size={TINY_SIZE}"])))
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["predict", checkpoint, str(empty), "--out", str(tmp_path / "out"), "--no-log-file"]) == 2
    assert "No images" in capsys.readouterr().err


def test_synth_writes_dataset(tmp_path):
    root = tmp_path / "ds"
    assert main(["synth", str(root), "--train", "2", "--val", "1", "--size", str(TINY_SIZE)]) == 0
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["train"] == ["train_00000", "train_00001"]
    assert manifest["val"] == ["val_00000"]
    assert os.path.isfile(root / "masks" / "lane" / "val" / "val_00000.png")


def test_bench_fresh_model(capsys):
    assert main(["bench", "--batch-sizes", "1", "2", "--warmup", "1", "--iters", "1", "--no-log-file",
                 f"model.input_size={TINY_SIZE}"]) == 0
    out = capsys.readouterr().out
    assert out.count("FPS") == 2


def test_bench_repeats_report_their_spread(capsys):
    assert main(["bench", "--batch-sizes", "1", "--warmup", "1", "--iters", "1", "--repeats", "3", "--no-log-file",
                 f"model.input_size={TINY_SIZE}"]) == 0
    out = capsys.readouterr().out
    assert out.count("FPS") == 3
    assert "spread" in out and "over 3 runs" in out


def test_train_gates_val_predict(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", "synthetic", "--epochs", "2", "--batch", "2", "--input-size", str(TINY_SIZE),
                 "--out", str(run), "--no-spinner"] + TINY_TRAIN) == 0
    assert "Finished after epoch 2" in capsys.readouterr().out
    assert os.path.isfile(run / "panopticroad.log")
    best = str(run / "weights" / "best.pt")
    assert os.path.isfile(best)

    assert main(["gates", best]) == 0
    out = capsys.readouterr().out
    assert out.count("stride") == 8
    assert "drivable" in out and "lane" in out

    report_dir = tmp_path / "val"
    assert main(["val", best, "--data", str(run / "synthetic"), "--out", str(report_dir), "--no-log-file"]) == 0
    with open(report_dir / "metrics.json") as f:
        metrics = json.load(f)["metrics"]
    assert {"map50", "drivable_miou", "lane_iou", "lane_accuracy"} <= set(metrics)
    assert "images" in capsys.readouterr().out

    pred_dir = tmp_path / "pred"
    assert main(["predict", best, str(run / "synthetic" / "images" / "val"), "--out", str(pred_dir),
                 "--no-log-file"]) == 0
    with open(pred_dir / "predictions" / "predictions.json") as f:
        dump = json.load(f)
    assert [image["id"] for image in dump["images"]] == ["val_00000", "val_00001"]
    assert dump["thresholds"] == {"conf": 0.25, "nms_iou": 0.45}
    assert dump["tasks"] == ["drivable", "lane"]
    assert os.path.isfile(pred_dir / "predictions" / "overlays" / "val_00000.png")


def test_resume_continues_the_run(tmp_path, capsys):
    run = str(tmp_path / "run")
    common = ["--data", "synthetic", "--input-size", str(TINY_SIZE), "--batch", "2", "--out", run, "--no-spinner",
              "--no-log-file"]
    assert main(["train", "--epochs", "1"] + common + TINY_TRAIN) == 0
    assert main(["train", "--resume", "--epochs", "2"] + common) == 0
    assert "Finished after epoch 2" in capsys.readouterr().out
