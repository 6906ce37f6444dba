from PanopticRoad.evaluate import evaluate, label_resolution_source, write_report
from PanopticRoad.dataset import DatasetSpec, RoadDataset, Sample, build_dataloader
from PanopticRoad.synthetic import write_sample
from PanopticRoad.config import load_config
from conftest import TINY_SIZE
import numpy as np
import json
import os


def write_wide_scene(root, side=256, lane_column=101):
    """A side x side val scene with a drivable bottom half and a one pixel wide lane."""
    image = np.full((side, side, 3), 90, np.uint8)
    drivable = np.zeros((side, side), np.uint8)
    drivable[side // 2:] = 1
    lane = np.zeros((side, side), np.uint8)
    lane[:, lane_column] = 1
    write_sample(root, "val", Sample(image=image, det=np.zeros((0, 5), np.float32),
                                     masks={"drivable": drivable, "lane": lane}, id="wide_00000"))
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump({"tasks": ["drivable", "lane"], "classes": ["vehicle"], "train": [], "val": ["wide_00000"]}, f)


def test_masks_are_scored_at_label_resolution(tmp_path, tiny_model):
    root = str(tmp_path / "wide")
    write_wide_scene(root)
    dataset = RoadDataset(DatasetSpec(root=root, split="val"), TINY_SIZE)
    # a 1 px line at an odd column vanishes when the label is shrunk to 64 px
    assert dataset[0][2]["lane"].sum() == 0

    report = evaluate(tiny_model, build_dataloader(dataset, batch_size=1))
    lane = report.seg_counts["lane"]
    assert lane.tp + lane.fn == 256
    assert lane.total == 256 * 256
    drivable = report.seg_counts["drivable"]
    assert drivable.tp + drivable.fn == 256 * 128
    assert "lane_accuracy" in report.metrics


def test_augmented_loaders_use_their_own_masks(synthetic_root):
    spec = DatasetSpec(root=synthetic_root)
    plain = build_dataloader(RoadDataset(spec, TINY_SIZE), batch_size=2)
    augmented = build_dataloader(RoadDataset(spec, TINY_SIZE, augment_cfg=load_config().augment), batch_size=2)
    assert label_resolution_source(plain) is plain.dataset
    assert label_resolution_source(augmented) is None
    assert label_resolution_source([]) is None


def test_validation_reports_are_identical(tmp_path, tiny_model, synthetic_root):
    loader = build_dataloader(RoadDataset(DatasetSpec(root=synthetic_root, split="val"), TINY_SIZE), batch_size=2)
    outputs = []
    for run in ("first", "second"):
        write_report(evaluate(tiny_model, loader), str(tmp_path / run))
        with open(tmp_path / run / "metrics.json") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1]
    assert json.loads(outputs[0])["images"] == 2
