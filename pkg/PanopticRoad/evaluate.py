"""
Validation driver.

Runs the eval-mode forward over a data loader, applies the evaluation
thresholds (confidence 0.001, NMS IoU 0.6 by default) and accumulates
detection and segmentation statistics dataset-globally. Predicted masks
are resized back to each image's label resolution with nearest-neighbour
sampling and compared against the masks read from disk. Loaders over
augmented or in-memory datasets fall back to the masks they yield at the
network input size.

The report can be written as:

- metrics.txt   human-readable summary plus the per-class AP table
- metrics.json  the same values, machine-readable
- pr_curve.csv  (class, score, precision, recall) per detection rank
"""

from .metrics import ConfusionCounts, DetectionStats, SegmentationStats
from .postprocess import binarize_mask, non_max_suppression
from dataclasses import dataclass, field
from .boxes import cxcywh_to_xyxy
from typing import Dict, List, Optional
import logging
import torch
import json
import csv
import os

logger = logging.getLogger("panopticroad")

METRICS_TXT = "metrics.txt"
METRICS_JSON = "metrics.json"
PR_CURVE_CSV = "pr_curve.csv"

LABELS = {
    "map50": "mAP50",
    "recall": "recall",
    "precision": "precision",
    "fps": "FPS",
}


@dataclass
class EvalReport:
    metrics: Dict[str, float]
    per_class_ap: Dict[int, Optional[float]]
    pr_rows: List[tuple] = field(default_factory=list)
    n_images: int = 0
    class_names: List[str] = field(default_factory=list)
    seg_counts: Dict[str, ConfusionCounts] = field(default_factory=dict)

    def class_name(self, c):
        return self.class_names[c] if c < len(self.class_names) else str(c)

    def lines(self):
        out = [f"images: {self.n_images}"]
        for key, value in self.metrics.items():
            out.append(f"{LABELS.get(key, key)}: {value:.5f}")
        out.append("")
        out.append("class                AP50")
        for c, ap in self.per_class_ap.items():
            out.append(f"{self.class_name(c):<20} {'skipped' if ap is None else f'{ap:.5f}'}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def gt_boxes_pixels(targets, image_index, size):
    """Pixel xyxy boxes and classes of one image from the flat target table."""
    select = targets["idx"] == image_index
    boxes = targets["box"][select].double().cpu().numpy() * size
    return targets["cls"][select].long().cpu().numpy(), cxcywh_to_xyxy(boxes).reshape(-1, 4)


def label_resolution_source(loader):
    """The dataset serving original-size masks, or None when the loader's masks must be used."""
    dataset = getattr(loader, "dataset", None)
    if not hasattr(dataset, "label_masks") or getattr(dataset, "augmenting", False):
        return None
    return dataset


@torch.no_grad()
def evaluate(model, loader, conf_threshold=0.001, iou_threshold=0.6, device="cpu", class_names=None):
    """
    Full metrics suite over a data loader.

    Args:
        model (MultiTaskModel): Model to evaluate; run in eval mode.
        loader (DataLoader): Yields (images, targets, masks, ids) batches.
        conf_threshold (float, default=0.001): Detection confidence floor.
        iou_threshold (float, default=0.6): NMS IoU threshold.
        device (str | torch.device, default="cpu"): Device of the forward.
        class_names (list[str], default=None): Names for the report.

    Returns:
        EvalReport

    Raises:
        DataError: The lane evaluation set has no foreground pixel, which
            leaves its balanced accuracy undefined.
    """
    was_training = model.training
    model.eval()
    config = model.config
    size = config.input_size
    det_stats = DetectionStats(config.nc_det)
    seg_stats = SegmentationStats(model.tasks)
    source = label_resolution_source(loader)
    n_images = 0

    try:
        for images, targets, masks, ids in loader:
            bundle = model(images.to(device), mode="eval")
            detections = non_max_suppression(bundle.det, conf_threshold, iou_threshold)
            for i, det in enumerate(detections):
                gt_cls, gt_boxes = gt_boxes_pixels(targets, i, size)
                det_stats.update(det.double().cpu().numpy(), gt_cls, gt_boxes)
            for i, sample_id in enumerate(ids):
                originals = source.label_masks(sample_id) if source is not None else None
                for task in model.tasks:
                    if originals is None:
                        gt = masks[task][i].cpu().numpy()
                    else:
                        gt = originals[task]
                    pred = binarize_mask(bundle.seg(task)[i], (gt.shape[1], gt.shape[0]))
                    seg_stats.update(task, pred, gt)
            n_images += images.shape[0]
    finally:
        model.train(was_training)

    det_summary = det_stats.summarize()
    metrics = {
        "recall": det_summary["recall"],
        "precision": det_summary["precision"],
        "map50": det_summary["map50"],
    }
    metrics.update(seg_stats.summarize())
    report = EvalReport(metrics=metrics, per_class_ap=det_summary["per_class_ap"], pr_rows=det_stats.pr_rows(),
                        n_images=n_images, class_names=list(class_names or []), seg_counts=dict(seg_stats.counts))
    logger.debug(f"Evaluated {n_images} images: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return report


def write_report(report, out_dir):
    """
    Writes metrics.txt, metrics.json and pr_curve.csv into out_dir.

    Returns:
        dict[str, str]: Kind -> written path.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "txt": os.path.join(out_dir, METRICS_TXT),
        "json": os.path.join(out_dir, METRICS_JSON),
        "csv": os.path.join(out_dir, PR_CURVE_CSV),
    }
    with open(paths["txt"], "w") as f:
        f.write(str(report) + "\n")
    with open(paths["json"], "w") as f:
        json.dump({
            "images": report.n_images,
            "metrics": report.metrics,
            "per_class_ap": {report.class_name(c): ap for c, ap in report.per_class_ap.items()},
        }, f, indent=2, sort_keys=True)
    with open(paths["csv"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "score", "precision", "recall"])
        for c, score, precision, recall in report.pr_rows:
            writer.writerow([report.class_name(c), f"{score:.6f}", f"{precision:.6f}", f"{recall:.6f}"])
    logger.info(f"Wrote metrics report to {out_dir}")
    return paths
