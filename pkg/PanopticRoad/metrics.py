"""
Evaluation metrics.

Features:
- Detection: greedy score-ordered matching at IoU >= 0.5, all-point
  interpolated AP over a precision envelope, and recall / precision at the
  best-F1 operating point.
- Segmentation: pixel confusion counts accumulated over the whole dataset
  before any division, giving IoU, two-class mIoU, balanced accuracy and
  plain pixel accuracy.
- Throughput: frames per second of the eval-mode forward at a fixed batch
  size after warmup, and the relative spread of repeated measurements.

Accumulators merge associatively, so per-image statistics may be computed
in any order.
"""

from dataclasses import dataclass, field
from .boxes import box_iou_numpy
from .errors import DataError, ShapeError
from scipy.stats import describe
import numpy as np
import logging
import torch
import time

logger = logging.getLogger("panopticroad")

IOU_THRESHOLD = 0.5
LINE_TASK = "lane"


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold=IOU_THRESHOLD):
    """
    Greedy matching of one image's detections (one class) to its ground truth.

    Detections are visited by descending score; each takes the unconsumed
    ground-truth box it overlaps most, provided the IoU reaches the
    threshold.

    Returns:
        np.ndarray: Boolean TP flag per detection, in input order.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp = np.zeros(len(det_boxes), dtype=bool)
    if not len(det_boxes) or not len(gt_boxes):
        return tp
    iou = box_iou_numpy(det_boxes, gt_boxes)
    consumed = np.zeros(len(gt_boxes), dtype=bool)
    for i in np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable"):
        candidates = np.where(consumed, -1.0, iou[i])
        j = int(candidates.argmax())
        if candidates[j] >= iou_threshold:
            tp[i] = True
            consumed[j] = True
    return tp


@dataclass
class PRCurve:
    """Detections of one class over a dataset: scores, TP flags and the GT count."""
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    n_gt: int = 0

    def sorted(self):
        order = np.argsort(-self.scores, kind="stable")
        return self.scores[order], self.tp[order]

    def points(self):
        """(scores, precision, recall) per detection rank, scores non-increasing."""
        scores, tp = self.sorted()
        tpc = np.cumsum(tp)
        fpc = np.cumsum(~tp)
        recall = tpc / max(self.n_gt, 1)
        precision = tpc / np.maximum(tpc + fpc, 1)
        return scores, precision, recall


def average_precision(curve):
    """
    All-point interpolated AP.

    Returns:
        float | None: AP in [0, 1], or None when the class has neither
            ground truth nor detections (skipped class). A class with
            ground truth but no true positive scores 0.
    """
    if curve.n_gt == 0:
        return None if len(curve.scores) == 0 else 0.0
    if len(curve.scores) == 0:
        return 0.0
    _, precision, recall = curve.points()
    m_rec = np.concatenate(([0.0], recall, [1.0]))
    m_pre = np.concatenate(([1.0], precision, [0.0]))
    m_pre = np.flip(np.maximum.accumulate(np.flip(m_pre)))  # precision envelope
    i = np.where(m_rec[1:] != m_rec[:-1])[0]
    return float(np.sum((m_rec[i + 1] - m_rec[i]) * m_pre[i + 1]))


def best_f1_point(curve):
    """
    Operating point with the highest F1 over all distinct score thresholds.

    Returns:
        tuple[float, float, float]: (recall, precision, score threshold);
            zeros when the curve has no true positive.
    """
    if len(curve.scores) == 0 or not curve.tp.any() or curve.n_gt == 0:
        return 0.0, 0.0, 0.0
    scores, precision, recall = curve.points()
    last_of_tie = np.append(scores[1:] != scores[:-1], True)
    f1 = 2 * precision * recall / np.maximum(precision + recall, 1e-16)
    f1 = np.where(last_of_tie, f1, -1.0)
    k = int(f1.argmax())
    return float(recall[k]), float(precision[k]), float(scores[k])


def recall_at_best_f1(curve):
    return best_f1_point(curve)[0]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_masks(cls, pred, gt):
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"Predicted mask {pred.shape} and label mask {gt.shape} differ in size")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp=tp, fp=fp, fn=fn, tn=int(pred.size) - tp - fp - fn)

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def accumulate_counts(preds, gts):
    """Dataset-global counts over paired mask sequences."""
    counts = ConfusionCounts()
    for pred, gt in zip(preds, gts):
        counts = counts + ConfusionCounts.from_masks(pred, gt)
    return counts


def iou_from_counts(counts, cls=1):
    """IoU of the foreground (cls=1) or background (cls=0) class. An empty union counts as 1."""
    if cls == 1:
        inter, union = counts.tp, counts.tp + counts.fp + counts.fn
    else:
        inter, union = counts.tn, counts.tn + counts.fp + counts.fn
    return inter / union if union else 1.0


def seg_iou(preds, gts, cls=1):
    """Dataset-global IoU of class cls over paired mask sequences."""
    return iou_from_counts(accumulate_counts(preds, gts), cls)


def miou_from_counts(counts):
    return (iou_from_counts(counts, 0) + iou_from_counts(counts, 1)) / 2


def miou_drivable(preds, gts):
    """Mean of background and foreground IoU, dataset-global."""
    return miou_from_counts(accumulate_counts(preds, gts))


def line_accuracy(counts):
    """
    Balanced accuracy (sensitivity + specificity) / 2.

    Raises:
        DataError: When the evaluation set has no positive (or no negative)
            pixel at all.
    """
    if counts.tp + counts.fn == 0:
        raise DataError("Balanced accuracy is undefined: no foreground pixel in the evaluation set")
    if counts.tn + counts.fp == 0:
        raise DataError("Balanced accuracy is undefined: no background pixel in the evaluation set")
    sensitivity = counts.tp / (counts.tp + counts.fn)
    specificity = counts.tn / (counts.tn + counts.fp)
    return (sensitivity + specificity) / 2


def pixel_accuracy(counts):
    return (counts.tp + counts.tn) / counts.total if counts.total else 1.0


class DetectionStats:
    """Per-class PR curves accumulated image by image."""

    def __init__(self, nc=1, iou_threshold=IOU_THRESHOLD):
        self.nc = nc
        self.iou_threshold = iou_threshold
        self.scores = [[] for _ in range(nc)]
        self.tp = [[] for _ in range(nc)]
        self.n_gt = [0] * nc

    def update(self, det, gt_cls, gt_boxes):
        """
        Args:
            det (np.ndarray): N x 6 rows (x1, y1, x2, y2, score, class).
            gt_cls (np.ndarray): M class ids.
            gt_boxes (np.ndarray): M x 4 pixel xyxy boxes.
        """
        det = np.asarray(det, dtype=np.float64).reshape(-1, 6)
        gt_cls = np.asarray(gt_cls).reshape(-1).astype(int)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        for c in range(self.nc):
            d = det[det[:, 5].astype(int) == c]
            g = gt_boxes[gt_cls == c]
            self.n_gt[c] += len(g)
            if len(d):
                self.scores[c].append(d[:, 4])
                self.tp[c].append(match_detections(d[:, :4], d[:, 4], g, self.iou_threshold))

    def merge(self, other):
        for c in range(self.nc):
            self.scores[c].extend(other.scores[c])
            self.tp[c].extend(other.tp[c])
            self.n_gt[c] += other.n_gt[c]
        return self

    def curve(self, c):
        scores = np.concatenate(self.scores[c]) if self.scores[c] else np.zeros(0)
        tp = np.concatenate(self.tp[c]) if self.tp[c] else np.zeros(0, dtype=bool)
        return PRCurve(scores=scores, tp=tp, n_gt=self.n_gt[c])

    def summarize(self):
        """
        Returns:
            dict: "map50", "recall", "precision" (means over evaluated
                classes) and "per_class_ap" (class -> AP or None).
        """
        per_class, recalls, precisions = {}, [], []
        for c in range(self.nc):
            curve = self.curve(c)
            ap = average_precision(curve)
            per_class[c] = ap
            if ap is None:
                logger.debug(f"Class {c} has no ground truth and no detections, skipped")
                continue
            recall, precision, _ = best_f1_point(curve)
            recalls.append(recall)
            precisions.append(precision)
        aps = [v for v in per_class.values() if v is not None]
        return {
            "map50": float(np.mean(aps)) if aps else 0.0,
            "recall": float(np.mean(recalls)) if recalls else 0.0,
            "precision": float(np.mean(precisions)) if precisions else 0.0,
            "per_class_ap": per_class,
        }

    def pr_rows(self):
        """(class, score, precision, recall) per detection rank, for CSV export."""
        rows = []
        for c in range(self.nc):
            scores, precision, recall = self.curve(c).points()
            rows.extend((c, float(s), float(p), float(r)) for s, p, r in zip(scores, precision, recall))
        return rows


class SegmentationStats:
    """Dataset-global confusion counts per segmentation task."""

    def __init__(self, tasks):
        self.tasks = list(tasks)
        self.counts = {task: ConfusionCounts() for task in self.tasks}

    def update(self, task, pred, gt):
        self.counts[task] = self.counts[task] + ConfusionCounts.from_masks(pred, gt)

    def merge(self, other):
        for task in self.tasks:
            self.counts[task] = self.counts[task] + other.counts[task]
        return self

    def summarize(self):
        """
        Returns:
            dict: "<task>_iou", "<task>_miou" and "<task>_pixel_accuracy"
                for every task, plus "<task>_accuracy" (balanced) wherever
                it is defined. An undefined balanced accuracy is left out
                with a warning, except on the lane task.

        Raises:
            DataError: The lane task has no foreground (or no background)
                pixel in the whole evaluation set.
        """
        out = {}
        for task in self.tasks:
            counts = self.counts[task]
            out[f"{task}_iou"] = iou_from_counts(counts, 1)
            out[f"{task}_miou"] = miou_from_counts(counts)
            try:
                out[f"{task}_accuracy"] = line_accuracy(counts)
            except DataError as e:
                if task == LINE_TASK:
                    raise
                logger.warning(f"Skipping {task}_accuracy: {e}")
            out[f"{task}_pixel_accuracy"] = pixel_accuracy(counts)
        return out


@dataclass
class FpsReport:
    fps: float
    batch_size: int
    device: str
    timed_iters: int
    seconds: float

    def __str__(self):
        return (f"{self.fps:.1f} FPS (batch {self.batch_size}, {self.timed_iters} timed iterations, "
                f"{self.seconds:.3f} s, device {self.device})")


def _synchronize(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


@torch.no_grad()
def benchmark_fps(model, batch_size=1, warmup_iters=10, timed_iters=50, input_size=None, device=None):
    """
    Images per second of the eval-mode forward pass.

    FPS = timed_iters * batch_size / wall time of the timed iterations,
    measured after warmup_iters untimed iterations on a fixed random input.

    Raises:
        ValueError: timed_iters < 1 or batch_size < 1.
    """
    if timed_iters < 1:
        raise ValueError(f"timed_iters must be >= 1, got {timed_iters}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    device = torch.device(device) if device is not None else next(model.parameters()).device
    size = input_size or model.config.input_size
    model.eval().to(device)
    generator = torch.Generator().manual_seed(0)
    images = torch.rand((batch_size, 3, size, size), generator=generator).to(device)

    for _ in range(warmup_iters):
        model(images, mode="eval")
    _synchronize(device)
    start = time.perf_counter()
    for _ in range(timed_iters):
        model(images, mode="eval")
    _synchronize(device)
    seconds = time.perf_counter() - start
    fps = timed_iters * batch_size / max(seconds, 1e-12)
    logger.debug(f"Benchmark: {fps:.1f} FPS at batch {batch_size} on {device}")
    return FpsReport(fps=fps, batch_size=batch_size, device=str(device), timed_iters=timed_iters, seconds=seconds)


def fps_spread(reports):
    """
    Relative spread (max - min) / mean of repeated FPS measurements at one
    batch size; 0.0 for fewer than two.
    """
    if len(reports) < 2:
        return 0.0
    summary = describe([r.fps for r in reports])
    low, high = summary.minmax
    return float((high - low) / summary.mean)
