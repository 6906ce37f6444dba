"""
Inference on image files.

Images are squash-resized to the network input, run through the eval-mode
forward and mapped back: boxes are scaled to the original frame and masks
are resized with nearest-neighbour sampling. Prediction uses the predict
thresholds (confidence 0.25, NMS IoU 0.45 by default), which are stricter
than the evaluation thresholds, so the visualizations may slightly differ
from the quantitative results.

Output layout under the chosen directory:

    predictions/predictions.json   per image: id, size, detections and a
                                   column-major RLE mask per task
    predictions/overlays/<id>.png  tinted masks plus labelled boxes
"""

from .postprocess import binarize_mask, encode_rle, non_max_suppression, render_overlay, scale_boxes, to_detections
from dataclasses import dataclass, field
from .dataset import IMAGE_EXTENSIONS
from typing import Dict
from .errors import DataError
import numpy as np
import logging
import torch
import json
import cv2
import os

logger = logging.getLogger("panopticroad")

PREDICTIONS_DIR = "predictions"
PREDICTIONS_JSON = "predictions.json"
OVERLAYS_DIR = "overlays"


@dataclass
class ImagePrediction:
    id: str
    size: tuple
    detections: list = field(default_factory=list)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self, class_names=None):
        return {
            "id": self.id,
            "size": [int(self.size[0]), int(self.size[1])],
            "detections": [d.to_dict(class_names) for d in self.detections],
            "masks": {task: encode_rle(mask) for task, mask in self.masks.items()},
        }


def list_images(source):
    """
    Image files of a path: the file itself, or the sorted image files of a
    directory.

    Raises:
        DataError: The path does not exist or holds no image.
    """
    if os.path.isfile(source):
        return [source]
    if not os.path.isdir(source):
        raise DataError(f"No such image file or directory: {source}")
    paths = sorted(os.path.join(source, f) for f in os.listdir(source) if f.lower().endswith(IMAGE_EXTENSIONS))
    if not paths:
        raise DataError(f"No images ({', '.join(IMAGE_EXTENSIONS)}) in {source}")
    return paths


def preprocess(image, size):
    """BGR uint8 image to a 1 x 3 x size x size RGB float tensor in [0, 1]."""
    resized = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
    chw = np.ascontiguousarray(resized[:, :, ::-1].transpose(2, 0, 1))
    return torch.from_numpy(chw).float().div(255.0).unsqueeze(0)


class Predictor:
    """
    Args:
        model (MultiTaskModel): Trained model.
        conf_threshold (float, default=0.25): Detection confidence floor.
        iou_threshold (float, default=0.45): NMS IoU threshold.
        class_names (list[str], default=None): Names in the dump and overlays.
        device (str | torch.device, default="cpu"): Inference device.
    """

    def __init__(self, model, conf_threshold=0.25, iou_threshold=0.45, class_names=None, device="cpu"):
        self.model = model.to(device).eval()
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.class_names = list(class_names or [])
        self.device = device

    @torch.no_grad()
    def predict_image(self, image, image_id=""):
        """
        Args:
            image (np.ndarray): H x W x 3 uint8 BGR image.

        Returns:
            ImagePrediction: Detections in original pixels and one
                original-size {0, 1} mask per task.
        """
        h, w = image.shape[:2]
        size = self.model.config.input_size
        bundle = self.model(preprocess(image, size).to(self.device), mode="eval")
        det = non_max_suppression(bundle.det, self.conf_threshold, self.iou_threshold)[0]
        det[:, :4] = scale_boxes(det[:, :4], (size, size), (w, h))
        det[:, [0, 2]] = det[:, [0, 2]].clamp(0, w)
        det[:, [1, 3]] = det[:, [1, 3]].clamp(0, h)
        masks = {task: binarize_mask(bundle.seg(task)[0], (w, h)) for task in self.model.tasks}
        return ImagePrediction(id=image_id, size=(w, h), detections=to_detections(det), masks=masks)

    def predict_paths(self, paths, out_dir, save_overlays=True):
        """
        Predicts every readable image and writes the dump and overlays.

        Unreadable images are skipped with a warning, so the number of
        predictions equals the number of inputs minus the skipped ones.

        Returns:
            list[ImagePrediction]
        """
        pred_dir = os.path.join(out_dir, PREDICTIONS_DIR)
        overlay_dir = os.path.join(pred_dir, OVERLAYS_DIR)
        os.makedirs(overlay_dir if save_overlays else pred_dir, exist_ok=True)
        results = []
        for path in paths:
            image = cv2.imread(path, cv2.IMREAD_COLOR)
            if image is None:
                logger.warning(f"Skipping unreadable image {path}")
                continue
            image_id = os.path.splitext(os.path.basename(path))[0]
            prediction = self.predict_image(image, image_id)
            results.append(prediction)
            if save_overlays:
                overlay = render_overlay(image, prediction.detections, prediction.masks, self.model.tasks,
                                         self.class_names)
                cv2.imwrite(os.path.join(overlay_dir, image_id + ".png"), overlay)
            logger.debug(f"{image_id}: {len(prediction.detections)} detections")

        with open(os.path.join(pred_dir, PREDICTIONS_JSON), "w") as f:
            json.dump({
                "thresholds": {"conf": self.conf_threshold, "nms_iou": self.iou_threshold},
                "tasks": list(self.model.tasks),
                "images": [r.to_dict(self.class_names) for r in results],
            }, f)
        logger.info(f"Wrote {len(results)} predictions to {pred_dir}"
                    + (f" ({len(paths) - len(results)} skipped)" if len(paths) != len(results) else ""))
        return results
