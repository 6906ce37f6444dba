"""
Turns raw head outputs into detections and binary masks.

Features:
- Distribution decoding: per box side the expected bin index of the
  softmax over reg_max bins, scaled by the stride and applied around the
  cell-centre anchor point.
- Confidence filtering and class-aware greedy NMS (torchvision), at most
  300 detections per image.
- Mask binarization by channel argmax (background wins ties), resized back
  to the original image with nearest-neighbour sampling.
- Column-major run-length encoding of masks for the prediction dump.
- Overlay rendering: fixed-order semi-transparent task tints, then boxes
  with "class score" labels.
"""

from dataclasses import dataclass
from .boxes import make_anchors
from typing import List
import torchvision
import numpy as np
import torch
import cv2

MAX_DET = 300
MAX_NMS = 30000

# BGR tint per segmentation task, in task order
TASK_PALETTE = ((0, 200, 0), (0, 0, 255), (255, 160, 0), (0, 215, 255))
BOX_COLOR = (255, 64, 255)
OVERLAY_ALPHA = 0.5


@dataclass
class Detection:
    box: List[float]  # pixel xyxy
    score: float
    cls: int

    def to_dict(self, class_names=None):
        record = {"box": [round(float(v), 2) for v in self.box], "score": round(float(self.score), 5),
                  "class": int(self.cls)}
        if class_names is not None and 0 <= self.cls < len(class_names):
            record["name"] = class_names[self.cls]
        return record


def dfl_expectation(pred_dist, reg_max=16):
    """
    Expected bin index per box side.

    Args:
        pred_dist (torch.Tensor): ... x 4*reg_max distribution logits.

    Returns:
        torch.Tensor: ... x 4 distances (left, top, right, bottom) in bins.
    """
    project = torch.arange(reg_max, dtype=pred_dist.dtype, device=pred_dist.device)
    shape = pred_dist.shape[:-1]
    return pred_dist.view(*shape, 4, reg_max).softmax(-1).matmul(project)


def dist_to_bbox(distance, anchor_points):
    lt, rb = distance.chunk(2, -1)
    return torch.cat((anchor_points - lt, anchor_points + rb), -1)


def decode_dfl(pred_dist, anchor_points, stride_tensor, reg_max=16):
    """
    Pixel xyxy boxes from distribution logits.

    Args:
        pred_dist (torch.Tensor): B x A x 4*reg_max logits.
        anchor_points (torch.Tensor): A x 2 cell centres in grid units.
        stride_tensor (torch.Tensor): A x 1 stride of every cell.
        reg_max (int, default=16): Bins per side.

    Returns:
        torch.Tensor: B x A x 4 boxes in input pixels.
    """
    return dist_to_bbox(dfl_expectation(pred_dist, reg_max), anchor_points) * stride_tensor


def decode_predictions(outputs, strides, reg_max=16, nc=1):
    """
    Flattens the per-scale head outputs into one B x (4 + nc) x A tensor
    of pixel xyxy boxes and class probabilities.
    """
    b = outputs[0].shape[0]
    no = 4 * reg_max + nc
    x_cat = torch.cat([x.view(b, no, -1) for x in outputs], 2)
    box, cls = x_cat.split((4 * reg_max, nc), 1)
    anchor_points, stride_tensor = make_anchors(outputs, strides, 0.5)
    boxes = decode_dfl(box.permute(0, 2, 1), anchor_points, stride_tensor, reg_max)
    return torch.cat((boxes.permute(0, 2, 1), cls.sigmoid()), 1)


def nms(boxes, scores, classes, iou_threshold):
    """
    Greedy class-aware suppression of boxes overlapping a higher-scored box
    of the same class by IoU > iou_threshold.

    Returns:
        torch.Tensor: Indices of the kept boxes, scores non-increasing.
    """
    return torchvision.ops.batched_nms(boxes.float(), scores.float(), classes.long(), iou_threshold)


def non_max_suppression(prediction, conf_threshold, iou_threshold, max_det=MAX_DET):
    """
    Confidence filter plus NMS over a decoded batch.

    Args:
        prediction (torch.Tensor): B x (4 + nc) x A eval-mode head output.
        conf_threshold (float): Minimum class probability.
        iou_threshold (float): NMS IoU threshold.
        max_det (int, default=300): Detections kept per image.

    Returns:
        list[torch.Tensor]: Per image an N x 6 tensor
            (x1, y1, x2, y2, score, class), scores non-increasing.
    """
    nc = prediction.shape[1] - 4
    output = [torch.zeros((0, 6), device=prediction.device)] * prediction.shape[0]
    for index, x in enumerate(prediction):
        x = x.transpose(0, 1)  # A x (4 + nc)
        box, cls = x.split((4, nc), 1)
        if nc > 1:
            i, j = (cls > conf_threshold).nonzero(as_tuple=False).T
            x = torch.cat((box[i], cls[i, j, None], j[:, None].float()), 1)
        else:
            conf, j = cls.max(1, keepdim=True)
            x = torch.cat((box, conf, j.float()), 1)[conf.view(-1) > conf_threshold]
        if not x.shape[0]:
            continue
        x = x[x[:, 4].argsort(descending=True)[:MAX_NMS]]
        keep = nms(x[:, :4], x[:, 4], x[:, 5], iou_threshold)[:max_det]
        output[index] = x[keep]
    return output


def to_detections(det):
    """N x 6 tensor rows to Detection records."""
    return [Detection(box=row[:4].tolist(), score=float(row[4]), cls=int(row[5])) for row in det.cpu()]


def scale_boxes(boxes, from_size, to_size):
    """
    Maps xyxy boxes between two squash-resized frames.

    Args:
        boxes (torch.Tensor | np.ndarray): N x 4 boxes in the from_size frame.
        from_size (tuple[int, int]): (width, height) of the source frame.
        to_size (tuple[int, int]): (width, height) of the target frame.
    """
    gx, gy = to_size[0] / from_size[0], to_size[1] / from_size[1]
    out = boxes.clone() if isinstance(boxes, torch.Tensor) else np.array(boxes, dtype=np.float64, copy=True)
    out[..., [0, 2]] *= gx
    out[..., [1, 3]] *= gy
    return out


def binarize_mask(logits, size=None):
    """
    Binary foreground mask from nc + 1 channel logits.

    A pixel is foreground when some foreground channel beats the background
    channel strictly; ties go to background.

    Args:
        logits (torch.Tensor | np.ndarray): C x H x W or B x C x H x W.
        size (tuple[int, int], default=None): (width, height) to resize the
            mask to with nearest-neighbour sampling.

    Returns:
        np.ndarray: uint8 {0, 1} mask, H x W or B x H x W.
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().float().cpu().numpy()
    logits = np.asarray(logits)
    mask = (logits[..., 1:, :, :].max(axis=-3) > logits[..., 0, :, :]).astype(np.uint8)
    if size is None:
        return mask
    if mask.ndim == 2:
        return resize_mask(mask, size)
    return np.stack([resize_mask(m, size) for m in mask])


def resize_mask(mask, size):
    """Nearest-neighbour resize of a H x W mask to (width, height)."""
    if (mask.shape[1], mask.shape[0]) == tuple(size):
        return mask.copy()
    return cv2.resize(mask, tuple(int(s) for s in size), interpolation=cv2.INTER_NEAREST)


def encode_rle(mask):
    """
    Column-major run-length encoding of a binary mask, counts starting with
    a (possibly empty) run of zeros.
    """
    flat = np.asarray(mask, dtype=np.uint8).flatten(order="F")
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def decode_rle(rle):
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=np.uint8)
    position, value = 0, 0
    for count in rle["counts"]:
        flat[position:position + count] = value
        position += count
        value = 1 - value
    return flat.reshape((h, w), order="F")


def render_overlay(image, detections=(), masks=None, tasks=None, class_names=None,
                   palette=TASK_PALETTE, alpha=OVERLAY_ALPHA):
    """
    Draws masks and detections onto a copy of a BGR image.

    Masks are tinted one task after the other in task order, so a pixel in
    two masks carries both tints with the later task on top. Boxes and
    their labels are drawn last.

    Args:
        image (np.ndarray): H x W x 3 uint8 BGR image.
        detections (Iterable[Detection]): Boxes in image pixels.
        masks (dict[str, np.ndarray], default=None): Task -> H x W {0, 1}.
        tasks (list[str], default=None): Tint order; defaults to the mask
            dict order.
        class_names (list[str], default=None): Names for box labels.

    Returns:
        np.ndarray: The rendered image.
    """
    out = image.copy()
    masks = masks or {}
    for k, task in enumerate(tasks if tasks is not None else list(masks)):
        mask = masks.get(task)
        if mask is None:
            continue
        region = mask.astype(bool)
        if not region.any():
            continue
        color = np.array(palette[k % len(palette)], dtype=np.float32)
        out[region] = np.round(out[region].astype(np.float32) * (1 - alpha) + color * alpha).astype(np.uint8)

    for det in detections:
        x1, y1, x2, y2 = (int(round(v)) for v in det.box)
        cv2.rectangle(out, (x1, y1), (x2, y2), BOX_COLOR, 2)
        name = class_names[det.cls] if class_names and 0 <= det.cls < len(class_names) else str(det.cls)
        label = f"{name} {det.score:.2f}"
        (tw, th), baseline = cv2.getTextSize(label, cv2.FONT_HERSHEY_SIMPLEX, 0.5, 1)
        top = max(y1 - th - baseline, 0)
        cv2.rectangle(out, (x1, top), (x1 + tw, top + th + baseline), BOX_COLOR, -1)
        cv2.putText(out, label, (x1, top + th), cv2.FONT_HERSHEY_SIMPLEX, 0.5, (255, 255, 255), 1, cv2.LINE_AA)
    return out
