"""
Training objective of the multi-task network.

Features:
- Task-aligned assigner: every ground-truth box takes the top-k cells
  (k=10) inside it ranked by score^0.5 * IoU^6; a cell claimed by several
  boxes goes to the one it overlaps most (lowest box index on ties).
- Detection loss: BCE over all cells plus DFL and CIoU over assigned
  cells, each normalized by the total assigned target score and weighted
  by the configured coefficients.
- Segmentation loss: focal loss over both logit channels plus Tversky loss
  on the foreground channel. One instance serves every segmentation task.
- Total loss: plain sum of the detection loss and every segmentation loss,
  with a per-component breakdown for logging and divergence checks.

Every loss is a pure function of predictions, targets and coefficients.
"""

from .boxes import bbox_ciou, bbox_iou, cxcywh_to_xyxy, make_anchors
from .postprocess import dfl_expectation, dist_to_bbox
from .errors import NumericalError, ShapeError
from dataclasses import dataclass, field
from typing import Dict
import torch.nn.functional as F
import torch.nn as nn
import logging
import torch
import math

logger = logging.getLogger("panopticroad")

LOG_EPS = 1e-12
TVERSKY_EPS = 1e-7


def bce_loss(pred, target, from_logits=True):
    """
    Mean binary cross-entropy.

    Args:
        pred (torch.Tensor): Logits, or probabilities when from_logits is
            False (logs are clamped at 1e-12).
        target (torch.Tensor): Targets in [0, 1].
        from_logits (bool, default=True): Interpretation of pred.
    """
    target = target.to(pred.dtype)
    if from_logits:
        return F.binary_cross_entropy_with_logits(pred, target)
    log_p = pred.clamp(min=LOG_EPS).log()
    log_q = (1 - pred).clamp(min=LOG_EPS).log()
    return -(target * log_p + (1 - target) * log_q).mean()


def dfl_loss(pred_dist, target, reduction="mean"):
    """
    Distribution focal loss.

    Cross-entropy on the two bins flanking the continuous target, weighted
    by the distance to the opposite bin. Integer targets reduce to plain
    cross-entropy on their bin.

    Args:
        pred_dist (torch.Tensor): ... x reg_max bin logits.
        target (torch.Tensor): ... continuous targets, clamped to
            [0, reg_max - 1].
        reduction (str, default="mean"): "mean", "sum" or "none".
    """
    reg_max = pred_dist.shape[-1]
    target = target.to(pred_dist.dtype).clamp(0, reg_max - 1)
    tl = target.floor().long().clamp(max=reg_max - 2)  # target left
    tr = tl + 1  # target right
    wl = tr.to(target.dtype) - target  # weight left
    wr = target - tl.to(target.dtype)  # weight right
    logits = pred_dist.reshape(-1, reg_max)
    left_loss = F.cross_entropy(logits, tl.reshape(-1), reduction="none").view(tl.shape)
    right_loss = F.cross_entropy(logits, tr.reshape(-1), reduction="none").view(tl.shape)
    loss = left_loss * wl + right_loss * wr
    return _reduce(loss, reduction)


def ciou_loss(pred_box, gt_box, reduction="mean"):
    """1 - CIoU of matching xyxy boxes."""
    return _reduce(1.0 - bbox_ciou(pred_box, gt_box).squeeze(-1), reduction)


def focal_loss(logits, target, alpha=0.25, gamma=2.0, reduction="mean"):
    """
    Sigmoid focal loss with one constant weighting factor for every element.

    Args:
        logits (torch.Tensor): Raw logits, any shape.
        target (torch.Tensor): {0, 1} targets, same shape.
        alpha (float, default=0.25): Weighting factor.
        gamma (float, default=2.0): Focusing exponent.
    """
    target = target.to(logits.dtype)
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    loss = alpha * (1 - p_t).pow(gamma) * ce
    return _reduce(loss, reduction)


def tversky_loss(prob, target, alpha=0.7, beta=0.3, eps=TVERSKY_EPS):
    """
    Tversky loss from soft counts accumulated over every element.

    1 - (TP + eps) / (TP + alpha * FN + beta * FP + eps), so an empty
    prediction on an empty target costs 0.
    """
    target = target.to(prob.dtype)
    tp = (prob * target).sum()
    fn = ((1 - prob) * target).sum()
    fp = (prob * (1 - target)).sum()
    return 1 - (tp + eps) / (tp + alpha * fn + beta * fp + eps)


def total_loss(det, seg):
    """Unweighted sum of the detection loss and every segmentation loss."""
    total = det
    for value in seg:
        total = total + value
    return total


def _reduce(loss, reduction):
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"Unknown reduction '{reduction}'")


class Assigner(nn.Module):
    """
    Task-aligned one-stage assigner.

    Args:
        top_k (int, default=10): Candidate cells per ground-truth box.
        num_classes (int, default=1): Detection classes.
        alpha (float, default=0.5): Exponent of the class score.
        beta (float, default=6.0): Exponent of the plain box IoU.
    """

    def __init__(self, top_k=10, num_classes=1, alpha=0.5, beta=6.0, eps=1e-9):
        super().__init__()
        self.top_k = top_k
        self.num_classes = num_classes
        self.alpha = alpha
        self.beta = beta
        self.eps = eps

    @torch.no_grad()
    def forward(self, pd_scores, pd_bboxes, anc_points, gt_labels, gt_bboxes, mask_gt):
        """
        Args:
            pd_scores (torch.Tensor): B x A x nc class probabilities.
            pd_bboxes (torch.Tensor): B x A x 4 predicted xyxy boxes (pixels).
            anc_points (torch.Tensor): A x 2 anchor points (pixels).
            gt_labels (torch.Tensor): B x M x 1 class ids.
            gt_bboxes (torch.Tensor): B x M x 4 xyxy boxes (pixels).
            mask_gt (torch.Tensor): B x M x 1, 1 for real (non-padding) boxes.

        Returns:
            tuple: target boxes (B x A x 4), target scores (B x A x nc),
                foreground mask (B x A, bool) and assigned box index (B x A).
        """
        size = pd_scores.size(0)
        max_boxes = gt_bboxes.size(1)
        device = pd_scores.device

        if max_boxes == 0:
            return (torch.zeros_like(pd_bboxes),
                    torch.zeros_like(pd_scores),
                    torch.zeros_like(pd_scores[..., 0], dtype=torch.bool),
                    torch.zeros_like(pd_scores[..., 0], dtype=torch.long))

        # cells whose centre lies inside a box, (b, max_boxes, na)
        na = anc_points.shape[0]
        lt, rb = gt_bboxes.view(-1, 1, 4).chunk(2, 2)
        bbox_deltas = torch.cat((anc_points[None] - lt, rb - anc_points[None]), dim=2)
        mask_in_gts = bbox_deltas.view(size, max_boxes, na, -1).amin(3).gt_(self.eps)

        # alignment metric, (b, max_boxes, na)
        true_mask = (mask_in_gts * mask_gt).bool()
        overlaps = torch.zeros([size, max_boxes, na], dtype=pd_bboxes.dtype, device=device)
        bbox_scores = torch.zeros([size, max_boxes, na], dtype=pd_scores.dtype, device=device)
        index = torch.zeros([2, size, max_boxes], dtype=torch.long, device=device)
        index[0] = torch.arange(end=size, device=device).view(-1, 1).repeat(1, max_boxes)
        index[1] = gt_labels.long().squeeze(-1)
        bbox_scores[true_mask] = pd_scores[index[0], :, index[1]][true_mask]

        pd_boxes = pd_bboxes.unsqueeze(1).repeat(1, max_boxes, 1, 1)[true_mask]
        gt_boxes = gt_bboxes.unsqueeze(2).repeat(1, 1, na, 1)[true_mask]
        overlaps[true_mask] = bbox_iou(gt_boxes, pd_boxes).squeeze(-1)

        align_metric = bbox_scores.pow(self.alpha) * overlaps.pow(self.beta)

        # top-k candidates per box, (b, max_boxes, na)
        top_k = min(self.top_k, na)
        top_k_mask = mask_gt.repeat([1, 1, top_k]).bool()
        _, top_k_indices = torch.topk(align_metric, top_k, dim=-1, largest=True)
        top_k_indices.masked_fill_(~top_k_mask, 0)
        count = torch.zeros(align_metric.shape, dtype=torch.int8, device=device)
        ones = torch.ones_like(top_k_indices[:, :, :1], dtype=torch.int8)
        for k in range(top_k):
            count.scatter_add_(-1, top_k_indices[:, :, k:k + 1], ones)
        count.masked_fill_(count > 1, 0)
        mask_pos = count.to(align_metric.dtype) * mask_in_gts * mask_gt

        # one box per cell: highest overlap, first box on ties
        fg_mask = mask_pos.sum(-2)
        if fg_mask.max() > 1:
            mask_multi_gts = (fg_mask.unsqueeze(1) > 1).repeat([1, max_boxes, 1])
            max_overlaps_idx = overlaps.argmax(1)
            is_max_overlaps = torch.zeros(mask_pos.shape, dtype=mask_pos.dtype, device=device)
            is_max_overlaps.scatter_(1, max_overlaps_idx.unsqueeze(1), 1)
            mask_pos = torch.where(mask_multi_gts, is_max_overlaps, mask_pos).float()
            fg_mask = mask_pos.sum(-2)
        target_gt_idx = mask_pos.argmax(-2)  # (b, na)

        batch_index = torch.arange(end=size, dtype=torch.int64, device=device)[..., None]
        target_idx = target_gt_idx + batch_index * max_boxes
        target_labels = gt_labels.long().flatten()[target_idx]
        target_bboxes = gt_bboxes.view(-1, 4)[target_idx]

        target_scores = torch.zeros((size, na, self.num_classes), dtype=pd_scores.dtype, device=device)
        target_scores.scatter_(2, target_labels.clamp(0, self.num_classes - 1).unsqueeze(-1), 1)
        target_scores = torch.where(fg_mask[:, :, None] > 0, target_scores, torch.zeros_like(target_scores))

        # scale the one-hot scores by the normalized alignment metric
        align_metric *= mask_pos
        pos_align_metrics = align_metric.amax(dim=-1, keepdim=True)
        pos_overlaps = (overlaps * mask_pos).amax(dim=-1, keepdim=True)
        norm_align_metric = align_metric * pos_overlaps / (pos_align_metrics + self.eps)
        target_scores = target_scores * norm_align_metric.amax(-2).unsqueeze(-1)

        return target_bboxes, target_scores, fg_mask.bool(), target_gt_idx


def build_gt(targets, batch_size, image_size, device):
    """
    Pads the flat target table into per-image tensors.

    Args:
        targets (dict): "idx" (n), "cls" (n) and "box" (n x 4 normalized
            cx, cy, w, h) tensors.
        image_size (tuple[float, float]): (height, width) in pixels.

    Returns:
        tuple[torch.Tensor, torch.Tensor, torch.Tensor]: labels (B x M x 1),
            pixel xyxy boxes (B x M x 4) and the padding mask (B x M x 1).
    """
    idx = targets["idx"].to(device).view(-1)
    cls = targets["cls"].to(device).view(-1).float()
    box = targets["box"].to(device).view(-1, 4).float()
    m = int(torch.bincount(idx.long(), minlength=batch_size).max()) if idx.numel() else 0
    gt = torch.zeros(batch_size, m, 5, device=device)
    for j in range(batch_size):
        matches = idx == j
        n = int(matches.sum())
        if n:
            gt[j, :n, 0] = cls[matches]
            gt[j, :n, 1:] = box[matches]
    h, w = image_size
    scale = torch.tensor([w, h, w, h], device=device, dtype=gt.dtype)
    gt[..., 1:5] = cxcywh_to_xyxy(gt[..., 1:5] * scale)
    gt_labels, gt_bboxes = gt.split((1, 4), 2)
    mask_gt = (gt_bboxes.sum(2, keepdim=True) > 0).float()
    return gt_labels, gt_bboxes, mask_gt


class DetectionLoss:
    """
    Three-term detection loss over the raw per-scale head outputs.

    BCE is summed over all cells and classes; DFL and CIoU are summed over
    assigned cells weighted by their target score. All three are divided by
    the total assigned target score (at least 1).

    Args:
        nc (int): Detection classes.
        strides (Sequence[int]): Stride of each output scale.
        reg_max (int, default=16): Distribution bins.
        coefficients: Object with bce, dfl and ciou weights.
    """

    def __init__(self, nc, strides, reg_max=16, coefficients=None):
        self.nc = nc
        self.strides = list(strides)
        self.reg_max = reg_max
        self.no = nc + 4 * reg_max
        self.lambda_bce = coefficients.bce if coefficients is not None else 0.5
        self.lambda_dfl = coefficients.dfl if coefficients is not None else 1.5
        self.lambda_ciou = coefficients.ciou if coefficients is not None else 7.5
        self.assigner = Assigner(top_k=10, num_classes=nc, alpha=0.5, beta=6.0)

    def __call__(self, outputs, targets):
        """
        Returns:
            tuple[torch.Tensor, dict]: Weighted detection loss and the raw
                components {"bce", "dfl", "ciou"}.
        """
        if len(outputs) != len(self.strides):
            raise ShapeError(f"Detection loss expects {len(self.strides)} raw scale outputs, got {len(outputs)}")
        shape = outputs[0].shape
        device = outputs[0].device
        batch_size = shape[0]

        x_cat = torch.cat([x.view(batch_size, self.no, -1) for x in outputs], 2)
        pred_distri, pred_scores = x_cat.split((self.reg_max * 4, self.nc), 1)
        pred_scores = pred_scores.permute(0, 2, 1).contiguous()
        pred_distri = pred_distri.permute(0, 2, 1).contiguous()

        image_size = (shape[2] * self.strides[0], shape[3] * self.strides[0])
        anchor_points, stride_tensor = make_anchors(outputs, self.strides, 0.5)
        gt_labels, gt_bboxes, mask_gt = build_gt(targets, batch_size, image_size, device)

        pred_bboxes = dist_to_bbox(dfl_expectation(pred_distri, self.reg_max), anchor_points)  # grid units
        target_bboxes, target_scores, fg_mask, _ = self.assigner(
            pred_scores.detach().sigmoid(),
            (pred_bboxes.detach() * stride_tensor).type(gt_bboxes.dtype),
            anchor_points * stride_tensor, gt_labels, gt_bboxes, mask_gt)

        target_scores_sum = max(target_scores.sum(), 1)
        loss_bce = F.binary_cross_entropy_with_logits(
            pred_scores, target_scores.to(pred_scores.dtype), reduction="none").sum() / target_scores_sum

        zero = pred_scores.sum() * 0.0
        loss_ciou, loss_dfl = zero, zero
        if fg_mask.sum():
            target_bboxes = target_bboxes / stride_tensor
            weight = torch.masked_select(target_scores.sum(-1), fg_mask).unsqueeze(-1)
            ciou = bbox_ciou(pred_bboxes[fg_mask], target_bboxes[fg_mask])
            loss_ciou = ((1.0 - ciou) * weight).sum() / target_scores_sum

            a, b = target_bboxes.chunk(2, -1)
            side_targets = torch.cat((anchor_points - a, b - anchor_points), -1)
            dfl = dfl_loss(pred_distri[fg_mask].view(-1, 4, self.reg_max), side_targets[fg_mask], reduction="none")
            loss_dfl = (dfl.mean(-1, keepdim=True) * weight).sum() / target_scores_sum

        components = {"bce": loss_bce, "dfl": loss_dfl, "ciou": loss_ciou}
        loss = self.lambda_bce * loss_bce + self.lambda_dfl * loss_dfl + self.lambda_ciou * loss_ciou
        return loss, components


class SegmentationLoss:
    """
    Focal plus Tversky loss on nc + 1 channel mask logits.

    The focal term runs over both channels against one-hot targets; the
    Tversky term uses the foreground channel only.
    """

    def __init__(self, coefficients=None):
        c = coefficients
        self.lambda_fl = c.fl if c is not None else 24.0
        self.lambda_tl = c.tl if c is not None else 8.0
        self.focal_alpha = c.focal_alpha if c is not None else 0.25
        self.focal_gamma = c.focal_gamma if c is not None else 2.0
        self.tversky_alpha = c.tversky_alpha if c is not None else 0.7
        self.tversky_beta = c.tversky_beta if c is not None else 0.3

    def __call__(self, logits, target):
        """
        Args:
            logits (torch.Tensor): B x (nc + 1) x H x W mask logits.
            target (torch.Tensor): B x H x W {0, 1} mask.

        Returns:
            tuple[torch.Tensor, torch.Tensor, torch.Tensor]: Weighted loss,
                raw focal term and raw Tversky term.
        """
        if target.dim() == 4 and target.shape[1] == 1:
            target = target[:, 0]
        if target.shape != logits.shape[:1] + logits.shape[2:]:
            raise ShapeError(f"Mask target {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
        one_hot = F.one_hot(target.long().clamp(0, logits.shape[1] - 1), logits.shape[1])
        one_hot = one_hot.permute(0, 3, 1, 2).to(logits.dtype)
        fl = focal_loss(logits, one_hot, self.focal_alpha, self.focal_gamma)
        tl = tversky_loss(logits[:, 1].sigmoid(), one_hot[:, 1], self.tversky_alpha, self.tversky_beta)
        return self.lambda_fl * fl + self.lambda_tl * tl, fl, tl


@dataclass
class LossBreakdown:
    bce: float = 0.0
    dfl: float = 0.0
    ciou: float = 0.0
    fl: Dict[str, float] = field(default_factory=dict)
    tl: Dict[str, float] = field(default_factory=dict)
    det: float = 0.0
    seg: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def as_dict(self):
        """Flat {name: value} view, e.g. for a metrics CSV row."""
        row = {"bce": self.bce, "dfl": self.dfl, "ciou": self.ciou, "det": self.det}
        for task in self.seg:
            row[f"{task}_fl"] = self.fl[task]
            row[f"{task}_tl"] = self.tl[task]
            row[f"{task}_seg"] = self.seg[task]
        row["total"] = self.total
        return row

    def is_finite(self):
        return all(math.isfinite(v) for v in self.as_dict().values())

    def __str__(self):
        return ", ".join(f"{k}={v:.6g}" for k, v in self.as_dict().items())


class MultiTaskLoss:
    """
    Detection loss plus one segmentation loss per task, summed unweighted.

    Args:
        model (MultiTaskModel): Supplies classes, strides, bins and tasks.
        coefficients: LossCoefficients-like object (config section).
    """

    def __init__(self, model, coefficients=None):
        config = model.config
        self.tasks = list(config.seg_tasks)
        self.detection = DetectionLoss(config.nc_det, config.strides, config.reg_max, coefficients)
        self.segmentation = SegmentationLoss(coefficients)

    def __call__(self, bundle, targets, masks):
        """
        Args:
            bundle (PredictionBundle): Train-mode forward output.
            targets (dict): Flat detection targets (idx, cls, box).
            masks (dict[str, torch.Tensor]): B x H x W mask per task.

        Returns:
            tuple[torch.Tensor, LossBreakdown]

        Raises:
            NumericalError: If any component is not finite.
        """
        det, det_parts = self.detection(bundle.det, targets)
        seg, breakdown = [], LossBreakdown()
        for task, logits in zip(bundle.tasks, bundle.seg_masks):
            if task not in masks:
                raise ShapeError(f"No mask target for segmentation task '{task}'")
            value, fl, tl = self.segmentation(logits, masks[task].to(logits.device))
            seg.append(value)
            breakdown.fl[task] = float(fl.detach())
            breakdown.tl[task] = float(tl.detach())
            breakdown.seg[task] = float(value.detach())
        total = total_loss(det, seg)

        breakdown.bce = float(det_parts["bce"].detach())
        breakdown.dfl = float(det_parts["dfl"].detach())
        breakdown.ciou = float(det_parts["ciou"].detach())
        breakdown.det = float(det.detach())
        breakdown.total = float(total.detach())
        if not breakdown.is_finite():
            logger.error(f"Non-finite loss: {breakdown}")
            raise NumericalError(f"Loss is not finite: {breakdown}")
        return total, breakdown
