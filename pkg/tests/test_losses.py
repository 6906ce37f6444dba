from PanopticRoad.losses import (Assigner, MultiTaskLoss, SegmentationLoss, bce_loss, ciou_loss, dfl_loss,
                                 focal_loss, total_loss, tversky_loss)
from PanopticRoad.errors import NumericalError, ShapeError
from PanopticRoad.model import PredictionBundle
import numpy as np
import pytest
import torch
import math


def scalar_bce(p, y):
    return -(y * math.log(max(p, 1e-12)) + (1 - y) * math.log(max(1 - p, 1e-12)))


def scalar_focal(z, y, alpha=0.25, gamma=2.0):
    p = 1 / (1 + math.exp(-z))
    p_t = p if y == 1 else 1 - p
    return -alpha * (1 - p_t) ** gamma * math.log(p_t)


def scalar_dfl(probs, y):
    i = min(int(math.floor(y)), len(probs) - 2)
    return -((i + 1 - y) * math.log(probs[i]) + (y - i) * math.log(probs[i + 1]))


def scalar_ciou_loss(a, b):
    w1, h1, w2, h2 = a[2] - a[0], a[3] - a[1], b[2] - b[0], b[3] - b[1]
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0)
    inter = iw * ih
    iou = inter / (w1 * h1 + w2 * h2 - inter)
    c2 = (max(a[2], b[2]) - min(a[0], b[0])) ** 2 + (max(a[3], b[3]) - min(a[1], b[1])) ** 2
    rho2 = ((a[0] + a[2] - b[0] - b[2]) ** 2 + (a[1] + a[3] - b[1] - b[3]) ** 2) / 4
    v = 4 / math.pi ** 2 * (math.atan(w2 / h2) - math.atan(w1 / h1)) ** 2
    alpha = v / (v - iou + 1)
    return 1 - iou + rho2 / c2 + alpha * v


def test_bce_values():
    assert float(bce_loss(torch.tensor([0.5]), torch.tensor([1.0]), from_logits=False)) == pytest.approx(
        0.693147, abs=1e-6)
    assert float(bce_loss(torch.tensor([0.9]), torch.tensor([0.0]), from_logits=False)) == pytest.approx(
        2.302585, abs=1e-6)
    assert float(bce_loss(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(math.log(2), abs=1e-6)


def test_bce_matches_scalar_reference():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.001, 0.999, 1000)
    y = rng.integers(0, 2, 1000).astype(float)
    expected = np.mean([scalar_bce(a, b) for a, b in zip(p, y)])
    got = float(bce_loss(torch.tensor(p), torch.tensor(y), from_logits=False))
    assert got == pytest.approx(expected, abs=1e-6)


def test_dfl_interpolates_between_bins():
    probs = torch.zeros(16, dtype=torch.float64)
    probs[2], probs[3] = 0.6, 0.4
    logits = probs.clamp_min(1e-12).log()
    assert float(dfl_loss(logits[None], torch.tensor([2.4], dtype=torch.float64))) == pytest.approx(
        0.67301, abs=1e-5)


@pytest.mark.parametrize("y", [0.0, 5.0, 15.0])
def test_dfl_uniform_distribution(y):
    logits = torch.zeros(1, 16, dtype=torch.float64)
    assert float(dfl_loss(logits, torch.tensor([y], dtype=torch.float64))) == pytest.approx(math.log(16), abs=1e-6)


def test_dfl_matches_scalar_reference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1000, 16))
    y = rng.uniform(0, 15, 1000)
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    expected = np.array([scalar_dfl(p, t) for p, t in zip(probs, y)])
    got = dfl_loss(torch.tensor(logits), torch.tensor(y), reduction="none").numpy()
    assert np.allclose(got, expected, atol=1e-6)


def test_ciou_hand_computed_cases():
    far = ciou_loss(torch.tensor([[-1.0, -1.0, 1.0, 1.0]]), torch.tensor([[9.0, 9.0, 11.0, 11.0]]))
    assert float(far) == pytest.approx(1.69444, abs=1e-4)
    concentric = ciou_loss(torch.tensor([[-1.0, -1.0, 1.0, 1.0]]), torch.tensor([[-2.0, -0.5, 2.0, 0.5]]))
    assert float(concentric) == pytest.approx(0.68450, abs=1e-4)


def test_ciou_identical_boxes_cost_nothing():
    box = torch.tensor([[3.0, 4.0, 10.0, 20.0]], dtype=torch.float64)
    assert float(ciou_loss(box, box)) == pytest.approx(0.0, abs=1e-6)


def test_ciou_matches_scalar_reference():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 50, (1000, 2, 2))
    wh = rng.uniform(1, 30, (1000, 2, 2))
    boxes = np.concatenate((xy, xy + wh), -1)
    expected = np.array([scalar_ciou_loss(a, b) for a, b in boxes])
    t = torch.tensor(boxes)
    got = ciou_loss(t[:, 0], t[:, 1], reduction="none").numpy()
    assert np.allclose(got, expected, atol=1e-6)


def test_ciou_has_gradient_through_aspect_term():
    pred = torch.tensor([[-1.0, -1.0, 1.0, 1.0]], requires_grad=True)
    ciou_loss(pred, torch.tensor([[-2.0, -0.5, 2.0, 0.5]])).backward()
    assert bool(torch.isfinite(pred.grad).all())
    assert float(pred.grad.abs().sum()) > 0


def test_focal_value_at_half_probability():
    assert float(focal_loss(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(0.043322, abs=1e-6)


def test_focal_matches_scalar_reference():
    rng = np.random.default_rng(3)
    z = rng.normal(scale=3, size=1000)
    y = rng.integers(0, 2, 1000)
    expected = np.mean([scalar_focal(a, b) for a, b in zip(z, y)])
    got = float(focal_loss(torch.tensor(z), torch.tensor(y, dtype=torch.float64)))
    assert got == pytest.approx(expected, abs=1e-6)


def test_tversky_counts():
    target = torch.zeros(200)
    target[:100] = 1
    prob = torch.zeros(200)
    prob[:50] = 1
    assert float(tversky_loss(prob, target)) == pytest.approx(0.41176, abs=1e-5)
    assert float(tversky_loss(torch.zeros(10), torch.zeros(10))) == pytest.approx(0.0, abs=1e-6)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    prob = torch.tensor(rng.uniform(0.05, 0.95, 100), requires_grad=True)
    logits = torch.tensor(rng.normal(scale=2, size=100), requires_grad=True)
    labels = torch.tensor(rng.integers(0, 2, 100), dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda p: bce_loss(p, labels, from_logits=False), (prob,))
    assert torch.autograd.gradcheck(lambda z: bce_loss(z, labels), (logits,))
    assert torch.autograd.gradcheck(lambda z: focal_loss(z, labels), (logits,))
    assert torch.autograd.gradcheck(lambda p: tversky_loss(p, labels), (prob,))

    bins = torch.tensor(rng.normal(size=(100, 16)), requires_grad=True)
    y = torch.tensor(rng.uniform(0.1, 14.9, 100))
    assert torch.autograd.gradcheck(lambda d: dfl_loss(d, y), (bins,))

    xy = rng.uniform(0, 20, (100, 2, 2))
    wh = rng.uniform(2, 12, (100, 2, 2))
    boxes = torch.tensor(np.concatenate((xy, xy + wh), -1))
    pred = boxes[:, 0].clone().requires_grad_(True)
    assert torch.autograd.gradcheck(lambda b: ciou_loss(b, boxes[:, 1]), (pred,))


def test_ciou_is_scale_and_translation_invariant():
    rng = np.random.default_rng(5)
    xy = rng.uniform(0, 50, (50, 2, 2))
    wh = rng.uniform(1, 30, (50, 2, 2))
    boxes = torch.tensor(np.concatenate((xy, xy + wh), -1))
    base = ciou_loss(boxes[:, 0], boxes[:, 1], reduction="none")
    for k in (0.5, 3.0, 10.0):
        scaled = ciou_loss(boxes[:, 0] * k, boxes[:, 1] * k, reduction="none")
        assert torch.allclose(scaled, base, atol=1e-6)
    shift = torch.tensor([7.0, -3.0, 7.0, -3.0], dtype=torch.float64)
    assert torch.allclose(ciou_loss(boxes[:, 0] + shift, boxes[:, 1] + shift, reduction="none"), base, atol=1e-6)


def test_tversky_ignores_pixel_order():
    rng = np.random.default_rng(6)
    prob = torch.tensor(rng.random(500))
    target = torch.tensor(rng.integers(0, 2, 500))
    order = torch.from_numpy(rng.permutation(500))
    assert float(tversky_loss(prob[order], target[order])) == pytest.approx(float(tversky_loss(prob, target)),
                                                                            abs=1e-12)


@pytest.mark.parametrize("y", [1.0, 7.0, 14.0])
def test_dfl_is_continuous_at_integer_targets(y):
    logits = torch.tensor(np.random.default_rng(7).normal(size=(1, 16)))
    at = float(dfl_loss(logits, torch.tensor([y], dtype=torch.float64)))
    for delta in (-1e-9, 1e-9):
        near = float(dfl_loss(logits, torch.tensor([y + delta], dtype=torch.float64)))
        assert near == pytest.approx(at, abs=1e-6)


def test_assigner_scores_with_plain_iou():
    anchors = torch.tensor([[4.0, 4.0]])
    pd_boxes = torch.tensor([[[0.0, 0.0, 8.0, 4.0]]])
    gt_boxes = torch.tensor([[[0.0, 0.0, 8.0, 8.0]]])
    _, target_scores, fg_mask, _ = Assigner()(torch.full((1, 1, 1), 0.5), pd_boxes, anchors, torch.zeros(1, 1, 1),
                                              gt_boxes, torch.ones(1, 1, 1))
    assert fg_mask.tolist() == [[True]]
    # IoU is exactly 0.5 here; the complete-IoU penalties would pull it to about 0.466
    assert float(target_scores[0, 0, 0]) == pytest.approx(0.5, abs=1e-5)


def test_total_is_plain_sum():
    assert float(total_loss(torch.tensor(1.5), [torch.tensor(2.0), torch.tensor(0.25)])) == 3.75


def test_assigner_picks_the_only_cell_inside_the_box():
    anchors = torch.tensor([[4.0, 4.0], [12.0, 4.0], [4.0, 12.0], [12.0, 12.0]])
    pd_boxes = torch.cat((anchors - 4, anchors + 4), 1)[None]
    pd_scores = torch.full((1, 4, 1), 0.5)
    gt_labels = torch.zeros(1, 1, 1)
    gt_boxes = torch.tensor([[[0.0, 0.0, 8.0, 8.0]]])
    mask_gt = torch.ones(1, 1, 1)
    target_boxes, target_scores, fg_mask, gt_idx = Assigner()(pd_scores, pd_boxes, anchors, gt_labels, gt_boxes,
                                                              mask_gt)
    assert fg_mask.tolist() == [[True, False, False, False]]
    assert torch.equal(target_boxes[0, 0], gt_boxes[0, 0])
    assert float(target_scores[0, 0, 0]) == pytest.approx(1.0, abs=1e-4)
    assert float(target_scores[0, 1:].abs().sum()) == 0.0


def test_assigner_without_boxes():
    anchors = torch.rand(6, 2)
    _, target_scores, fg_mask, _ = Assigner()(torch.rand(2, 6, 1), torch.rand(2, 6, 4), anchors,
                                              torch.zeros(2, 0, 1), torch.zeros(2, 0, 4), torch.zeros(2, 0, 1))
    assert not fg_mask.any()
    assert float(target_scores.sum()) == 0.0


def targets_for(boxes):
    """Flat detection targets from (image index, cx, cy, w, h) rows."""
    rows = torch.tensor(boxes, dtype=torch.float32).view(-1, 5)
    return {"idx": rows[:, 0], "cls": torch.zeros(len(rows)), "box": rows[:, 1:]}


def square_masks(batch=2, size=64):
    mask = torch.zeros(batch, size, size, dtype=torch.long)
    mask[:, size // 2:, :] = 1
    lane = torch.zeros(batch, size, size, dtype=torch.long)
    lane[:, :, size // 2 - 2:size // 2 + 2] = 1
    return {"drivable": mask, "lane": lane}


def test_multitask_loss_backpropagates_into_every_branch(tiny_model):
    criterion = MultiTaskLoss(tiny_model)
    bundle = tiny_model.train()(torch.rand(2, 3, 64, 64))
    targets = targets_for([[0, 0.3, 0.4, 0.2, 0.2], [1, 0.6, 0.6, 0.3, 0.25]])
    loss, breakdown = criterion(bundle, targets, square_masks())
    assert breakdown.total == pytest.approx(breakdown.det + sum(breakdown.seg.values()), rel=1e-5)
    assert breakdown.dfl > 0 and breakdown.ciou > 0
    loss.backward()
    for part in (tiny_model.backbone, tiny_model.det_neck, tiny_model.det_head, tiny_model.seg_necks,
                 tiny_model.seg_heads):
        assert any(p.grad is not None and float(p.grad.abs().sum()) > 0 for p in part.parameters())
    for _, _, fusion in tiny_model.fusion_modules():
        assert fusion.weight.grad is not None


def test_detection_loss_without_objects(tiny_model):
    criterion = MultiTaskLoss(tiny_model)
    bundle = tiny_model.train()(torch.rand(2, 3, 64, 64))
    loss, breakdown = criterion(bundle, targets_for([]), square_masks())
    assert math.isfinite(float(loss))
    assert breakdown.dfl == 0.0 and breakdown.ciou == 0.0
    assert breakdown.bce > 0


def test_non_finite_loss_is_reported(tiny_model):
    criterion = MultiTaskLoss(tiny_model)
    bundle = tiny_model.train()(torch.rand(2, 3, 64, 64))
    broken = PredictionBundle(det=bundle.det, seg_masks=[torch.full_like(m, float("nan")) for m in bundle.seg_masks],
                              tasks=bundle.tasks)
    with pytest.raises(NumericalError, match="drivable"):
        criterion(broken, targets_for([]), square_masks())


def test_segmentation_loss_shape_check():
    with pytest.raises(ShapeError):
        SegmentationLoss()(torch.zeros(1, 2, 8, 8), torch.zeros(1, 4, 4))
    with pytest.raises(ShapeError):
        SegmentationLoss()(torch.zeros(2, 2, 8, 8), torch.zeros(1, 8, 8))


def test_segmentation_loss_uses_coefficients():
    logits = torch.zeros(1, 2, 4, 4)
    target = torch.ones(1, 4, 4)
    value, fl, tl = SegmentationLoss()(logits, target)
    assert float(value) == pytest.approx(24.0 * float(fl) + 8.0 * float(tl), rel=1e-6)
    assert float(fl) == pytest.approx(0.043322, abs=1e-6)
