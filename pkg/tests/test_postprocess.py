from PanopticRoad.postprocess import (Detection, binarize_mask, decode_dfl, decode_rle, dfl_expectation, encode_rle,
                                      non_max_suppression, render_overlay, resize_mask, scale_boxes, to_detections)
from PanopticRoad.boxes import box_iou_numpy, cxcywh_to_xyxy, make_anchors, xyxy_to_cxcywh
import numpy as np
import pytest
import torch
import cv2


def brute_force_nms(boxes, scores, classes, iou_threshold):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    iou = box_iou_numpy(boxes, boxes)
    keep = []
    for i in order:
        if all(classes[i] != classes[k] or iou[i, k] <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(2, size / 3, (n, 2))
    return np.concatenate((xy, xy + wh), 1)


def test_nms_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = 100
        boxes = random_boxes(rng, n)
        scores = rng.uniform(0.3, 1.0, n)
        classes = rng.integers(0, 2, n)
        prediction = torch.tensor(np.concatenate((boxes, np.zeros((n, 2))), 1).T[None], dtype=torch.float64)
        prediction[0, 4 + torch.tensor(classes), torch.arange(n)] = torch.tensor(scores)
        det = non_max_suppression(prediction.float(), 0.25, 0.5)[0]
        expected = brute_force_nms(boxes.astype(np.float32), scores.astype(np.float32), classes, 0.5)
        assert det.shape[0] == len(expected)
        assert np.allclose(det[:, 4].numpy(), scores[expected].astype(np.float32))
        assert np.array_equal(det[:, 5].numpy().astype(int), classes[expected])


def test_nms_confidence_floor_and_cap():
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0], [80.0, 80.0, 90.0, 90.0]])
    prediction = torch.cat((boxes, torch.tensor([[0.9], [0.2], [0.5]])), 1).T[None]
    det = non_max_suppression(prediction, 0.25, 0.45)[0]
    assert det[:, 4].tolist() == pytest.approx([0.9, 0.5])
    assert non_max_suppression(prediction, 0.25, 0.45, max_det=1)[0].shape == (1, 6)
    assert non_max_suppression(prediction, 0.95, 0.45)[0].shape == (0, 6)


def test_nms_keeps_a_subset_without_same_class_overlaps():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = 60
        boxes = random_boxes(rng, n)
        classes = rng.integers(0, 3, n)
        scores = rng.uniform(0.3, 1.0, n)
        prediction = torch.zeros(1, 7, n)
        prediction[0, :4] = torch.tensor(boxes.T, dtype=torch.float32)
        prediction[0, 4 + torch.tensor(classes), torch.arange(n)] = torch.tensor(scores, dtype=torch.float32)
        det = non_max_suppression(prediction, 0.25, 0.45)[0].numpy()
        inputs = np.concatenate((boxes, scores[:, None], classes[:, None]), 1).astype(np.float32)
        for row in det:
            assert np.isclose(inputs, row).all(1).any()
        iou = box_iou_numpy(det[:, :4], det[:, :4])
        same = det[:, 5][:, None] == det[:, 5][None]
        np.fill_diagonal(same, False)
        assert not (iou[same] > 0.45).any()


def test_decoded_boxes_contain_their_anchor():
    feats = [torch.zeros(2, 1, 8, 8), torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 2, 2)]
    points, strides = make_anchors(feats, (8, 16, 32))
    logits = torch.randn(2, points.shape[0], 64, generator=torch.Generator().manual_seed(0)) * 20
    boxes = decode_dfl(logits, points, strides)
    centres = (points * strides)[None]
    assert bool((boxes[..., :2] <= centres + 1e-4).all())
    assert bool((boxes[..., 2:] >= centres - 1e-4).all())


def test_binarize_ignores_a_constant_logit_shift():
    logits = np.random.default_rng(2).normal(size=(2, 3, 16, 16))
    for shift in (-5.0, 3.0, 100.0):
        assert np.array_equal(binarize_mask(logits + shift), binarize_mask(logits))


def test_dfl_expectation_of_peaked_distribution():
    logits = torch.full((1, 64), -30.0)
    for side, bin_index in enumerate((0, 3, 7, 15)):
        logits[0, side * 16 + bin_index] = 30.0
    assert dfl_expectation(logits).tolist()[0] == pytest.approx([0.0, 3.0, 7.0, 15.0], abs=1e-4)


def test_anchor_grid():
    feats = [torch.zeros(1, 1, 80, 80), torch.zeros(1, 1, 40, 40), torch.zeros(1, 1, 20, 20)]
    points, strides = make_anchors(feats, (8, 16, 32))
    assert points.shape == (8400, 2)
    assert points[0].tolist() == [0.5, 0.5]
    assert points[1].tolist() == [1.5, 0.5]
    assert strides[:6400].unique().tolist() == [8.0]
    assert strides[-1].item() == 32.0


def test_box_format_conversion():
    box = np.array([[320.0, 320.0, 128.0, 64.0]])
    xyxy = cxcywh_to_xyxy(box)
    assert xyxy.tolist() == [[256.0, 288.0, 384.0, 352.0]]
    assert xyxy_to_cxcywh(xyxy).tolist() == box.tolist()


def test_scale_boxes_between_frames():
    boxes = torch.tensor([[256.0, 288.0, 384.0, 352.0]])
    scaled = scale_boxes(boxes, (640, 640), (1280, 720))
    assert scaled.tolist() == [[512.0, 324.0, 768.0, 396.0]]


def test_binarize_ties_go_to_background():
    logits = np.zeros((2, 2, 3), dtype=np.float32)
    logits[1, 0, 0] = 1.0
    logits[0, 1, 1] = 1.0
    assert binarize_mask(logits).tolist() == [[1, 0, 0], [0, 0, 0]]


def test_binarize_resizes_to_original_frame():
    logits = torch.zeros(2, 2, 64, 64)
    logits[:, 1, 32:] = 1.0
    masks = binarize_mask(logits, (128, 72))
    assert masks.shape == (2, 72, 128)
    assert masks[:, 36:].all() and not masks[:, :36].any()


def test_mask_resize_round_trip_keeps_smooth_masks():
    mask = np.zeros((640, 640), dtype=np.uint8)
    cv2.circle(mask, (320, 360), 200, 1, -1)
    back = resize_mask(resize_mask(mask, (1280, 720)), (640, 640))
    assert np.count_nonzero(back != mask) < 0.01 * mask.size


def test_rle_column_major_with_leading_zero_run():
    mask = np.array([[1, 0], [1, 1]], dtype=np.uint8)
    rle = encode_rle(mask)
    assert rle == {"size": [2, 2], "counts": [0, 2, 1, 1]}
    assert np.array_equal(decode_rle(rle), mask)
    assert encode_rle(np.zeros((3, 4), dtype=np.uint8))["counts"] == [12]


def test_detection_records():
    det = torch.tensor([[1.234, 2.0, 30.0, 40.0, 0.876543, 0.0]])
    records = to_detections(det)
    assert len(records) == 1
    assert records[0].box == pytest.approx([1.234, 2.0, 30.0, 40.0])
    assert records[0].score == pytest.approx(0.876543)
    assert records[0].cls == 0
    assert records[0].to_dict(["vehicle"]) == {"box": [1.23, 2.0, 30.0, 40.0], "score": 0.87654, "class": 0,
                                               "name": "vehicle"}


def test_overlay_tints_masks_in_task_order():
    image = np.full((20, 20, 3), 100, dtype=np.uint8)
    drivable = np.zeros((20, 20), dtype=np.uint8)
    drivable[10:] = 1
    lane = np.zeros((20, 20), dtype=np.uint8)
    lane[:, 5] = 1
    out = render_overlay(image, masks={"drivable": drivable, "lane": lane}, tasks=["drivable", "lane"])
    assert (image == 100).all()
    assert out[0, 0].tolist() == [100, 100, 100]
    assert out[15, 15].tolist() == [50, 150, 50]
    assert out[0, 5].tolist() == [50, 50, 178]
    assert out[15, 5].tolist() == [25, 75, 152]


def test_overlay_draws_boxes():
    image = np.zeros((64, 64, 3), dtype=np.uint8)
    out = render_overlay(image, [Detection(box=[10.0, 20.0, 40.0, 50.0], score=0.9, cls=0)], class_names=["vehicle"])
    assert out[50, 25].any()
    assert not out[35, 25].any()
