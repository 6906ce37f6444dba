"""
Geometric and photometric augmentation of training samples.

Every geometric operation moves the image, every mask and every box with
one transform, so labels stay consistent with pixels:

- resize_sample: squash resize to the network input (no letterbox).
- mosaic: four samples at half size around a random centre.
- random_geometric: scale about the image centre, translation and
  horizontal flip as one affine.
- augment_hsv: random hue / saturation / value gains through lookup
  tables; labels are untouched.

Boxes inside a Sample are normalized (cls, cx, cy, w, h) rows. All
randomness comes from the numpy Generator passed in.
"""

from dataclasses import replace
from .boxes import cxcywh_to_xyxy, xyxy_to_cxcywh
import numpy as np
import cv2

PAD_VALUE = 114
MIN_BOX_SIDE = 2.0  # pixels


def sample_size(sample):
    """(width, height) of a sample's image."""
    return sample.image.shape[1], sample.image.shape[0]


def boxes_to_pixels(det, size):
    """Normalized (cls, cx, cy, w, h) rows to pixel xyxy (n x 4)."""
    w, h = size
    if not len(det):
        return np.zeros((0, 4), dtype=np.float64)
    return cxcywh_to_xyxy(det[:, 1:5].astype(np.float64) * np.array([w, h, w, h], dtype=np.float64))


def pixels_to_det(cls, boxes, size, min_side=MIN_BOX_SIDE):
    """
    Clips pixel xyxy boxes to the image, drops those thinner than min_side
    and returns normalized (cls, cx, cy, w, h) rows.
    """
    w, h = size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= min_side) & ((boxes[:, 3] - boxes[:, 1]) >= min_side)
    boxes = xyxy_to_cxcywh(boxes[keep]) / np.array([w, h, w, h], dtype=np.float64)
    return np.concatenate((np.asarray(cls, dtype=np.float64).reshape(-1, 1)[keep], boxes), 1).astype(np.float32)


def resize_sample(sample, size):
    """
    Direct resize to size x size (or a (width, height) pair): image
    bilinear, masks nearest. Normalized boxes are unchanged by a squash
    resize, so only the pixels move.
    """
    dsize = (size, size) if isinstance(size, int) else tuple(size)
    if sample_size(sample) == dsize:
        return replace(sample, image=sample.image.copy(), det=sample.det.copy(),
                       masks={k: v.copy() for k, v in sample.masks.items()})
    image = cv2.resize(sample.image, dsize, interpolation=cv2.INTER_LINEAR)
    masks = {k: cv2.resize(v, dsize, interpolation=cv2.INTER_NEAREST) for k, v in sample.masks.items()}
    return replace(sample, image=image, det=sample.det.copy(), masks=masks)


def augment_hsv(image, rng, hgain=0.015, sgain=0.7, vgain=0.4):
    """
    Random HSV gains applied through per-channel lookup tables.

    Returns a new BGR image; zero gains return an unchanged copy.
    """
    if not (hgain or sgain or vgain):
        return image.copy()
    r = rng.uniform(-1, 1, 3) * [hgain, sgain, vgain] + 1
    h_, s_, v_ = cv2.split(cv2.cvtColor(image, cv2.COLOR_BGR2HSV))
    x = np.arange(0, 256, dtype=r.dtype)
    lut_h = ((x * r[0]) % 180).astype("uint8")
    lut_s = np.clip(x * r[1], 0, 255).astype("uint8")
    lut_v = np.clip(x * r[2], 0, 255).astype("uint8")
    hsv = cv2.merge((cv2.LUT(h_, lut_h), cv2.LUT(s_, lut_s), cv2.LUT(v_, lut_v)))
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2BGR)


def affine_matrix(size, scale=1.0, tx=0.0, ty=0.0, flip=False):
    """
    3 x 3 affine in continuous pixel coordinates: optional horizontal flip
    and scaling about the image centre, then a translation of (tx, ty)
    pixels.
    """
    w, h = size
    to_centre = np.eye(3)
    to_centre[0, 2], to_centre[1, 2] = -w / 2, -h / 2
    zoom = np.diag([-scale if flip else scale, scale, 1.0])
    back = np.eye(3)
    back[0, 2], back[1, 2] = w / 2 + tx, h / 2 + ty
    return back @ zoom @ to_centre


def index_matrix(matrix):
    """2 x 3 form of matrix acting on integer pixel indices instead of continuous coordinates."""
    # warpAffine addresses pixel centres by integer index, boxes use pixel edges
    a, b = matrix[:2, :2], matrix[:2, 2]
    return np.concatenate((a, (b + a @ [0.5, 0.5] - 0.5)[:, None]), 1)


def apply_affine(sample, matrix):
    """
    Applies one affine (continuous pixel coordinates) to image, masks and
    boxes. Boxes are the bounding boxes of their transformed corners,
    clipped, with degenerate ones dropped. The identity skips the warp.
    """
    if np.allclose(matrix, np.eye(3)):
        return replace(sample, image=sample.image.copy(), det=sample.det.copy(),
                       masks={k: v.copy() for k, v in sample.masks.items()})
    size = sample_size(sample)
    m = index_matrix(matrix)
    image = cv2.warpAffine(sample.image, m, dsize=size, flags=cv2.INTER_LINEAR,
                           borderValue=(PAD_VALUE, PAD_VALUE, PAD_VALUE))
    masks = {k: cv2.warpAffine(v, m, dsize=size, flags=cv2.INTER_NEAREST, borderValue=0)
             for k, v in sample.masks.items()}

    det = sample.det
    n = len(det)
    if n:
        boxes = boxes_to_pixels(det, size)
        xy = np.ones((n * 4, 3))
        xy[:, :2] = boxes[:, [0, 1, 2, 3, 0, 3, 2, 1]].reshape(n * 4, 2)
        xy = (xy @ matrix.T)[:, :2].reshape(n, 8)
        x = xy[:, [0, 2, 4, 6]]
        y = xy[:, [1, 3, 5, 7]]
        boxes = np.stack((x.min(1), y.min(1), x.max(1), y.max(1)), 1)
        det = pixels_to_det(det[:, 0], boxes, size)
    else:
        det = det.copy()
    return replace(sample, image=image, det=det, masks=masks)


def random_geometric(sample, rng, translate=0.1, scale=0.5, flip=0.5, return_matrix=False):
    """
    Random scale in [1 - scale, 1 + scale], translation of up to
    +-translate of the image size and a horizontal flip with probability
    flip, applied as a single affine.
    """
    w, h = sample_size(sample)
    s = rng.uniform(1 - scale, 1 + scale)
    tx = rng.uniform(-translate, translate) * w
    ty = rng.uniform(-translate, translate) * h
    flipped = bool(rng.random() < flip)
    matrix = affine_matrix((w, h), s, tx, ty, flipped)
    out = apply_affine(sample, matrix)
    return (out, matrix) if return_matrix else out


def mosaic_centre(rng, size):
    """Random mosaic centre on the 2x canvas, within a quarter size of the middle."""
    low, high = int(round(0.75 * size)), int(round(1.25 * size))
    return int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1))


def mosaic(samples, rng, size, centre=None):
    """
    Four-sample mosaic.

    Each sample is resized to size/2 and placed in its quadrant touching
    the centre of a 2*size canvas; the central size x size window is
    cropped. Masks are composited with the same placement, boxes are
    shifted, clipped and dropped when thinner than 2 px.

    Args:
        samples (Sequence[Sample]): Exactly four samples with the same tasks.
        rng (np.random.Generator): Source of the centre.
        size (int): Output side.
        centre (tuple[int, int], default=None): Fixed canvas centre.
    """
    if len(samples) != 4:
        raise ValueError(f"Mosaic needs 4 samples, got {len(samples)}")
    half = size // 2
    xc, yc = centre if centre is not None else mosaic_centre(rng, size)
    canvas = np.full((2 * size, 2 * size, 3), PAD_VALUE, dtype=np.uint8)
    canvas_masks = {k: np.zeros((2 * size, 2 * size), dtype=np.uint8) for k in samples[0].masks}
    classes, boxes = [], []
    corners = ((xc - half, yc - half), (xc, yc - half), (xc - half, yc), (xc, yc))
    for sample, (x0, y0) in zip(samples, corners):
        tile = resize_sample(sample, half)
        canvas[y0:y0 + half, x0:x0 + half] = tile.image
        for k in canvas_masks:
            canvas_masks[k][y0:y0 + half, x0:x0 + half] = tile.masks[k]
        if len(tile.det):
            boxes.append(boxes_to_pixels(tile.det, (half, half)) + [x0, y0, x0, y0])
            classes.append(tile.det[:, 0])

    crop = size // 2  # top-left of the central window
    image = canvas[crop:crop + size, crop:crop + size].copy()
    masks = {k: v[crop:crop + size, crop:crop + size].copy() for k, v in canvas_masks.items()}
    if boxes:
        det = pixels_to_det(np.concatenate(classes), np.concatenate(boxes) - crop, (size, size))
    else:
        det = np.zeros((0, 5), dtype=np.float32)
    return replace(samples[0], image=image, det=det, masks=masks)
