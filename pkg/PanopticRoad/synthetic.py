"""
Synthetic road scenes for desk-scale training and tests.

Each scene is a sky / ground background with a gray road trapezoid
(drivable area), 2 to 4 bright lane polylines 3 to 5 px wide (lane lines)
and 1 to 6 shaded rectangles (vehicles). The generator draws its own
ground truth, so boxes match the drawn rectangles exactly, and vehicles
occlude both masks. The label geometry is kept as a SceneLayout, so the
labels can be rasterized again under any augmentation affine. A scene is
a pure function of (seed, split, index); images and masks are written as
PNG, so a fixed seed gives a byte-identical dataset.
"""

from dataclasses import dataclass, field
from typing import List, Tuple
from .dataset import MANIFEST, Sample
from . import augment
import numpy as np
import logging
import json
import cv2
import os

logger = logging.getLogger("panopticroad")

SYNTHETIC_TASKS = ["drivable", "lane"]
SYNTHETIC_CLASSES = ["vehicle"]
SPLIT_CODES = {"train": 0, "val": 1}
SUBPIXEL_BITS = 4


def _background(rng, size, horizon):
    image = np.empty((size, size, 3), dtype=np.float64)
    sky_top = np.array([rng.uniform(170, 230), rng.uniform(120, 170), rng.uniform(70, 120)])
    sky_bottom = sky_top + 30
    ground = np.array([rng.uniform(40, 80), rng.uniform(90, 140), rng.uniform(60, 110)])
    t = np.linspace(0, 1, max(horizon, 1))[:, None]
    image[:horizon] = (sky_top * (1 - t) + sky_bottom * t)[:, None, :]
    image[horizon:] = ground
    return image


def _road(rng, size, horizon):
    bottom_left = size * rng.uniform(0.0, 0.2)
    bottom_right = size * rng.uniform(0.8, 1.0)
    top_centre = size * rng.uniform(0.4, 0.6)
    top_half = size * rng.uniform(0.04, 0.12)
    return np.array([[bottom_left, size - 1], [bottom_right, size - 1],
                     [top_centre + top_half, horizon], [top_centre - top_half, horizon]])


def _lanes(rng, size, road, horizon):
    n = int(rng.integers(2, 5))
    lanes = []
    for k in range(n):
        f = (k + 0.5) / n + rng.uniform(-0.1, 0.1) / n
        bottom_x = road[0, 0] + f * (road[1, 0] - road[0, 0])
        top_x = road[3, 0] + f * (road[2, 0] - road[3, 0])
        mid_x = (bottom_x + top_x) / 2 + rng.uniform(-0.03, 0.03) * size
        points = np.array([[bottom_x, size - 1], [mid_x, (size - 1 + horizon) / 2], [top_x, horizon]])
        thickness = int(rng.integers(3, 6))
        color = (int(rng.integers(235, 256)),) * 3 if rng.random() < 0.7 else (0, 210, 230)
        lanes.append((np.round(points).astype(np.int32), thickness, color))
    return lanes


def _vehicles(rng, size, horizon):
    n = int(rng.integers(1, 7))
    boxes = []
    for _ in range(n):
        for _attempt in range(20):
            bw = size * rng.uniform(0.06, 0.18)
            bh = bw * rng.uniform(0.6, 1.0)
            x1 = int(round(rng.uniform(0, size - bw)))
            y2 = int(round(rng.uniform(min(horizon + bh, size), size)))
            x2, y1 = int(round(x1 + bw)), int(round(y2 - bh))
            if x2 - x1 < 2 or y2 - y1 < 2 or y1 < 0:
                continue
            if all(x2 <= b[0] or x1 >= b[2] or y2 <= b[1] or y1 >= b[3] for b in boxes):
                boxes.append((x1, y1, x2, y2))
                break
    return boxes


@dataclass
class SceneLayout:
    """
    Vector geometry of one scene in pixel index coordinates.

    Args:
        size (int): Square image side.
        road (np.ndarray): 4 x 2 int32 drivable polygon.
        lanes (list[tuple[np.ndarray, int]]): Lane polylines and their
            thickness in pixels.
        vehicles (list[tuple[int, int, int, int]]): Vehicle rectangles as
            (x1, y1, x2, y2) pixel edges, drawn over both masks.
    """
    size: int
    road: np.ndarray
    lanes: List[Tuple[np.ndarray, int]] = field(default_factory=list)
    vehicles: List[Tuple[int, int, int, int]] = field(default_factory=list)


def _fixed_point(points, matrix):
    xy = np.concatenate((np.asarray(points, dtype=np.float64), np.ones((len(points), 1))), 1) @ matrix.T
    return np.round(xy * (1 << SUBPIXEL_BITS)).astype(np.int32)


def draw_labels(layout, matrix=None):
    """
    Rasterizes the vehicle boxes and the "drivable" and "lane" masks of a
    layout, optionally under an affine in continuous pixel coordinates
    (as built by augment.affine_matrix). Lane thickness follows the
    affine's scale; boxes are clipped and thin ones dropped the way
    augment.apply_affine does.

    Returns:
        tuple[np.ndarray, dict[str, np.ndarray]]: Normalized det rows and
            the masks.
    """
    size = layout.size
    drivable = np.zeros((size, size), dtype=np.uint8)
    lane = np.zeros((size, size), dtype=np.uint8)
    if matrix is None:
        m = np.eye(3)
        cv2.fillPoly(drivable, [layout.road], 1)
        for points, thickness in layout.lanes:
            cv2.polylines(lane, [points], False, 1, thickness)
    else:
        m = np.asarray(matrix, dtype=np.float64)
        index = augment.index_matrix(m)
        scale = float(np.sqrt(abs(np.linalg.det(m[:2, :2]))))
        cv2.fillPoly(drivable, [_fixed_point(layout.road, index)], 1, shift=SUBPIXEL_BITS)
        for points, thickness in layout.lanes:
            cv2.polylines(lane, [_fixed_point(points, index)], False, 1, max(int(round(thickness * scale)), 1),
                          shift=SUBPIXEL_BITS)

    boxes = np.zeros((len(layout.vehicles), 4))
    for k, (x1, y1, x2, y2) in enumerate(layout.vehicles):
        corners = np.array([[x1, y1, 1.0], [x2, y2, 1.0]]) @ m.T
        ex1, ex2 = sorted(corners[:, 0])
        ey1, ey2 = sorted(corners[:, 1])
        boxes[k] = ex1, ey1, ex2, ey2
        # pixels whose centre falls inside the transformed rectangle
        c1, c2 = (min(max(int(np.ceil(e - 0.5)), 0), size) for e in (ex1, ex2))
        r1, r2 = (min(max(int(np.ceil(e - 0.5)), 0), size) for e in (ey1, ey2))
        drivable[r1:r2, c1:c2] = 0
        lane[r1:r2, c1:c2] = 0
    det = augment.pixels_to_det(np.zeros(len(boxes)), boxes, (size, size))
    return det, {"drivable": drivable, "lane": lane}


def render_scene(rng, size=640, return_layout=False):
    """
    Draws one scene.

    Args:
        rng (np.random.Generator): Source of every random choice.
        size (int, default=640): Square image side.
        return_layout (bool, default=False): Also return the SceneLayout
            the labels were rasterized from.

    Returns:
        Sample: BGR image, vehicle boxes (class 0) and the "drivable" and
            "lane" masks.
    """
    horizon = int(size * rng.uniform(0.35, 0.5))
    image = _background(rng, size, horizon)
    image += rng.integers(-6, 7, size=(size, size, 1))
    image = np.clip(image, 0, 255).astype(np.uint8)

    road = _road(rng, size, horizon)
    layout = SceneLayout(size=size, road=np.round(road).astype(np.int32))
    gray = int(rng.integers(85, 135))
    cv2.fillPoly(image, [layout.road], (gray, gray, gray))

    for points, thickness, color in _lanes(rng, size, road, horizon):
        cv2.polylines(image, [points], False, color, thickness)
        layout.lanes.append((points, thickness))

    for x1, y1, x2, y2 in _vehicles(rng, size, horizon):
        color = rng.uniform(30, 230, 3)
        shade = np.linspace(1.0, 0.6, y2 - y1)[:, None, None]
        body = color * shade
        band = slice(int(0.15 * (y2 - y1)), max(int(0.4 * (y2 - y1)), int(0.15 * (y2 - y1)) + 1))
        body[band] *= 0.5
        image[y1:y2, x1:x2] = np.broadcast_to(np.round(body), (y2 - y1, x2 - x1, 3)).astype(np.uint8)
        layout.vehicles.append((x1, y1, x2, y2))

    det, masks = draw_labels(layout)
    sample = Sample(image=image, det=det, masks=masks)
    return (sample, layout) if return_layout else sample


def scene_rng(seed, split, index):
    return np.random.default_rng([seed, SPLIT_CODES[split], index])


def write_sample(root, split, sample):
    """Writes a sample in the dataset layout."""
    for d in ("images", os.path.join("labels", "det"), *(os.path.join("masks", t) for t in sample.masks)):
        os.makedirs(os.path.join(root, d, split), exist_ok=True)
    cv2.imwrite(os.path.join(root, "images", split, sample.id + ".png"), sample.image)
    with open(os.path.join(root, "labels", "det", split, sample.id + ".txt"), "w") as f:
        for cls, cx, cy, w, h in sample.det.astype(np.float64):
            f.write(f"{int(cls)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")
    for task, mask in sample.masks.items():
        cv2.imwrite(os.path.join(root, "masks", task, split, sample.id + ".png"), mask * 255)


def generate_synthetic(root, n_train=8, n_val=8, size=640, seed=0):
    """
    Writes a synthetic dataset under root.

    Args:
        root (str): Output directory, created when missing.
        n_train (int, default=8): Training scenes.
        n_val (int, default=8): Validation scenes.
        size (int, default=640): Image side in pixels.
        seed (int, default=0): Dataset seed.

    Returns:
        dict: The manifest written to <root>/manifest.json.
    """
    manifest = {"tasks": list(SYNTHETIC_TASKS), "classes": list(SYNTHETIC_CLASSES), "train": [], "val": []}
    for split, n in (("train", n_train), ("val", n_val)):
        for index in range(n):
            sample = render_scene(scene_rng(seed, split, index), size)
            sample.id = f"{split}_{index:05d}"
            write_sample(root, split, sample)
            manifest[split].append(sample.id)
        if n == 0:
            for d in ("images", os.path.join("labels", "det"), *(os.path.join("masks", t) for t in SYNTHETIC_TASKS)):
                os.makedirs(os.path.join(root, d, split), exist_ok=True)
    with open(os.path.join(root, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {n_train} train and {n_val} val synthetic scenes ({size}px, seed {seed}) to {root}")
    return manifest


def resolve_data_root(cfg, run_dir):
    """
    Dataset root of a run. The special root "synthetic" means a generated
    dataset under <run_dir>/synthetic, written on first use and reused
    afterwards.
    """
    if cfg.data.root != "synthetic":
        return cfg.data.root
    root = os.path.join(run_dir, "synthetic")
    if not os.path.isfile(os.path.join(root, MANIFEST)):
        generate_synthetic(root, cfg.data.synthetic_n, cfg.data.synthetic_val_n, cfg.data.synthetic_size,
                           cfg.data.synthetic_seed)
    return root
