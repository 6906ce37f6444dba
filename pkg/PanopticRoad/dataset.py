"""
Road-scene dataset: on-disk layout, sample loading and the training data
pipeline.

Layout (shared by BDD100K-style data and the synthetic generator):

    <root>/manifest.json                 {"tasks": [...], "classes": [...],
                                          "train": [ids], "val": [ids]}
    <root>/images/<split>/<id>.png|.jpg
    <root>/labels/det/<split>/<id>.txt   "class cx cy w h" per object, normalized
    <root>/masks/<task>/<split>/<id>.png single channel, 0 / 255

The class field of a label line is either a merged class id or a raw
class name ("car", "bus", "truck", "train"), which is mapped through the
class map; names without a mapping are skipped.

Items are pure functions of (seed, epoch, index): each draws its own
numpy Generator, so worker count and order do not change what a sample
looks like.
"""

from .errors import ConfigError, CorruptImageError, DataError
from dataclasses import dataclass, field, replace
from torch.utils.data import DataLoader
from typing import Dict, List
from . import augment
import torch.multiprocessing as mp
import numpy as np
import logging
import torch
import json
import cv2
import os

logger = logging.getLogger("panopticroad")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MANIFEST = "manifest.json"


@dataclass
class Sample:
    """
    One scene.

    Args:
        image (np.ndarray): H x W x 3 uint8, BGR.
        det (np.ndarray): n x 5 float32 rows (cls, cx, cy, w, h), normalized.
        masks (dict[str, np.ndarray]): Task -> H x W uint8 {0, 1}.
        id (str): Sample id.
    """
    image: np.ndarray
    det: np.ndarray
    masks: Dict[str, np.ndarray]
    id: str = ""


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    tasks: List[str] = field(default_factory=lambda: ["drivable", "lane"])
    class_map: Dict[str, int] = field(default_factory=dict)
    nc: int = 1


def read_manifest(root):
    path = os.path.join(root, MANIFEST)
    if not os.path.isfile(path):
        raise DataError(f"No {MANIFEST} in dataset root {root}")
    with open(path, "r") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"Unreadable {path}: {e}") from e
    for key in ("tasks", "train", "val"):
        if key not in manifest:
            raise DataError(f"{path} has no '{key}' entry")
    return manifest


def check_tasks(expected, available, source="dataset"):
    """
    Raises:
        ConfigError: When a configured task has no data, listing both task sets.
    """
    missing = [t for t in expected if t not in available]
    if missing:
        raise ConfigError(f"Task mismatch: model tasks {list(expected)}, {source} tasks {list(available)}")


def image_path(spec, sample_id):
    base = os.path.join(spec.root, "images", spec.split, sample_id)
    for ext in IMAGE_EXTENSIONS:
        if os.path.isfile(base + ext):
            return base + ext
    raise DataError(f"No image for sample '{sample_id}' in {os.path.dirname(base)}")


def parse_labels(path, class_map, nc):
    """
    Reads a label file into n x 5 normalized rows. Boxes are clipped to the
    unit square; empty boxes and unmapped class names are skipped.
    """
    rows = []
    with open(path, "r") as f:
        for number, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise DataError(f"{path}:{number}: expected 'class cx cy w h', got '{line.strip()}'")
            name = parts[0]
            if name.lstrip("-").isdigit():
                cls = int(name)
            elif name in class_map:
                cls = int(class_map[name])
            else:
                continue
            if not 0 <= cls < nc:
                logger.warning(f"{path}:{number}: class id {cls} outside [0, {nc}), skipped")
                continue
            try:
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError:
                raise DataError(f"{path}:{number}: non-numeric box '{line.strip()}'") from None
            x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
            x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
            if x2 <= x1 or y2 <= y1:
                continue
            rows.append((cls, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
    return np.array(rows, dtype=np.float32).reshape(-1, 5)


def load_sample(spec, sample_id):
    """
    Decodes one sample from disk.

    Raises:
        DataError: Missing image, label file or mask (the message names the
            task and the id), unreadable image, or a mask whose size does
            not match the image.
    """
    path = image_path(spec, sample_id)
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise CorruptImageError(f"Corrupt or unreadable image {path}")

    label_path = os.path.join(spec.root, "labels", "det", spec.split, sample_id + ".txt")
    if not os.path.isfile(label_path):
        raise DataError(f"No detection labels for sample '{sample_id}' ({label_path})")
    det = parse_labels(label_path, spec.class_map, spec.nc)
    masks = load_masks(spec, sample_id, image.shape[:2])
    return Sample(image=image, det=det, masks=masks, id=sample_id)


def load_masks(spec, sample_id, shape=None):
    """
    Binary {0, 1} masks of one sample at label resolution, keyed by task.

    Args:
        spec (DatasetSpec): Root, split and tasks.
        sample_id (str): Sample id.
        shape (tuple[int, int], default=None): Expected (height, width);
            all masks must share one size when None.

    Raises:
        DataError: Missing or unreadable mask, or a size mismatch.
    """
    masks = {}
    for task in spec.tasks:
        mask_path = os.path.join(spec.root, "masks", task, spec.split, sample_id + ".png")
        if not os.path.isfile(mask_path):
            raise DataError(f"Missing '{task}' mask for sample '{sample_id}' ({mask_path})")
        mask = cv2.imread(mask_path, cv2.IMREAD_GRAYSCALE)
        if mask is None:
            raise DataError(f"Corrupt '{task}' mask for sample '{sample_id}' ({mask_path})")
        if shape is None:
            shape = mask.shape
        if mask.shape != tuple(shape):
            raise DataError(f"'{task}' mask of sample '{sample_id}' is {mask.shape[1]}x{mask.shape[0]}, "
                            f"image is {shape[1]}x{shape[0]}")
        masks[task] = (mask > 127).astype(np.uint8)
    return masks


class RoadDataset(torch.utils.data.Dataset):
    """
    Samples of one split, resized (and augmented when training) to the
    network input.

    Args:
        spec (DatasetSpec): Root, split, tasks and class mapping.
        input_size (int): Network input side.
        augment_cfg (AugmentConfig, default=None): Augmentation settings;
            None disables augmentation.
        seed (int, default=0): Base seed of the per-item generators.
        strict (bool, default=False): Raise on corrupt images instead of
            warning and substituting the next sample.
        ids (list[str], default=None): Sample ids; defaults to the
            manifest's list for the split.
    """

    def __init__(self, spec, input_size, augment_cfg=None, seed=0, strict=False, ids=None):
        self.spec = spec
        self.input_size = input_size
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.strict = strict
        self.epoch = 0
        self.mosaic_enabled = bool(augment_cfg is not None and augment_cfg.enabled and augment_cfg.mosaic)

        if not os.path.isdir(spec.root):
            raise DataError(f"Dataset root {spec.root} does not exist")
        if ids is None:
            manifest = read_manifest(spec.root)
            check_tasks(spec.tasks, manifest["tasks"])
            if spec.split not in manifest:
                raise DataError(f"{spec.root}/{MANIFEST} has no '{spec.split}' split")
            ids = manifest[spec.split]
        self.ids = list(ids)
        if not self.ids:
            raise DataError(f"Split '{spec.split}' of {spec.root} is empty")
        for task in spec.tasks:
            mask_dir = os.path.join(spec.root, "masks", task, spec.split)
            if not os.path.isdir(mask_dir):
                raise DataError(f"Missing mask directory for task '{task}': {mask_dir}")

    def __len__(self):
        return len(self.ids)

    def set_epoch(self, epoch):
        self.epoch = epoch

    def close_mosaic(self):
        if self.mosaic_enabled:
            logger.info("Closing mosaic augmentation")
        self.mosaic_enabled = False

    def load(self, index):
        """Raw sample at index; corrupt images are skipped unless strict."""
        for offset in range(len(self.ids)):
            sample_id = self.ids[(index + offset) % len(self.ids)]
            try:
                return load_sample(self.spec, sample_id)
            except CorruptImageError as e:
                if self.strict:
                    raise
                logger.warning(f"{e}, using the next sample instead")
        raise DataError(f"No readable image in split '{self.spec.split}' of {self.spec.root}")

    @property
    def augmenting(self):
        return bool(self.augment_cfg is not None and self.augment_cfg.enabled)

    def label_masks(self, sample_id):
        """Masks of sample_id at their original label resolution."""
        return load_masks(self.spec, sample_id)

    def get_sample(self, index):
        """The fully processed Sample for index in the current epoch."""
        rng = np.random.default_rng([self.seed, self.epoch, index])
        cfg = self.augment_cfg
        if cfg is not None and cfg.enabled and self.mosaic_enabled:
            others = rng.integers(0, len(self.ids), size=3)
            parts = [self.load(index)] + [self.load(int(i)) for i in others]
            sample = augment.mosaic(parts, rng, self.input_size)
        else:
            sample = augment.resize_sample(self.load(index), self.input_size)
        if cfg is not None and cfg.enabled:
            sample = augment.random_geometric(sample, rng, cfg.translate, cfg.scale, cfg.flip)
            sample = replace(sample, image=augment.augment_hsv(sample.image, rng, cfg.hsv_h, cfg.hsv_s, cfg.hsv_v))
        return sample

    def __getitem__(self, index):
        sample = self.get_sample(index)
        image = np.ascontiguousarray(sample.image[:, :, ::-1].transpose(2, 0, 1))  # BGR HWC -> RGB CHW
        masks = {k: torch.from_numpy(v.astype(np.int64)) for k, v in sample.masks.items()}
        return torch.from_numpy(image), torch.from_numpy(sample.det), masks, sample.id


def collate_fn(batch):
    """
    Stacks items into (images, targets, masks, ids).

    images is a B x 3 x S x S float tensor in [0, 1]; targets holds the
    flat detection table {"idx", "cls", "box"} with normalized cx, cy, w, h
    boxes; masks maps each task to a B x S x S long tensor.
    """
    images, dets, masks, ids = zip(*batch)
    idx = torch.cat([torch.full((len(d),), i, dtype=torch.float32) for i, d in enumerate(dets)])
    det = torch.cat(dets, 0) if dets else torch.zeros((0, 5))
    targets = {"idx": idx, "cls": det[:, 0], "box": det[:, 1:5]}
    stacked = {task: torch.stack([m[task] for m in masks]) for task in masks[0]}
    return torch.stack(images).float() / 255.0, targets, stacked, list(ids)


def build_dataset(cfg, split="train", root=None, augment_enabled=None):
    """
    RoadDataset for a split of the configured data root.

    Args:
        cfg (RunConfig): Run configuration.
        split (str, default="train"): "train" or "val" (the config's split
            names are looked up).
        root (str, default=None): Overrides cfg.data.root.
        augment_enabled (bool, default=None): Defaults to True for the
            training split only.
    """
    split_name = cfg.data.train_split if split == "train" else cfg.data.val_split
    if augment_enabled is None:
        augment_enabled = split == "train"
    spec = DatasetSpec(root=root or cfg.data.root, split=split_name, tasks=list(cfg.model.seg_tasks),
                       class_map=dict(cfg.data.class_map), nc=cfg.model.nc_det)
    return RoadDataset(spec, cfg.model.input_size, cfg.augment if augment_enabled else None,
                       seed=cfg.seed, strict=cfg.data.strict)


def build_dataloader(dataset, batch_size, shuffle=False, workers=0, seed=0):
    if workers > 0:
        try:
            # Only set the start method if it hasn't been set already
            if mp.get_start_method(allow_none=True) is None:
                mp.set_start_method("spawn")
        except RuntimeError as e:
            logger.info(f"Start method has already been set. Details: {e}")
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, num_workers=workers,
                      collate_fn=collate_fn, generator=generator, pin_memory=torch.cuda.is_available(),
                      persistent_workers=False, drop_last=False)
