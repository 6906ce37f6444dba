"""
Run configuration for PanopticRoad.

Every default of a training or evaluation run lives here, first as an
INIT_* constant and then as a field of the structured OmegaConf schema.
A run is configured by merging three layers:

- the structured defaults below,
- an optional YAML file (nested key-value text, see configs/default.yaml),
- dotted command-line overrides such as optim.lr0=0.02.

Unknown keys or values of the wrong type raise ConfigError naming the
offending key. The merged config is written next to every run as
config.yaml, and reloading that snapshot reproduces the run.
"""

from omegaconf.errors import OmegaConfBaseException
from dataclasses import dataclass, field
from typing import Dict, List, Optional
from omegaconf import OmegaConf
from .errors import ConfigError
import logging
import torch
import os

logger = logging.getLogger("panopticroad")

DEVICE_ENV_VAR = "PANROAD_DEVICE"

INIT_SCALE = "n"
INIT_SEG_TASKS = ["drivable", "lane"]
INIT_INPUT_SIZE = 640
INIT_REG_MAX = 16

INIT_LR0 = 0.01
INIT_LRF = 0.01
INIT_MOMENTUM = 0.937
INIT_WEIGHT_DECAY = 0.0005
INIT_WARMUP_EPOCHS = 3
INIT_WARMUP_MOMENTUM = 0.8
INIT_WARMUP_BIAS_LR = 0.1
INIT_EPOCHS_MAX = 300
INIT_PATIENCE = 50
INIT_BATCH_SIZE = 8

INIT_LAMBDA_BCE = 0.5
INIT_LAMBDA_DFL = 1.5
INIT_LAMBDA_CIOU = 7.5
INIT_LAMBDA_FL = 24.0
INIT_LAMBDA_TL = 8.0
INIT_TVERSKY_ALPHA = 0.7
INIT_TVERSKY_BETA = 0.3
INIT_FOCAL_ALPHA = 0.25
INIT_FOCAL_GAMMA = 2.0

INIT_EVAL_CONF = 0.001
INIT_EVAL_NMS_IOU = 0.6
INIT_PREDICT_CONF = 0.25
INIT_PREDICT_NMS_IOU = 0.45

INIT_HSV_H = 0.015
INIT_HSV_S = 0.7
INIT_HSV_V = 0.4
INIT_TRANSLATE = 0.1
INIT_SCALE_GAIN = 0.5
INIT_FLIP = 0.5
INIT_CLOSE_MOSAIC = 10

VEHICLE_CLASSES = ["car", "bus", "truck", "train"]


@dataclass
class ModelSection:
    scale: str = INIT_SCALE
    nc_det: int = 1
    seg_tasks: List[str] = field(default_factory=lambda: list(INIT_SEG_TASKS))
    input_size: int = INIT_INPUT_SIZE
    reg_max: int = INIT_REG_MAX
    acm: bool = True


@dataclass
class DataSection:
    root: str = "synthetic"
    train_split: str = "train"
    val_split: str = "val"
    class_names: List[str] = field(default_factory=lambda: ["vehicle"])
    class_map: Dict[str, int] = field(default_factory=lambda: {name: 0 for name in VEHICLE_CLASSES})
    strict: bool = False
    workers: int = 0
    synthetic_n: int = 8
    synthetic_val_n: int = 8
    synthetic_size: int = 640
    synthetic_seed: int = 0


@dataclass
class AugmentConfig:
    enabled: bool = True
    mosaic: bool = True
    close_mosaic: int = INIT_CLOSE_MOSAIC
    hsv_h: float = INIT_HSV_H
    hsv_s: float = INIT_HSV_S
    hsv_v: float = INIT_HSV_V
    translate: float = INIT_TRANSLATE
    scale: float = INIT_SCALE_GAIN
    flip: float = INIT_FLIP


@dataclass
class OptimConfig:
    lr0: float = INIT_LR0
    lrf: float = INIT_LRF
    momentum: float = INIT_MOMENTUM
    weight_decay: float = INIT_WEIGHT_DECAY
    warmup_epochs: float = INIT_WARMUP_EPOCHS
    warmup_momentum: float = INIT_WARMUP_MOMENTUM
    warmup_bias_lr: float = INIT_WARMUP_BIAS_LR
    epochs_max: int = INIT_EPOCHS_MAX
    patience: int = INIT_PATIENCE
    batch_size: int = INIT_BATCH_SIZE
    nominal_batch_size: Optional[int] = None
    ema: bool = False


@dataclass
class LossCoefficients:
    bce: float = INIT_LAMBDA_BCE
    dfl: float = INIT_LAMBDA_DFL
    ciou: float = INIT_LAMBDA_CIOU
    fl: float = INIT_LAMBDA_FL
    tl: float = INIT_LAMBDA_TL
    tversky_alpha: float = INIT_TVERSKY_ALPHA
    tversky_beta: float = INIT_TVERSKY_BETA
    focal_alpha: float = INIT_FOCAL_ALPHA
    focal_gamma: float = INIT_FOCAL_GAMMA


@dataclass
class ThresholdProfile:
    conf: float = INIT_EVAL_CONF
    nms_iou: float = INIT_EVAL_NMS_IOU


@dataclass
class ThresholdSection:
    eval: ThresholdProfile = field(default_factory=ThresholdProfile)
    predict: ThresholdProfile = field(
        default_factory=lambda: ThresholdProfile(conf=INIT_PREDICT_CONF, nms_iou=INIT_PREDICT_NMS_IOU))


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossCoefficients = field(default_factory=LossCoefficients)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    fitness_weights: Optional[Dict[str, float]] = None
    seed: int = 0
    out_dir: str = "runs/train"
    device: str = "cuda"


def _config_error(error):
    key = getattr(error, "full_key", None) or getattr(error, "key", None)
    if key:
        return ConfigError(f"Invalid config key '{key}': {error.msg if hasattr(error, 'msg') else error}")
    return ConfigError(f"Invalid config: {error}")


def load_config(path=None, overrides=()):
    """
    Builds a RunConfig from the defaults, an optional YAML file and
    dotted overrides.

    Args:
        path (str, default=None): YAML file with nested keys. Keys left out
            keep their defaults.
        overrides (Iterable[str], default=()): Dotted "key=value" strings,
            applied last.

    Returns:
        omegaconf.DictConfig: The merged, validated config (struct mode).

    Raises:
        ConfigError: On unknown keys, wrong value types or invalid values.
    """
    cfg = merge_config(OmegaConf.structured(RunConfig), path, overrides)
    validate_config(cfg)
    return cfg


def merge_config(cfg, path=None, overrides=()):
    """
    Merges an optional YAML file and dotted overrides into an existing
    config (for example one restored from a checkpoint). Does not validate.
    """
    try:
        if path:
            if not os.path.isfile(path):
                raise ConfigError(f"Config file not found: {path}")
            cfg = OmegaConf.merge(cfg, OmegaConf.load(path))
        overrides = [o for o in overrides if o]
        if overrides:
            malformed = [o for o in overrides if "=" not in o]
            if malformed:
                raise ConfigError(f"Override must look like key=value: '{malformed[0]}'")
            cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(list(overrides)))
    except OmegaConfBaseException as e:
        raise _config_error(e) from e
    return cfg


def validate_config(cfg):
    """
    Checks value ranges the schema types cannot express.

    Raises:
        ConfigError: Naming the first offending key.
    """
    if cfg.model.scale not in ("n", "s"):
        raise ConfigError(f"Invalid config key 'model.scale': expected 'n' or 's', got '{cfg.model.scale}'")
    if len(cfg.model.seg_tasks) < 1:
        raise ConfigError("Invalid config key 'model.seg_tasks': at least one segmentation task is required")
    if len(set(cfg.model.seg_tasks)) != len(cfg.model.seg_tasks):
        raise ConfigError(f"Invalid config key 'model.seg_tasks': duplicate task in {list(cfg.model.seg_tasks)}")
    if cfg.model.input_size % 32:
        raise ConfigError(f"Invalid config key 'model.input_size': {cfg.model.input_size} is not a multiple of 32")
    if cfg.optim.patience >= cfg.optim.epochs_max:
        raise ConfigError(f"Invalid config key 'optim.patience': {cfg.optim.patience} must be smaller "
                          f"than optim.epochs_max={cfg.optim.epochs_max}")
    if cfg.optim.batch_size < 1:
        raise ConfigError("Invalid config key 'optim.batch_size': must be >= 1")
    for key in ("bce", "dfl", "ciou", "fl", "tl", "tversky_alpha", "tversky_beta", "focal_alpha", "focal_gamma"):
        if cfg.loss[key] < 0:
            raise ConfigError(f"Invalid config key 'loss.{key}': must be non-negative")
    for profile in ("eval", "predict"):
        for key in ("conf", "nms_iou"):
            value = cfg.thresholds[profile][key]
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"Invalid config key 'thresholds.{profile}.{key}': {value} outside [0, 1]")
    if cfg.model.nc_det != len(cfg.data.class_names):
        raise ConfigError(f"Invalid config key 'data.class_names': {len(cfg.data.class_names)} names "
                          f"for model.nc_det={cfg.model.nc_det}")


def save_config(cfg, path):
    """Writes the resolved config snapshot as YAML."""
    OmegaConf.save(config=cfg, f=path, resolve=True)


def config_to_dict(cfg):
    """Plain-container copy of a config, suitable for checkpoints."""
    return OmegaConf.to_container(cfg, resolve=True)


def config_from_dict(data):
    """
    Rebuilds a RunConfig from a checkpoint's plain-container copy.
    """
    try:
        cfg = OmegaConf.merge(OmegaConf.structured(RunConfig), OmegaConf.create(data))
    except OmegaConfBaseException as e:
        raise _config_error(e) from e
    return cfg


def resolve_device(requested="cuda"):
    """
    Picks the torch device for a run.

    The PANROAD_DEVICE environment variable takes precedence over the
    requested device. CUDA requests fall back to the CPU when CUDA is not
    available.

    Args:
        requested (str, default="cuda"): "cuda", "cuda:<index>" or "cpu".

    Returns:
        torch.device: The device to use.
    """
    requested = os.environ.get(DEVICE_ENV_VAR, requested) or "cpu"
    if requested.startswith("cuda") and not torch.cuda.is_available():
        logger.info(f"CUDA requested ('{requested}') but not available, using cpu")
        requested = "cpu"
    return torch.device(requested)
