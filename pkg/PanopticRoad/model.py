"""
Multi-task network: one shared backbone feeding a detection neck and N
identical segmentation necks.

Features:
- Backbone: 3x3 stem, four stride-2 stages with c2f blocks, SPPF at the
  deepest level.
- Detection neck: PAN (top-down then bottom-up) over strides 8, 16 and 32,
  followed by the anchor-free detect head.
- Segmentation necks: one top-down FPN per task continuing the upsampling
  down to stride 2, with a gated skip fusion (or a fixed concatenation
  when the gate is switched off) at every level, followed by a segment
  head returning full-resolution mask logits.
- Parameter accounting per component and checkpoint save / load with a
  stable parameter naming scheme (backbone.*, det_neck.*, det_head.*,
  seg_necks.<i>.*, seg_heads.<i>.*).

Example:

    model = build_model(ModelConfig(scale="n", seg_tasks=["drivable", "lane"]))
    bundle = model(images)              # eval: decoded detections + mask logits
    count_parameters(model, "seg_heads")
"""

from .blocks import AdaptiveConcat, C2f, Conv, Detect, FixedConcat, SegmentHead, SPPF
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple
from .errors import ConfigError, ShapeError
from scipy.special import expit
import torch.nn as nn
import logging
import torch
import os

logger = logging.getLogger("panopticroad")

# scale -> (depth_multiple, width_multiple)
SCALES = {
    "n": (0.33, 0.25),
    "s": (0.33, 0.50),
}
MAX_CHANNELS = 1024
STRIDES = (8, 16, 32)

# base channels / base depth of the backbone stages
BACKBONE_CHANNELS = (64, 128, 256, 512, 1024)
BACKBONE_DEPTHS = (3, 6, 6, 3)

# segmentation neck levels, deepest first: (name, stride, base channels)
SEG_LEVELS = (("P4", 16, 1024), ("P3", 8, 256), ("P2", 4, 128), ("P1", 2, 64))
SEG_LEVEL_DEPTH = 3

SELECTORS = ("all", "none", "backbone", "det_neck", "det_head", "seg_necks", "seg_heads", "acm", "gates")


@dataclass
class ModelConfig:
    """
    Architecture of a multi-task model.

    Args:
        scale (str, default="n"): "n" or "s". Sets the depth and width
            multiples unless those are given explicitly.
        nc_det (int, default=1): Detection classes.
        seg_tasks (list[str], default=["drivable", "lane"]): Segmentation
            tasks, one neck and one head each, in output order.
        input_size (int, default=640): Square input side in pixels.
        reg_max (int, default=16): Distribution bins per box side.
        acm (bool, default=True): Gated fusion in the segmentation necks.
            False uses a fixed concatenation at every level.
        depth_multiple (float, default=None): Overrides the scale's depth
            multiple.
        width_multiple (float, default=None): Overrides the scale's width
            multiple.
    """
    scale: str = "n"
    nc_det: int = 1
    seg_tasks: List[str] = field(default_factory=lambda: ["drivable", "lane"])
    input_size: int = 640
    reg_max: int = 16
    acm: bool = True
    depth_multiple: Optional[float] = None
    width_multiple: Optional[float] = None
    strides: Tuple[int, int, int] = STRIDES

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"Unknown model scale '{self.scale}', expected one of {sorted(SCALES)}")
        depth, width = SCALES[self.scale]
        if self.depth_multiple is None:
            self.depth_multiple = depth
        if self.width_multiple is None:
            self.width_multiple = width
        self.seg_tasks = list(self.seg_tasks)
        self.strides = tuple(self.strides)
        if len(self.seg_tasks) < 1:
            raise ConfigError("At least one segmentation task is required")
        if len(set(self.seg_tasks)) != len(self.seg_tasks):
            raise ConfigError(f"Duplicate segmentation task in {self.seg_tasks}")
        if self.nc_det < 1:
            raise ConfigError(f"nc_det must be >= 1, got {self.nc_det}")
        if self.input_size % max(self.strides):
            raise ConfigError(f"Input size {self.input_size} is not a multiple of stride {max(self.strides)}")

    @classmethod
    def from_run_config(cls, cfg):
        """Model part of a RunConfig (the model section plus nothing else)."""
        m = cfg.model
        return cls(scale=m.scale, nc_det=m.nc_det, seg_tasks=list(m.seg_tasks), input_size=m.input_size,
                   reg_max=m.reg_max, acm=m.acm)

    def to_dict(self):
        return asdict(self)

    def width(self, c):
        """Channel count for base width c. Non-integer results are rejected."""
        scaled = min(c, MAX_CHANNELS) * self.width_multiple
        if abs(scaled - round(scaled)) > 1e-6 or round(scaled) < 1:
            raise ConfigError(f"Width multiple {self.width_multiple} turns {c} base channels into "
                              f"{scaled:g}, which is not a whole channel count")
        return int(round(scaled))

    def depth(self, n):
        return max(round(n * self.depth_multiple), 1)


@dataclass
class PredictionBundle:
    """
    Output of one forward pass.

    det is a list of 3 raw per-scale tensors in train mode and a decoded
    B x (4 + nc) x A tensor in eval mode. seg_masks holds one
    B x (nc + 1) x H x W logit tensor per segmentation task, in the
    configured task order.
    """
    det: object
    seg_masks: List[torch.Tensor]
    tasks: List[str]

    def seg(self, task):
        try:
            return self.seg_masks[self.tasks.index(task)]
        except ValueError:
            raise KeyError(f"No segmentation output for task '{task}', have {self.tasks}") from None


class Backbone(nn.Module):
    """
    Stem plus four downsampling stages and SPPF.

    forward() returns the feature pyramid as a dict stride -> feature map
    for strides 2, 4, 8, 16 and 32.
    """

    def __init__(self, config):
        super().__init__()
        c = [config.width(x) for x in BACKBONE_CHANNELS]
        d = [config.depth(x) for x in BACKBONE_DEPTHS]
        self.channels = {2: c[0], 4: c[1], 8: c[2], 16: c[3], 32: c[4]}
        self.layers = nn.ModuleList([
            Conv(3, c[0], 3, 2),                # 0  stride 2
            Conv(c[0], c[1], 3, 2),             # 1  stride 4
            C2f(c[1], c[1], d[0], True),        # 2
            Conv(c[1], c[2], 3, 2),             # 3  stride 8
            C2f(c[2], c[2], d[1], True),        # 4
            Conv(c[2], c[3], 3, 2),             # 5  stride 16
            C2f(c[3], c[3], d[2], True),        # 6
            Conv(c[3], c[4], 3, 2),             # 7  stride 32
            C2f(c[4], c[4], d[3], True),        # 8
            SPPF(c[4], c[4], 5),                # 9
        ])
        self.taps = {0: 2, 2: 4, 4: 8, 6: 16, 9: 32}

    def forward(self, x):
        pyramid = {}
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                pyramid[self.taps[i]] = x
        return pyramid


class DetectionNeck(nn.Module):
    """PAN over strides 8, 16 and 32; returns the three detect-head inputs."""

    def __init__(self, config, backbone_channels):
        super().__init__()
        d = config.depth(3)
        c3, c4, c5 = backbone_channels[8], backbone_channels[16], backbone_channels[32]
        w4, w3 = config.width(512), config.width(256)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.td4 = C2f(c5 + c4, w4, d)                  # P5 up + P4
        self.td3 = C2f(w4 + c3, w3, d)                  # up + P3 -> P3 out
        self.down3 = Conv(w3, w3, 3, 2)
        self.bu4 = C2f(w3 + w4, w4, d)                  # -> P4 out
        self.down4 = Conv(w4, w4, 3, 2)
        self.bu5 = C2f(w4 + c5, config.width(1024), d)  # -> P5 out
        self.out_channels = (w3, w4, config.width(1024))

    def forward(self, pyramid):
        p3, p4, p5 = pyramid[8], pyramid[16], pyramid[32]
        t4 = self.td4(torch.cat((self.up(p5), p4), 1))
        n3 = self.td3(torch.cat((self.up(t4), p3), 1))
        n4 = self.bu4(torch.cat((self.down3(n3), t4), 1))
        n5 = self.bu5(torch.cat((self.down4(n4), p5), 1))
        return [n3, n4, n5]


class SegmentationNeck(nn.Module):
    """
    Top-down FPN from stride 32 down to stride 2.

    At every level the running feature is upsampled by 2, fused with the
    backbone feature of the same stride and refined by a c2f block. The
    stride-2 output feeds the segment head.
    """

    def __init__(self, config, backbone_channels):
        super().__init__()
        d = config.depth(SEG_LEVEL_DEPTH)
        fusion = AdaptiveConcat if config.acm else FixedConcat
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.levels = [(name, stride) for name, stride, _ in SEG_LEVELS]
        self.fusions = nn.ModuleList()
        self.blocks = nn.ModuleList()
        c = backbone_channels[32]
        for name, stride, base in SEG_LEVELS:
            self.fusions.append(fusion((c, backbone_channels[stride]), level=f"{name}/stride {stride}"))
            width = config.width(base)
            self.blocks.append(C2f(c, width, d))
            c = width
        self.out_channels = c

    def forward(self, pyramid, mode=None):
        x = pyramid[32]
        for (_, stride), fusion, block in zip(self.levels, self.fusions, self.blocks):
            x = block(fusion(self.up(x), pyramid[stride], mode))
        return x


class MultiTaskModel(nn.Module):
    """
    Shared backbone, PAN detection branch and one FPN segmentation branch
    per task.

    The backbone runs once per forward; every neck reads the same feature
    pyramid. Segmentation branch i only ever sees the backbone and its own
    neck and head.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.tasks = list(config.seg_tasks)
        self.backbone = Backbone(config)
        self.det_neck = DetectionNeck(config, self.backbone.channels)
        self.det_head = Detect(config.nc_det, self.det_neck.out_channels, config.strides, config.reg_max)
        self.seg_necks = nn.ModuleList(SegmentationNeck(config, self.backbone.channels) for _ in self.tasks)
        self.seg_heads = nn.ModuleList(SegmentHead(neck.out_channels, nc=1) for neck in self.seg_necks)
        self._check_fusion_levels()
        self.det_head.bias_init(config.input_size)

    def _check_fusion_levels(self):
        size = self.config.input_size
        for name, stride, _ in SEG_LEVELS:
            upsampled = (size // (stride * 2)) * 2
            if upsampled != size // stride:
                raise ConfigError(f"Fusion level {name}: upsampled neck feature {upsampled}px does not match "
                                  f"the backbone feature {size // stride}px for input size {size}")

    def check_input(self, images):
        size = self.config.input_size
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected a B x 3 x {size} x {size} image batch, got shape {tuple(images.shape)}")
        if images.shape[2] != size or images.shape[3] != size:
            raise ShapeError(f"Input images are {images.shape[2]}x{images.shape[3]}, the model was built "
                             f"for {size}x{size}")

    def forward(self, images, mode=None):
        """
        Args:
            images (torch.Tensor): B x 3 x S x S batch with values in [0, 1].
            mode (str, default=None): "train" or "eval". Defaults to the
                module's own training flag. Normalization layers always
                follow the training flag.

        Returns:
            PredictionBundle
        """
        self.check_input(images)
        pyramid = self.backbone(images)
        det = self.det_head(self.det_neck(pyramid), mode)
        seg = [head(neck(pyramid, mode)) for neck, head in zip(self.seg_necks, self.seg_heads)]
        return PredictionBundle(det=det, seg_masks=seg, tasks=self.tasks)

    def fusion_modules(self):
        """Yields (task, level, module) for every fusion of every segmentation neck."""
        for task, neck in zip(self.tasks, self.seg_necks):
            for (name, stride), fusion in zip(neck.levels, neck.fusions):
                yield task, f"{name}/stride {stride}", fusion


def build_model(config):
    """
    Builds a MultiTaskModel from a ModelConfig (or a RunConfig).

    Raises:
        ConfigError: Unknown scale, non-integer channel widths, odd c2f
            widths or an input size the fusion levels cannot match.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_run_config(config)
    model = MultiTaskModel(config)
    logger.debug(f"Built scale '{config.scale}' model with tasks {config.seg_tasks}: "
                 f"{count_parameters(model):,} parameters")
    return model


def _selected_parameters(model, selector):
    if selector == "all":
        return list(model.parameters())
    if selector == "none":
        return []
    if selector in ("backbone", "det_neck", "det_head", "seg_necks", "seg_heads"):
        return list(getattr(model, selector).parameters())
    if selector == "acm":
        return [p for _, _, m in model.fusion_modules() if isinstance(m, AdaptiveConcat) for p in m.parameters()]
    if selector == "gates":
        return [m.weight for _, _, m in model.fusion_modules() if isinstance(m, AdaptiveConcat)]
    kind, _, task = selector.partition(":")
    if kind in ("seg_neck", "seg_head") and task:
        if task not in model.tasks:
            raise ConfigError(f"Unknown task '{task}' in selector '{selector}', model tasks are {model.tasks}")
        modules = model.seg_necks if kind == "seg_neck" else model.seg_heads
        return list(modules[model.tasks.index(task)].parameters())
    raise ConfigError(f"Unknown parameter selector '{selector}', expected one of {list(SELECTORS)} "
                      f"or seg_neck:<task> / seg_head:<task>")


def count_parameters(model, selector="all"):
    """
    Exact number of learnable scalars in a component.

    Args:
        model (MultiTaskModel): Built model.
        selector (str, default="all"): One of "all", "none", "backbone",
            "det_neck", "det_head", "seg_necks", "seg_heads", "acm" (whole
            gated fusion modules), "gates" (gate scalars only),
            "seg_neck:<task>" or "seg_head:<task>".

    Raises:
        ConfigError: Unknown selector or task.
    """
    return sum(p.numel() for p in _selected_parameters(model, selector))


def component_parameters(model):
    """Ordered {component: parameter count} table, total last."""
    table = {
        "backbone": count_parameters(model, "backbone"),
        "det_neck": count_parameters(model, "det_neck"),
        "det_head": count_parameters(model, "det_head"),
    }
    for task in model.tasks:
        table[f"seg_neck:{task}"] = count_parameters(model, f"seg_neck:{task}")
    for task in model.tasks:
        table[f"seg_head:{task}"] = count_parameters(model, f"seg_head:{task}")
    table["gates"] = count_parameters(model, "gates")
    table["total"] = count_parameters(model, "all")
    return table


def gate_states(model):
    """
    State of every gated fusion.

    Returns:
        list[dict]: One row per fusion with task, level, weight,
            gate (logistic of the weight) and the branch taken at eval.

    Raises:
        ConfigError: When the model has no gated fusion (built with acm=False).
    """
    rows = []
    for task, level, module in model.fusion_modules():
        if not isinstance(module, AdaptiveConcat):
            continue
        weight = float(module.weight.detach().cpu())
        gate = float(expit(weight))
        rows.append({
            "task": task,
            "level": level,
            "weight": weight,
            "gate": gate,
            "branch": "concat" if gate > 0.5 else "passthrough",
        })
    if not rows:
        raise ConfigError("Model has no adaptive concatenation modules (built with model.acm=false)")
    return rows


def save_checkpoint(path, model, run_config=None, epoch=0, best_fitness=0.0, optimizer=None, ema=None, extra=None):
    """
    Writes a checkpoint: named parameters and buffers, the model config,
    the run config and training progress.
    """
    ckpt = {
        "model": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "model_config": model.config.to_dict(),
        "config": run_config,
        "epoch": int(epoch),
        "best_fitness": float(best_fitness),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "ema": {k: v.detach().cpu() for k, v in ema.state_dict().items()} if ema is not None else None,
    }
    if extra:
        ckpt.update(extra)
    torch.save(ckpt, path)
    logger.debug(f"Saved checkpoint {path} (epoch {epoch}, best fitness {best_fitness:.5f})")


def load_checkpoint(path, device="cpu"):
    """
    Loads a checkpoint and rebuilds its model.

    Returns:
        tuple[MultiTaskModel, dict]: The model (in eval mode, on device)
            and the raw checkpoint dict.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ConfigError(f"Could not read checkpoint {path}: {e}") from e
    if not isinstance(ckpt, dict) or "model" not in ckpt or "model_config" not in ckpt:
        raise ConfigError(f"{path} is not a PanopticRoad checkpoint")
    config = ModelConfig(**{k: v for k, v in ckpt["model_config"].items()})
    model = MultiTaskModel(config)
    weights = ckpt["ema"] if ckpt.get("ema") else ckpt["model"]
    model.load_state_dict(weights)
    model.to(device).eval()
    logger.debug(f"Loaded checkpoint {path} (epoch {ckpt.get('epoch')}, tasks {config.seg_tasks})")
    return model, ckpt
