"""
Neural building blocks of the multi-task network.

Features:
- Conv: conv-norm-activation unit used everywhere (no conv bias, the shift
  lives in the normalization).
- Bottleneck / C2f: cross-stage block that splits channels, runs a chain of
  bottlenecks and fuses every intermediate output with a 1x1 conv.
- SPPF: three sequential stride-1 k=5 max-pools concatenated with their
  input and fused by a 1x1 conv.
- AdaptiveConcat: gated skip fusion between a segmentation-neck feature and
  the backbone feature of the same resolution, driven by one learnable
  scalar (hard branch at eval, soft interpolation while training).
- FixedConcat: the always-concatenate fusion used when the adaptive gate is
  switched off.
- Detect: anchor-free decoupled detect head (class branch and box
  distribution branch per scale, no objectness).
- SegmentHead: conv stack with a single stride-2 transposed convolution
  returning nc+1 raw mask logits.

Every forward is a pure function of parameters and input.
"""

from .errors import ConfigError, ShapeError
import torch.nn as nn
import torch
import math

INIT_GATE_WEIGHT = 5.0
SEGMENT_HEAD_FEATURES = 32
BN_EPS = 1e-3
BN_MOMENTUM = 0.03


def autopad(k, p=None, d=1):  # kernel, padding, dilation
    """Pad to 'same' shape outputs."""
    if d > 1:
        k = d * (k - 1) + 1 if isinstance(k, int) else [d * (x - 1) + 1 for x in k]  # actual kernel-size
    if p is None:
        p = k // 2 if isinstance(k, int) else [x // 2 for x in k]  # auto-pad
    return p


def resolve_mode(module, mode):
    """Forward mode of a block: explicit 'train' / 'eval' or the module's own."""
    if mode is None:
        return "train" if module.training else "eval"
    if mode not in ("train", "eval"):
        raise ValueError(f"Unknown forward mode '{mode}', expected 'train' or 'eval'")
    return mode


def check_channels(x, expected, name):
    if x.dim() != 4:
        raise ShapeError(f"{name}: expected a B x C x H x W feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{name}: expected {expected} input channels, got {x.shape[1]}")


class Conv(nn.Module):
    """Standard convolution: Conv2d -> BatchNorm2d -> SiLU."""

    def __init__(self, c1, c2, k=1, s=1, p=None, g=1, d=1, act=True):
        super().__init__()
        if k not in (1, 2, 3):
            raise ConfigError(f"Conv kernel must be 1, 2 or 3, got {k}")
        self.c1 = c1
        self.c2 = c2
        self.name = f"Conv({c1}->{c2}, k={k}, s={s})"
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k, p, d), groups=g, dilation=d, bias=False)
        self.bn = nn.BatchNorm2d(c2, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.act = nn.SiLU() if act is True else act if isinstance(act, nn.Module) else nn.Identity()

    def forward(self, x):
        check_channels(x, self.c1, self.name)
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c1, c2, shortcut=True, g=1, k=(3, 3), e=0.5):
        super().__init__()
        c_ = int(c2 * e)  # hidden channels
        self.cv1 = Conv(c1, c_, k[0], 1)
        self.cv2 = Conv(c_, c2, k[1], 1, g=g)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        return x + self.cv2(self.cv1(x)) if self.add else self.cv2(self.cv1(x))


class C2f(nn.Module):
    """
    Cross-stage block with two convolutions and n bottlenecks.

    The 1x1 input conv produces 2*c channels that are split in half; each
    bottleneck consumes the previous chunk, and the output conv fuses the
    two halves plus every bottleneck output ((2 + n) * c channels).
    """

    def __init__(self, c1, c2, n=1, shortcut=False, g=1, e=0.5):
        super().__init__()
        if c2 % 2:
            raise ConfigError(f"C2f output width {c2} is odd and cannot be split in half")
        if n < 1:
            raise ConfigError(f"C2f needs at least one bottleneck, got n={n}")
        self.c = int(c2 * e)  # hidden channels
        self.cv1 = Conv(c1, 2 * self.c, 1, 1)
        self.cv2 = Conv((2 + n) * self.c, c2, 1)
        self.m = nn.ModuleList(Bottleneck(self.c, self.c, shortcut, g, k=(3, 3), e=1.0) for _ in range(n))

    def forward(self, x):
        y = list(self.cv1(x).chunk(2, 1))
        y.extend(m(y[-1]) for m in self.m)
        return self.cv2(torch.cat(y, 1))


class SPPF(nn.Module):
    """Spatial pyramid pooling - fast, three stride-1 max-pools in sequence."""

    def __init__(self, c1, c2, k=5):
        super().__init__()
        c_ = c1 // 2  # hidden channels
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c_ * 4, c2, 1, 1)
        self.m = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        x = self.cv1(x)
        y1 = self.m(x)
        y2 = self.m(y1)
        return self.cv2(torch.cat((x, y1, y2, self.m(y2)), 1))


class AdaptiveConcat(nn.Module):
    """
    Gated fusion of a neck feature with the backbone feature of the same
    resolution.

    One learnable scalar w decides the branch. At eval the branch is hard:
    fuse_conv(concat) when logistic(w) > 0.5, else the neck feature
    unchanged. While training the two branches are interpolated by
    g = logistic(w) so that w receives a gradient. The output always has the
    neck feature's channel count.

    Args:
        ch (tuple[int, int]): Channels of (neck feature, backbone feature).
        level (str, default=""): Resolution level name used in errors.
        init_weight (float, default=5.0): Initial gate scalar.
    """

    def __init__(self, ch, level="", init_weight=INIT_GATE_WEIGHT):
        super().__init__()
        self.ch = tuple(ch)
        self.level = level
        self.weight = nn.Parameter(torch.tensor(float(init_weight)))
        self.fuse_conv = Conv(sum(self.ch), self.ch[0], 1, 1)

    def gate(self):
        return torch.sigmoid(self.weight)

    def is_concat(self):
        return bool(self.gate() > 0.5)

    def active_branch(self):
        return "concat" if self.is_concat() else "passthrough"

    def _check(self, x_neck, x_backbone):
        name = f"AdaptiveConcat[{self.level}]" if self.level else "AdaptiveConcat"
        check_channels(x_neck, self.ch[0], f"{name} neck input")
        check_channels(x_backbone, self.ch[1], f"{name} backbone input")
        if x_neck.shape[2:] != x_backbone.shape[2:]:
            raise ShapeError(f"{name}: neck feature {tuple(x_neck.shape[2:])} and backbone feature "
                             f"{tuple(x_backbone.shape[2:])} differ in spatial size")

    def forward(self, x_neck, x_backbone, mode=None):
        self._check(x_neck, x_backbone)
        if resolve_mode(self, mode) == "eval":
            if self.is_concat():
                return self.fuse_conv(torch.cat((x_neck, x_backbone), 1))
            return x_neck
        g = self.gate()
        return g * self.fuse_conv(torch.cat((x_neck, x_backbone), 1)) + (1 - g) * x_neck


class FixedConcat(nn.Module):
    """Always-concatenate fusion, the non-adaptive counterpart of AdaptiveConcat."""

    def __init__(self, ch, level=""):
        super().__init__()
        self.ch = tuple(ch)
        self.level = level
        self.fuse_conv = Conv(sum(self.ch), self.ch[0], 1, 1)

    def forward(self, x_neck, x_backbone, mode=None):
        if x_neck.shape[2:] != x_backbone.shape[2:]:
            raise ShapeError(f"FixedConcat[{self.level}]: neck feature {tuple(x_neck.shape[2:])} and backbone "
                             f"feature {tuple(x_backbone.shape[2:])} differ in spatial size")
        return self.fuse_conv(torch.cat((x_neck, x_backbone), 1))


class Detect(nn.Module):
    """
    Anchor-free decoupled detect head.

    Per scale, a box branch predicts 4 * reg_max distribution logits and a
    class branch predicts nc logits per cell. In train mode the forward
    returns one undecoded B x (4 * reg_max + nc) x H_i x W_i tensor per
    scale. In eval mode it returns one B x (4 + nc) x A tensor holding pixel
    xyxy boxes and class probabilities for all A cells of all scales.
    """

    def __init__(self, nc=1, ch=(), strides=(8, 16, 32), reg_max=16):
        super().__init__()
        if len(ch) != 3 or len(strides) != 3:
            raise ConfigError(f"Detect head needs exactly 3 input scales, got channels {tuple(ch)} "
                              f"and strides {tuple(strides)}")
        self.nc = nc  # number of classes
        self.nl = len(ch)  # number of detection layers
        self.reg_max = reg_max  # distribution bins per box side
        self.no = nc + self.reg_max * 4  # number of outputs per cell
        self.ch = tuple(ch)
        self.register_buffer("stride", torch.tensor(strides, dtype=torch.float32), persistent=False)
        c2, c3 = max((16, ch[0] // 4, self.reg_max * 4)), max(ch[0], self.nc)  # channels
        self.cv2 = nn.ModuleList(
            nn.Sequential(Conv(x, c2, 3), Conv(c2, c2, 3), nn.Conv2d(c2, 4 * self.reg_max, 1)) for x in ch)
        self.cv3 = nn.ModuleList(
            nn.Sequential(Conv(x, c3, 3), Conv(c3, c3, 3), nn.Conv2d(c3, self.nc, 1)) for x in ch)

    def forward(self, x, mode=None):
        if len(x) != self.nl:
            raise ShapeError(f"Detect: expected {self.nl} feature maps, got {len(x)}")
        out = [torch.cat((self.cv2[i](x[i]), self.cv3[i](x[i])), 1) for i in range(self.nl)]
        if resolve_mode(self, mode) == "train":
            return out

        from .postprocess import decode_predictions
        return decode_predictions(out, self.stride.tolist(), self.reg_max, self.nc)

    def bias_init(self, input_size=640):
        """Initial biases: box distributions flat-ish, class prior of a rare object."""
        for a, b, s in zip(self.cv2, self.cv3, self.stride.tolist()):
            a[-1].bias.data[:] = 1.0  # box
            b[-1].bias.data[:self.nc] = math.log(5 / self.nc / (input_size / s) ** 2)  # cls


class SegmentHead(nn.Module):
    """
    Lightweight segmentation head: mask = cv3(cv2(upsample(cv1(x)))).

    The single transposed convolution doubles the resolution, so a stride-2
    input yields full-resolution logits with nc + 1 channels (background
    first). The logistic squashing is left to the losses and postprocess,
    and the last conv block keeps its normalization but no activation so
    the logits are unbounded.

    Args:
        c1 (int): Input channels (the segmentation neck's stride-2 width).
        nc (int, default=1): Foreground classes.
        fd (int, default=32): Intermediate feature dimension.
    """

    def __init__(self, c1, nc=1, fd=SEGMENT_HEAD_FEATURES):
        super().__init__()
        self.c1 = c1
        self.nc = nc
        self.cv1 = Conv(c1, fd, 3)
        self.upsample = nn.ConvTranspose2d(fd, fd // 2, 2, 2, 0, bias=True)
        self.cv2 = Conv(fd // 2, fd // 4, 3)
        self.cv3 = Conv(fd // 4, nc + 1, 1, act=False)

    def forward(self, x):
        check_channels(x, self.c1, "SegmentHead")
        return self.cv3(self.cv2(self.upsample(self.cv1(x))))
