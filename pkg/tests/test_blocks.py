from PanopticRoad.blocks import AdaptiveConcat, C2f, Conv, Detect, FixedConcat, SegmentHead, SPPF
from PanopticRoad.errors import ConfigError, ShapeError
import torch.nn as nn
import pytest
import torch
import math


def n_params(module):
    return sum(p.numel() for p in module.parameters())


def test_conv_parameter_count():
    assert n_params(Conv(16, 32, 3)) == 16 * 32 * 9 + 2 * 32


def test_conv_identity_weights_reproduce_input():
    conv = Conv(4, 4, 1, act=False).eval()
    with torch.no_grad():
        conv.conv.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
        conv.bn.running_var.fill_(1 - 1e-3)
    x = torch.randn(2, 4, 5, 5)
    assert torch.allclose(conv(x), x, atol=1e-6)


def test_conv_rejects_unsupported_kernel_and_wrong_channels():
    with pytest.raises(ConfigError):
        Conv(3, 8, 5)
    with pytest.raises(ShapeError):
        Conv(3, 8, 3)(torch.zeros(1, 4, 8, 8))


def test_c2f_fuses_every_bottleneck_output():
    block = C2f(64, 64, n=2)
    assert block.cv2.conv.in_channels == 128
    assert block(torch.randn(1, 64, 8, 8)).shape == (1, 64, 8, 8)


def test_c2f_rejects_odd_width():
    with pytest.raises(ConfigError):
        C2f(8, 7)


def test_sppf_pool_spreads_single_peak_to_5x5_plateau():
    sppf = SPPF(8, 8)
    x = torch.zeros(1, 1, 11, 11)
    x[0, 0, 5, 5] = 1.0
    y = sppf.m(x)[0, 0]
    assert int((y == 1).sum()) == 25
    assert bool((y[3:8, 3:8] == 1).all())
    assert sppf(torch.randn(1, 8, 6, 6)).shape == (1, 8, 6, 6)


def test_fresh_gate_takes_concat_branch():
    acm = AdaptiveConcat((8, 4)).eval()
    assert float(acm.weight) == 5.0
    assert float(acm.gate()) == pytest.approx(0.99331, abs=1e-5)
    assert acm.active_branch() == "concat"
    x_neck, x_backbone = torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4)
    expected = acm.fuse_conv(torch.cat((x_neck, x_backbone), 1))
    assert torch.equal(acm(x_neck, x_backbone), expected)


def test_soft_gate_with_zero_fuse_conv_scales_neck_feature():
    acm = AdaptiveConcat((8, 4), init_weight=-5.0).eval()
    nn.init.zeros_(acm.fuse_conv.conv.weight)
    x_neck, x_backbone = torch.randn(2, 8, 4, 4), torch.randn(2, 4, 4, 4)
    out = acm(x_neck, x_backbone, mode="train")
    assert torch.allclose(out, (1 - 0.0066929) * x_neck, atol=1e-5)


def test_eval_branch_switches_exactly_at_half():
    acm = AdaptiveConcat((8, 4)).eval()
    x_neck, x_backbone = torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4)
    with torch.no_grad():
        acm.weight.fill_(0.0)
        assert torch.equal(acm(x_neck, x_backbone), x_neck)
        assert acm.active_branch() == "passthrough"
        acm.weight.fill_(1e-4)
        assert not torch.equal(acm(x_neck, x_backbone), x_neck)
        assert acm.active_branch() == "concat"


def test_train_output_is_continuous_in_gate_weight():
    acm = AdaptiveConcat((8, 4)).eval()
    x_neck, x_backbone = torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4)
    outputs = []
    with torch.no_grad():
        for k in range(-20, 21):
            acm.weight.fill_(k * 1e-6)
            outputs.append(acm(x_neck, x_backbone, mode="train"))
        jumps = [float((b - a).abs().max()) for a, b in zip(outputs, outputs[1:])]
        assert max(jumps) < 1e-5

        acm.weight.fill_(-1e-6)
        below = acm(x_neck, x_backbone, mode="eval")
        acm.weight.fill_(1e-6)
        above = acm(x_neck, x_backbone, mode="eval")
    assert float((above - below).abs().max()) > 1e-3


def test_gate_weight_receives_gradient_in_train_mode():
    acm = AdaptiveConcat((8, 4))
    acm(torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4)).sum().backward()
    assert acm.weight.grad is not None
    assert float(acm.weight.grad.abs()) > 0


def test_fusion_rejects_mismatched_inputs():
    acm = AdaptiveConcat((8, 4), level="P2/stride 4")
    with pytest.raises(ShapeError, match="P2/stride 4"):
        acm(torch.randn(1, 8, 4, 4), torch.randn(1, 4, 8, 8))
    with pytest.raises(ShapeError):
        acm(torch.randn(1, 6, 4, 4), torch.randn(1, 4, 4, 4))
    with pytest.raises(ShapeError):
        FixedConcat((8, 4))(torch.randn(1, 8, 4, 4), torch.randn(1, 4, 2, 2))


def test_fixed_concat_always_concatenates():
    fusion = FixedConcat((8, 4)).eval()
    assert not any(isinstance(p, nn.Parameter) and p.dim() == 0 for p in fusion.parameters())
    x_neck, x_backbone = torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4)
    assert torch.equal(fusion(x_neck, x_backbone), fusion.fuse_conv(torch.cat((x_neck, x_backbone), 1)))


def test_detect_grid_sizes_for_640_input():
    head = Detect(nc=1, ch=(16, 32, 64))
    feats = [torch.randn(1, 16, 80, 80), torch.randn(1, 32, 40, 40), torch.randn(1, 64, 20, 20)]
    raw = head(feats, mode="train")
    assert [tuple(x.shape) for x in raw] == [(1, 68, 80, 80), (1, 68, 40, 40), (1, 68, 20, 20)]
    decoded = head.eval()(feats)
    assert decoded.shape == (1, 5, 8400)
    assert bool(((decoded[:, 4] >= 0) & (decoded[:, 4] <= 1)).all())


def test_detect_class_bias_prior():
    head = Detect(nc=1, ch=(16, 32, 64))
    head.bias_init(640)
    assert float(head.cv3[0][-1].bias[0]) == pytest.approx(math.log(5 / (640 / 8) ** 2))


def test_segment_head_parameters_and_output():
    head = SegmentHead(16, nc=1)
    assert n_params(head) == 7924
    out = head(torch.randn(2, 16, 32, 32))
    assert out.shape == (2, 2, 64, 64)
    with pytest.raises(ShapeError):
        head(torch.randn(2, 8, 32, 32))


def test_segment_head_logits_are_unbounded():
    head = SegmentHead(16).eval()
    with torch.no_grad():
        head.cv3.bn.bias.fill_(-50.0)
    assert float(head(torch.randn(1, 16, 8, 8)).max()) < -1.0
