"""Backbone tests: shape ladder, global residual, parameter/MAC accounting."""

from dataclasses import replace

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from ccnet.backbone import (
    TASK_BLOCKS,
    ModelConfig,
    build_model,
    count_macs,
    count_parameters,
    forward_multiscale,
    multiscale_targets,
)
from ccnet.strip_attention import StripStage

DESK = ModelConfig(base_channels=8, blocks_per_scale=2)
TINY = ModelConfig(base_channels=4, blocks_per_scale=1, block_type="plain", use_ldim=False)


class TestShapesAndResiduals:
    def test_three_output_shapes(self):
        model = build_model(TINY, seed=0)
        out = model(torch.rand(1, 3, 64, 64))
        assert out.full.shape == (1, 3, 64, 64)
        assert out.half.shape == (1, 3, 32, 32)
        assert out.quarter.shape == (1, 3, 16, 16)

    def test_fresh_model_is_identity_restoration(self):
        # heads are zero-initialized, so the untrained network passes inputs through
        model = build_model(DESK, seed=1)
        x = torch.rand(2, 3, 32, 32)
        out = model(x)
        half = F.avg_pool2d(x, 2)
        assert torch.equal(out.full, x)
        assert torch.equal(out.half, half)
        assert torch.equal(out.quarter, F.avg_pool2d(half, 2))
        assert (out.quarter - F.avg_pool2d(x, 4)).abs().max().item() <= 1e-6

    def test_all_zero_parameters_still_identity(self):
        model = build_model(DESK, seed=2)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        x = torch.rand(1, 3, 32, 32)
        out = model(x)
        assert torch.equal(out.full, x)

    def test_indivisible_input_rejected(self):
        model = build_model(TINY, seed=3)
        with pytest.raises(ValueError, match="divisible"):
            model(torch.rand(1, 3, 30, 64))

    def test_forward_deterministic(self):
        model = build_model(DESK, seed=4)
        x = torch.rand(1, 3, 32, 32)
        a = forward_multiscale(model, x)
        b = forward_multiscale(model, x)
        assert torch.equal(a.full, b.full)
        assert torch.equal(a.half, b.half)
        assert torch.equal(a.quarter, b.quarter)

    def test_bottleneck_shape(self):
        model = build_model(DESK, seed=5)
        captured = {}

        def hook(mod, inputs, output):
            captured["shape"] = tuple(output.shape)

        model.enc_stages[2].register_forward_hook(hook)
        model(torch.rand(1, 3, 64, 64))
        assert captured["shape"] == (1, 4 * DESK.base_channels, 16, 16)

    def test_skip_pairing_same_resolution(self):
        model = build_model(DESK, seed=6)
        seen = []

        def hook(mod, inputs, output):
            seen.append((tuple(inputs[0].shape), tuple(output.shape)))

        for fuse in model.skip_fuse:
            fuse.register_forward_hook(hook)
        c = DESK.base_channels
        model(torch.rand(1, 3, 64, 64))
        assert seen[0] == ((1, 4 * c, 32, 32), (1, 2 * c, 32, 32))
        assert seen[1] == ((1, 2 * c, 64, 64), (1, c, 64, 64))

    def test_multiscale_targets_match_head_shapes(self):
        clean = torch.rand(2, 3, 64, 64)
        targets = multiscale_targets(clean)
        assert targets.full.shape == (2, 3, 64, 64)
        assert targets.half.shape == (2, 3, 32, 32)
        assert targets.quarter.shape == (2, 3, 16, 16)


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        model = build_model(replace(TINY, block_type="ersm", use_ldim=True), seed=7)
        # randomize the zero-initialized heads; behind zero heads the trunk is cut off
        with torch.no_grad():
            for head in model.heads:
                nn.init.normal_(head.weight, std=0.05)
                nn.init.normal_(head.bias, std=0.05)
        x = torch.rand(2, 3, 16, 16)
        out = model(x)
        loss = sum(o.abs().sum() for o in out)
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().sum().item() > 0.0, name


class TestConfig:
    def test_validation_errors(self):
        with pytest.raises(ValueError):
            ModelConfig(base_channels=0).validate()
        with pytest.raises(ValueError):
            ModelConfig(block_type="dense").validate()
        with pytest.raises(ValueError):
            ModelConfig(strip_sizes=(4,)).validate()
        with pytest.raises(ValueError):
            ModelConfig(dw_kernel=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(blocks_per_scale=0).validate()

    def test_task_block_counts(self):
        assert TASK_BLOCKS == {"dehaze": 3, "deblur": 15, "desnow": 5}

    def test_scale_widths_ladder(self):
        assert ModelConfig(base_channels=8).scale_widths() == [8, 16, 32]


class TestCounting:
    def test_single_conv_parameter_count(self):
        conv = nn.Conv2d(3, 4, 3)
        assert sum(p.numel() for p in conv.parameters()) == 3 * 4 * 9 + 4 == 112

    def test_parameter_parity_ersm_drsm(self):
        cfg = replace(DESK, block_type="ersm")
        a = count_parameters(build_model(cfg, seed=8))
        b = count_parameters(build_model(replace(cfg, block_type="drsm"), seed=9))
        assert a == b

    def test_ldim_adds_parameters(self):
        base = count_parameters(build_model(replace(DESK, block_type="plain", use_ldim=False), seed=10))
        with_ldim = count_parameters(build_model(replace(DESK, block_type="plain", use_ldim=True), seed=11))
        assert with_ldim > base

    def test_macs_pointwise_closed_form(self):
        class Wrap(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = nn.Conv2d(8, 8, 1, bias=False)

            def forward(self, x):
                return self.conv(x)

        assert count_macs(Wrap(), 16, 16, in_channels=8) == 8 * 8 * 16 * 16

    def test_macs_strip_stage_closed_form(self):
        stage = StripStage(6, 7, "horizontal", 1)
        macs = count_macs(stage, 12, 12, in_channels=6)
        gather = 7 * 6 * 12 * 12
        generator = 7 * 6 * 12 * 12  # 1x1 conv from 6 channels to 7 logits
        assert macs == gather + generator

    def test_macs_depthwise_closed_form(self):
        class Wrap(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = nn.Conv2d(8, 8, 7, padding=3, groups=8, bias=False)

            def forward(self, x):
                return self.conv(x)

        assert count_macs(Wrap(), 10, 10, in_channels=8) == 8 * 1 * 49 * 10 * 10

    def test_macs_scale_linearly_with_pixels(self):
        model = build_model(DESK, seed=12)
        assert count_macs(model, 64, 64) * 4 == count_macs(model, 128, 128)

    def test_rsam_backbone_builds(self):
        cfg = replace(TINY, block_type="rsam", strip_sizes=(3, 5))
        model = build_model(cfg, seed=13)
        out = model(torch.rand(1, 3, 16, 16))
        assert out.full.shape == (1, 3, 16, 16)
