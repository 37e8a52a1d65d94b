"""Residual building blocks built around the context-aware star unit.

All blocks map (N, C, H, W) -> (N, C, H, W) and are the identity map when
their refinement convolution is zeroed.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-6
REFINE_INIT_STD = 0.02


def gelu(x):
    # exact erf form; the tanh approximation is too loose for finite-difference checks
    return F.gelu(x, approximate="none")


def init_refine_conv(conv):
    """Small-gain init for refinement convs so blocks start close to identity."""
    nn.init.normal_(conv.weight, std=REFINE_INIT_STD)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def layer_norm_channels(x, gain, bias, eps=LN_EPS):
    """Standardize the channel vector at every spatial location, then apply a
    per-channel affine.

    Uses the biased variance; a constant channel vector maps to zero (the eps
    floor keeps the division finite).
    """
    if x.shape[1] != gain.numel() or x.shape[1] != bias.numel():
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, "
            f"affine has {gain.numel()}/{bias.numel()}"
        )
    normed = F.layer_norm(x.permute(0, 2, 3, 1), gain.shape, gain, bias, eps)
    return normed.permute(0, 3, 1, 2)


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels, eps=LN_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm_channels(x, self.gain, self.bias, self.eps)


class ContextStarUnit(nn.Module):
    """Two-branch star unit: Conv1(x) * GELU(ConvDW(Conv1(x))).

    Branch A is a pointwise expansion; branch B adds a large depth-wise
    convolution before its activation so the element-wise product mixes
    neighbourhood context into the expanded feature space. Output has
    channels * expansion channels.
    """

    def __init__(self, channels, expansion=2, dw_kernel=7):
        super().__init__()
        hidden = channels * expansion
        self.pw_a = nn.Conv2d(channels, hidden, 1)
        self.pw_b = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(
            hidden, hidden, dw_kernel, padding=dw_kernel // 2, groups=hidden, bias=False
        )

    def forward(self, x_ln):
        return self.pw_a(x_ln) * gelu(self.dw(self.pw_b(x_ln)))


class ERSM(nn.Module):
    """Efficient residual star module: LN -> star unit -> GELU -> 3x3 refine + skip."""

    def __init__(self, channels, expansion=2, dw_kernel=7):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.csu = ContextStarUnit(channels, expansion, dw_kernel)
        self.refine = nn.Conv2d(channels * expansion, channels, 3, padding=1)
        init_refine_conv(self.refine)

    def forward(self, x):
        return x + self.refine(gelu(self.csu(self.norm(x))))


class DRSM(nn.Module):
    """Parameter-matched variant of ERSM with the depth-wise conv relocated.

    The star product is taken directly between the two pointwise branches
    (context-free, as in lightweight star blocks); the depth-wise convolution
    is applied after the product, before the activation and refinement. Holds
    exactly the same parameter tensors as ERSM.
    """

    def __init__(self, channels, expansion=2, dw_kernel=7):
        super().__init__()
        hidden = channels * expansion
        self.norm = ChannelLayerNorm(channels)
        self.pw_a = nn.Conv2d(channels, hidden, 1)
        self.pw_b = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(
            hidden, hidden, dw_kernel, padding=dw_kernel // 2, groups=hidden, bias=False
        )
        self.refine = nn.Conv2d(hidden, channels, 3, padding=1)
        init_refine_conv(self.refine)

    def forward(self, x):
        x_ln = self.norm(x)
        star = self.pw_a(x_ln) * gelu(self.pw_b(x_ln))
        return x + self.refine(gelu(self.dw(star)))


class PlainResidualBlock(nn.Module):
    """Baseline residual block: x + Conv3(GELU(Conv3(x))), channel-preserving."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)
        init_refine_conv(self.refine)

    def forward(self, x):
        return x + self.refine(gelu(self.conv1(x)))
