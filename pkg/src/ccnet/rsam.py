"""Residual star attention module: star unit + strip integration under one skip."""

import torch.nn as nn

from .blocks import ChannelLayerNorm, ContextStarUnit, gelu, init_refine_conv
from .strip_attention import LDIM


class RSAM(nn.Module):
    """x + Conv3(LDIM(GELU(CSU(LN(x))))), projecting back to the input width.

    Combines the high-dimensional star mapping with the large dynamic
    receptive field in a single residual block. Not part of the default
    backbone; selectable via block_type="rsam".
    """

    def __init__(self, channels, expansion=2, dw_kernel=7, strip_sizes=(7, 11)):
        super().__init__()
        hidden = channels * expansion
        self.norm = ChannelLayerNorm(channels)
        self.csu = ContextStarUnit(channels, expansion, dw_kernel)
        self.ldim = LDIM(hidden, strip_sizes)
        self.refine = nn.Conv2d(hidden, channels, 3, padding=1)
        init_refine_conv(self.refine)

    def forward(self, x):
        return x + self.refine(self.ldim(gelu(self.csu(self.norm(x)))))
