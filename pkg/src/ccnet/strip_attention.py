"""Dynamic strip attention: per-pixel learned K-tap weighted averages along an
image axis, optionally dilated, composed into large-receptive-field modules.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def _check_strip_size(k):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"strip size must be an odd positive integer, got {k}")


def dilation_rate(k):
    """Dilation used by the dilated stage for strip size k."""
    _check_strip_size(k)
    return (k + 1) // 2


def receptive_extent(k):
    """1-D impulse-response extent of a dense stage followed by a dilated stage."""
    return k + dilation_rate(k) * (k - 1)


def strip_apply(x, weights, axis, dilation=1):
    """Per-pixel weighted sum of K zero-padded taps along one axis.

    out[n,c,h,w] = sum_k weights[n,k,h,w] * x[n,c,...] where tap k sits
    (k - K//2) * dilation positions away along the chosen axis. Weights are
    shared across the channels of x; out-of-range taps read as zero.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if axis not in (HORIZONTAL, VERTICAL):
        raise ValueError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")
    k = weights.shape[1]
    _check_strip_size(k)
    n, c, h, w = x.shape
    pad = (k // 2) * dilation
    if axis == HORIZONTAL:
        padded = F.pad(x, (pad, pad, 0, 0))
        taps = [padded[:, :, :, o : o + w] for o in range(0, k * dilation, dilation)]
    else:
        padded = F.pad(x, (0, 0, pad, pad))
        taps = [padded[:, :, o : o + h, :] for o in range(0, k * dilation, dilation)]
    return (torch.stack(taps, dim=1) * weights.unsqueeze(2)).sum(dim=1)


class StripWeightGenerator(nn.Module):
    """Pointwise conv from the group's channels to K logits, softmax over taps.

    Softmax keeps each output a convex combination of the (zero-padded) strip
    samples, so every stage is bounded by the input range.
    """

    def __init__(self, channels, k):
        super().__init__()
        _check_strip_size(k)
        self.k = k
        self.proj = nn.Conv2d(channels, k, 1)

    def forward(self, x):
        return torch.softmax(self.proj(x), dim=1)


def generate_strip_weights(x, generator):
    """Per-pixel tap weights for x, shape (N, K, H, W), summing to 1 over K."""
    return generator(x)


class StripStage(nn.Module):
    """One attention stage: weights generated from the input, then applied."""

    def __init__(self, channels, k, axis, dilation):
        super().__init__()
        self.axis = axis
        self.dilation = dilation
        self.gen = StripWeightGenerator(channels, k)

    @property
    def k(self):
        return self.gen.k

    def forward(self, x):
        return strip_apply(x, self.gen(x), self.axis, self.dilation)


class LDSI(nn.Module):
    """Large dynamic strip integration along one axis.

    A dense stage (dilation 1) feeds a dilated stage (dilation (k+1)//2), each
    with its own freshly generated weights; the composition covers
    receptive_extent(k) consecutive positions along the axis.
    """

    def __init__(self, channels, k, axis):
        super().__init__()
        self.sa = StripStage(channels, k, axis, 1)
        self.dsa = StripStage(channels, k, axis, dilation_rate(k))

    def forward(self, x):
        return self.dsa(self.sa(x))


def split_channels(channels, n_groups):
    """Near-even split; earlier groups absorb the remainder."""
    base, extra = divmod(channels, n_groups)
    splits = [base + (1 if i < extra else 0) for i in range(n_groups)]
    if min(splits) < 1:
        raise ValueError(f"cannot split {channels} channels into {n_groups} groups")
    return splits


class LDIM(nn.Module):
    """Large dynamic integration module.

    Splits channels into groups, sweeps each group horizontally then
    vertically with its own strip size, concatenates the groups back and adds
    the input. Multi-scale strip sizes across groups give mixed receptive
    fields within one module.
    """

    def __init__(self, channels, strip_sizes=(7, 11)):
        super().__init__()
        self.channels = channels
        self.strip_sizes = tuple(strip_sizes)
        self.splits = split_channels(channels, len(self.strip_sizes))
        self.h_paths = nn.ModuleList(
            LDSI(ch, k, HORIZONTAL) for ch, k in zip(self.splits, self.strip_sizes)
        )
        self.v_paths = nn.ModuleList(
            LDSI(ch, k, VERTICAL) for ch, k in zip(self.splits, self.strip_sizes)
        )

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        parts = torch.split(x, self.splits, dim=1)
        swept = [
            v_path(h_path(part))
            for part, h_path, v_path in zip(parts, self.h_paths, self.v_paths)
        ]
        return x + torch.cat(swept, dim=1)
