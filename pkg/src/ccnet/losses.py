"""Dual-domain training loss and the PSNR/SSIM evaluation metrics."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossTerms:
    """Loss breakdown: total = spatial + lam * frequency."""

    spatial: torch.Tensor
    frequency: torch.Tensor
    lam: float
    total: torch.Tensor


def dual_domain_loss(pred, target, lam=0.1) -> LossTerms:
    """Pixel-space L1 plus lam-weighted L1 between per-channel 2-D DFTs.

    The complex L1 is taken over real and imaginary parts separately, which
    keeps the term subdifferentiable. Terms are summed over the output scales,
    each scale normalized by its own element count.
    """
    pred = tuple(pred)
    target = tuple(target)
    if len(pred) != len(target):
        raise ValueError(f"scale count mismatch: {len(pred)} vs {len(target)}")
    spatial = None
    frequency = None
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
        s = p.numel()
        term_s = (p - t).abs().sum() / s
        diff_f = torch.fft.fft2(p) - torch.fft.fft2(t)
        term_f = (diff_f.real.abs() + diff_f.imag.abs()).sum() / s
        spatial = term_s if spatial is None else spatial + term_s
        frequency = term_f if frequency is None else frequency + term_f
    total = spatial + lam * frequency
    return LossTerms(spatial=spatial, frequency=frequency, lam=lam, total=total)


def psnr(a, b, peak=1.0) -> float:
    """10*log10(peak^2 / MSE); +inf when the images are identical."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a - b) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    """Normalized 2-D Gaussian window."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0) -> float:
    """Mean local structural similarity over valid Gaussian windows.

    Computed per channel with an 11x11 Gaussian window (sigma 1.5) and
    averaged. Accepts (C, H, W) or (N, C, H, W) inputs.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    if a.dim() != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got {tuple(a.shape)}")
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} window")
    channels = a.shape[1]
    window = gaussian_window(window_size, sigma, dtype=a.dtype).to(a.device)
    window = window.expand(channels, 1, window_size, window_size)

    def local_mean(x):
        return F.conv2d(x, window, groups=channels)

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return score.mean().item()
