"""Loss stack for avatar fitting.

The photometric term blends the base splatting loss (0.8 L1 + 0.2 (1-SSIM))
with a pluggable perceptual term whose weight ramps linearly over training.
The default perceptual proxy needs no pretrained network: an L1 distance
between gradient-magnitude images over a 3-level pyramid. Regularizers keep
splats near their initialization, bound their size and offset, smooth the
deformation map and decay the field weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .splats import SplatSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class AvatarLossWeights:
    lambda_deform: float = 0.4
    lambda_rot: float = 0.005
    lambda_lpips_start: float = 0.0
    lambda_lpips_end: float = 0.9
    lambda_lap: float = 0.1
    field_weight_decay: float = 2e-3
    tau_scale: float = 0.6   # hinge threshold on linear scale, local units
    tau_position: float = 1.0  # hinge threshold on local offset norm

    def lpips_at(self, iteration: int, total_iterations: int) -> float:
        if total_iterations <= 1:
            return self.lambda_lpips_start
        f = iteration / (total_iterations - 1)
        return self.lambda_lpips_start + (self.lambda_lpips_end - self.lambda_lpips_start) * f


def _gaussian_kernel(dtype) -> torch.Tensor:
    half = SSIM_WINDOW // 2
    x = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of two (H, W, 3) images in [0, 1]; same-size output."""
    kernel = _gaussian_kernel(a.dtype).expand(3, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]

    def blur(img):
        return F.conv2d(img, kernel, padding=pad, groups=3)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x ** 2
    sigma_y = blur(y * y) - mu_y ** 2
    sigma_xy = blur(x * y) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2))
    return out[0].mean(dim=0)


def _masked_mean(values: torch.Tensor, pixel_mask: torch.Tensor | None) -> torch.Tensor:
    if pixel_mask is None:
        return values.mean()
    if not bool(pixel_mask.any()):
        raise ValueError("pixel mask excludes every pixel")
    while pixel_mask.dim() < values.dim():
        pixel_mask = pixel_mask[..., None]
    m = pixel_mask.expand_as(values)
    return values[m].mean()


def base_photometric(rendered: torch.Tensor, target: torch.Tensor,
                     pixel_mask: torch.Tensor | None = None) -> torch.Tensor:
    l1 = _masked_mean((rendered - target).abs(), pixel_mask)
    ssim = _masked_mean(ssim_map(rendered, target), pixel_mask)
    return 0.8 * l1 + 0.2 * (1.0 - ssim)


def _gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
    """(1, C, H, W) -> (1, C, H-1, W-1) forward-difference gradient magnitude."""
    dx = img[..., :-1, 1:] - img[..., :-1, :-1]
    dy = img[..., 1:, :-1] - img[..., :-1, :-1]
    return torch.sqrt(dx * dx + dy * dy + 1e-12)


def gradient_magnitude_l1(rendered: torch.Tensor, target: torch.Tensor,
                          levels: int = 3) -> torch.Tensor:
    """Perceptual proxy: L1 between gradient-magnitude images over a 3-level
    pyramid (no pretrained network involved)."""
    x = rendered.permute(2, 0, 1)[None]
    y = target.permute(2, 0, 1)[None]
    total = rendered.new_zeros(())
    for level in range(levels):
        total = total + (_gradient_magnitude(x) - _gradient_magnitude(y)).abs().mean()
        if level < levels - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    return total / levels


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, lambda_lpips: float,
                     perceptual: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
                     pixel_mask: torch.Tensor | None = None) -> torch.Tensor:
    """lambda * perceptual + (1 - lambda) * (0.8 L1 + 0.2 (1 - SSIM)).

    The perceptual branch is not evaluated at lambda == 0.
    """
    if rendered.shape != target.shape:
        raise ValueError("rendered and target shapes differ")
    if not 0.0 <= lambda_lpips <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    base = base_photometric(rendered, target, pixel_mask)
    if lambda_lpips == 0.0:
        return base
    fn = perceptual if perceptual is not None else gradient_magnitude_l1
    return lambda_lpips * fn(rendered, target) + (1.0 - lambda_lpips) * base


@dataclass
class SplatInitState:
    """Reference state the deform/rotation regularizers pull toward."""

    local_pos: torch.Tensor
    rotation: torch.Tensor

    @staticmethod
    def of(splats: SplatSet) -> "SplatInitState":
        return SplatInitState(local_pos=splats.local_pos.detach().clone(),
                              rotation=splats.rotation.detach().clone())


def quat_angle_sq(q: torch.Tensor, q0: torch.Tensor) -> torch.Tensor:
    """Squared geodesic angle between unit quaternions, stable at zero."""
    qn = q / q.norm(dim=1, keepdim=True).clamp_min(1e-20)
    q0n = q0 / q0.norm(dim=1, keepdim=True).clamp_min(1e-20)
    c = (qn * q0n).sum(dim=1).abs().clamp(max=1.0)
    s2 = (1.0 - c * c).clamp_min(0.0)
    angle = 2.0 * torch.atan2(torch.sqrt(s2 + 1e-24), c)
    return angle * angle


def regularizer_losses(splats: SplatSet, init: SplatInitState,
                       d_uv: torch.Tensor | None, field,
                       weights: AvatarLossWeights) -> dict[str, torch.Tensor]:
    """All regularizer terms, unweighted except the fixed weight decay."""
    any_param = splats.local_pos
    zero = any_param.new_zeros(())
    out: dict[str, torch.Tensor] = {}

    out["deform"] = ((splats.local_pos - init.local_pos) ** 2).sum(dim=1).mean()
    out["rot"] = quat_angle_sq(splats.rotation, init.rotation).mean()

    lin_scale = torch.exp(splats.log_scale)
    out["scaling"] = (F.relu(lin_scale - weights.tau_scale) ** 2).sum(dim=1).mean()
    offset = torch.sqrt((splats.local_pos ** 2).sum(dim=1) + 1e-24)
    out["position"] = (F.relu(offset - weights.tau_position) ** 2).mean()

    if d_uv is not None:
        lap = (-4.0 * d_uv[1:-1, 1:-1] + d_uv[:-2, 1:-1] + d_uv[2:, 1:-1]
               + d_uv[1:-1, :-2] + d_uv[1:-1, 2:])
        out["lap"] = (lap ** 2).mean()
    else:
        out["lap"] = zero

    if field is not None:
        decay = zero
        for p in field.parameters():
            decay = decay + (p ** 2).sum()
        out["weight_decay"] = weights.field_weight_decay * decay
    else:
        out["weight_decay"] = zero
    return out


def total_loss(rendered: torch.Tensor, target: torch.Tensor, splats: SplatSet,
               init: SplatInitState, weights: AvatarLossWeights,
               lambda_lpips: float = 0.0, d_uv: torch.Tensor | None = None,
               field=None,
               perceptual: Callable | None = None,
               pixel_mask: torch.Tensor | None = None):
    """Weighted sum of all terms; returns (total, components) with components
    reported unweighted for logging."""
    comps: dict[str, torch.Tensor] = {}
    comps["rgb"] = photometric_loss(rendered, target, lambda_lpips, perceptual, pixel_mask)
    comps.update(regularizer_losses(splats, init, d_uv, field, weights))
    total = (comps["rgb"]
             + weights.lambda_deform * comps["deform"]
             + weights.lambda_rot * comps["rot"]
             + comps["scaling"]
             + comps["position"]
             + weights.lambda_lap * comps["lap"]
             + comps["weight_decay"])
    return total, comps


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)
