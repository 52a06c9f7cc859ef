"""Differentiable forward splatting.

World Gaussians are projected with the first-order pinhole Jacobian
(Sigma2D = J W Sigma3D W^T J^T plus a small isotropic dilation), globally
depth-sorted by camera-space z, and alpha-composited front to back with
per-pixel weights ``alpha_i * exp(-0.5 d^T Sigma2D^-1 d)``. Contributions
whose weight falls below ``weight_cutoff`` (default 1%) are dropped.

The whole forward is expressed as vectorized tensor ops over (splat, pixel)
pairs; ordering enters only through a stable sort, so autograd yields exact
analytic gradients for everything smooth and results are independent of any
internal parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .camera import Camera
from .splats import SplatSet, eval_sh, splat_world_state, triangle_frames

WEIGHT_CUTOFF = 0.01
DILATION = 0.3


@dataclass
class RenderExtras:
    weight_sum: torch.Tensor     # (H, W) accumulated compositing weights
    transmittance: torch.Tensor  # (H, W) remaining background transmittance
    n_pairs: int


def camera_tensors(camera: Camera, dtype, device=None):
    rot = torch.as_tensor(camera.rotation, dtype=dtype, device=device)
    t = torch.as_tensor(camera.translation, dtype=dtype, device=device)
    return rot, t


def render_splats(splats: SplatSet, vertices: torch.Tensor, triangles: torch.Tensor,
                  camera: Camera, height: int, width: int,
                  background: float | torch.Tensor = 1.0,
                  weight_cutoff: float = WEIGHT_CUTOFF, dilation: float = DILATION,
                  return_extras: bool = False):
    """Render to an (H, W, 3) image; optionally also return compositing extras."""
    dtype = splats.log_scale.dtype
    rot_wc, t_wc = camera_tensors(camera, dtype)
    bg = torch.as_tensor(background, dtype=dtype)
    if bg.ndim == 0:
        bg = bg.expand(3)
    image_bg = bg.expand(height, width, 3) if bg.ndim == 1 else bg

    frames = triangle_frames(vertices, triangles)
    means_w, rots_w, scales_w = splat_world_state(splats, frames)
    opacity = torch.sigmoid(splats.opacity_logit)

    p_cam = means_w @ rot_wc.T + t_wc
    z = p_cam[:, 2]
    vis = z > 1e-6
    if not bool(vis.any()):
        out = image_bg.clone()
        if return_extras:
            zero = torch.zeros(height, width, dtype=dtype)
            return out, RenderExtras(weight_sum=zero, transmittance=torch.ones_like(zero), n_pairs=0)
        return out

    means_w, rots_w, scales_w = means_w[vis], rots_w[vis], scales_w[vis]
    p_cam, z, opacity = p_cam[vis], z[vis], opacity[vis]
    sh = splats.sh[vis]
    n = z.shape[0]

    fx, fy, cx, cy = (float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy))
    u = fx * p_cam[:, 0] / z + cx
    v = fy * p_cam[:, 1] / z + cy

    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([fx / z, zero, -fx * p_cam[:, 0] / (z * z)], dim=1),
        torch.stack([zero, fy / z, -fy * p_cam[:, 1] / (z * z)], dim=1),
    ], dim=1)  # (n, 2, 3)
    m = jac @ rot_wc
    sigma3 = (rots_w * (scales_w ** 2)[:, None, :]) @ rots_w.transpose(1, 2)
    sigma2 = m @ sigma3 @ m.transpose(1, 2)
    a = sigma2[:, 0, 0] + dilation
    b = sigma2[:, 0, 1]
    c = sigma2[:, 1, 1] + dilation
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det

    # bounding radius of the g >= cutoff region along the widest 2D axis
    eig_max = 0.5 * (a + c) + torch.sqrt(0.25 * (a - c) ** 2 + b * b)
    n_sigma = 1.02 * (2.0 * torch.log(torch.tensor(1.0 / weight_cutoff, dtype=dtype))) ** 0.5
    radius = n_sigma * torch.sqrt(eig_max)

    with torch.no_grad():
        x_lo = torch.ceil(u - radius - 0.5).long().clamp(0, width - 1)
        x_hi = torch.floor(u + radius - 0.5).long().clamp(0, width - 1)
        y_lo = torch.ceil(v - radius - 0.5).long().clamp(0, height - 1)
        y_hi = torch.floor(v + radius - 0.5).long().clamp(0, height - 1)
        inside = (u + radius > 0) & (u - radius < width) & (v + radius > 0) & (v - radius < height)
        wbox = torch.where(inside, x_hi - x_lo + 1, torch.zeros_like(x_lo)).clamp_min(0)
        hbox = torch.where(inside, y_hi - y_lo + 1, torch.zeros_like(y_lo)).clamp_min(0)
        counts = wbox * hbox
        total = int(counts.sum())

    if total == 0:
        out = image_bg.clone()
        if return_extras:
            zeroimg = torch.zeros(height, width, dtype=dtype)
            return out, RenderExtras(weight_sum=zeroimg, transmittance=torch.ones_like(zeroimg), n_pairs=0)
        return out

    sp = torch.repeat_interleave(torch.arange(n), counts)
    start = torch.cumsum(counts, dim=0) - counts
    offset = torch.arange(total) - start[sp]
    local_w = wbox[sp]
    row = y_lo[sp] + offset // local_w
    col = x_lo[sp] + offset % local_w

    dx = (col.to(dtype) + 0.5) - u[sp]
    dy = (row.to(dtype) + 0.5) - v[sp]
    quad = inv_a[sp] * dx * dx + 2.0 * inv_b[sp] * dx * dy + inv_c[sp] * dy * dy
    g = torch.exp(-0.5 * quad)
    alpha = (opacity[sp] * g).clamp_max(1.0 - 1e-7)

    # contributions below 1% of full weight are dropped entirely, so fully
    # transparent splats are a dead branch with exactly zero gradient
    keep = alpha >= weight_cutoff
    sp, row, col, alpha = sp[keep], row[keep], col[keep], alpha[keep]
    if sp.numel() == 0:
        out = image_bg.clone()
        if return_extras:
            zeroimg = torch.zeros(height, width, dtype=dtype)
            return out, RenderExtras(weight_sum=zeroimg, transmittance=torch.ones_like(zeroimg), n_pairs=0)
        return out

    pixel = row * width + col

    # global front-to-back order: camera-space depth rank, stable under ties
    order = torch.argsort(z, stable=True)
    rank = torch.empty_like(order)
    rank[order] = torch.arange(n)
    key = pixel * n + rank[sp]
    sidx = torch.argsort(key, stable=True)
    pixel_s = pixel[sidx]
    alpha_s = alpha[sidx]
    sp_s = sp[sidx]

    log1m = torch.log1p(-alpha_s)
    inclusive = torch.cumsum(log1m, dim=0)
    exclusive = inclusive - log1m
    first = torch.ones_like(pixel_s, dtype=torch.bool)
    first[1:] = pixel_s[1:] != pixel_s[:-1]
    first_idx = torch.nonzero(first).squeeze(1)
    seg = torch.cumsum(first.long(), dim=0) - 1
    t_before = torch.exp(exclusive - exclusive[first_idx[seg]])
    weight = alpha_s * t_before

    cam_center = -(rot_wc.T @ t_wc)
    dirs_w = means_w - cam_center
    dirs_w = dirs_w / dirs_w.norm(dim=1, keepdim=True).clamp_min(1e-20)
    # view direction in each splat's own frame, so a joint rigid transform of
    # mesh and camera leaves view-dependent color unchanged
    dirs_local = torch.einsum("nji,nj->ni", rots_w, dirs_w)
    colors = eval_sh(splats.sh_degree, sh, dirs_local)

    flat = torch.zeros(height * width, 3, dtype=dtype)
    flat.index_add_(0, pixel_s, weight[:, None] * colors[sp_s])

    log_t_total = torch.zeros(height * width, dtype=dtype)
    log_t_total.index_add_(0, pixel_s, log1m)
    transmittance = torch.exp(log_t_total)

    image = flat.view(height, width, 3) + transmittance.view(height, width, 1) * image_bg

    if return_extras:
        wsum = torch.zeros(height * width, dtype=dtype)
        wsum.index_add_(0, pixel_s, weight)
        return image, RenderExtras(weight_sum=wsum.view(height, width),
                                   transmittance=transmittance.view(height, width),
                                   n_pairs=int(sp_s.numel()))
    return image
