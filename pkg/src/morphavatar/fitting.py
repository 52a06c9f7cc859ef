"""Gradient-based avatar fitting and finite-difference verification.

The optimizer walks random training views, renders the triangle-bound splats
over the deformed UV mesh and descends the full loss with Adam. Analytic
gradients come from reverse-mode differentiation of the hand-written forward
math (projection, binding, deformation, compositing); ``gradient_check``
verifies them against central finite differences in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera
from .deformation import MlpDeformationField, apply_deformation, deformation_inputs
from .errors import FitDivergenceError
from .losses import AvatarLossWeights, SplatInitState, total_loss
from .morphable import MorphableModel, UvMesh, evaluate_uv_vertices
from .splat_render import render_splats
from .splats import SplatSet, init_splats


@dataclass
class TrainView:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    camera: Camera
    beta: np.ndarray
    phi: np.ndarray


@dataclass
class FitConfig:
    iterations: int = 2000
    n_splats: int = 2000
    sh_degree: int = 1
    seed: int = 0
    background: float = 1.0
    views_per_iteration: int = 1
    lr_position: float = 2e-3
    lr_position_end: float = 2e-4  # exponential decay target over the run
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 5e-3
    lr_opacity: float = 5e-2
    field_lr_start: float = 1e-5
    field_lr_end: float = 1e-7
    weights: AvatarLossWeights = dataclass_field(default_factory=AvatarLossWeights)
    densify_interval: int = 0      # 0 disables densification/pruning
    densify_until: float = 0.6     # fraction of the run after which topology freezes
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.02
    max_splats: int = 20000
    dtype: str = "float64"

    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def field_lr_at(self, iteration: int) -> float:
        """Logarithmic decay between the configured endpoints."""
        return _log_decay(self.field_lr_start, self.field_lr_end, iteration, self.iterations)

    def position_lr_at(self, iteration: int) -> float:
        return _log_decay(self.lr_position, self.lr_position_end, iteration, self.iterations)


def _log_decay(start: float, end: float, iteration: int, total: int) -> float:
    if total <= 1 or start == 0.0:
        return start
    return start * (end / start) ** (iteration / (total - 1))


@dataclass
class FitResult:
    splats: SplatSet
    field: MlpDeformationField
    init_state: SplatInitState
    history: list[dict]


def _make_optimizer(splats: SplatSet, field, config: FitConfig):
    groups = [
        {"params": [splats.local_pos], "lr": config.lr_position, "name": "position"},
        {"params": [splats.log_scale], "lr": config.lr_scale, "name": "scale"},
        {"params": [splats.rotation], "lr": config.lr_rotation, "name": "rotation"},
        {"params": [splats.sh], "lr": config.lr_sh, "name": "sh"},
        {"params": [splats.opacity_logit], "lr": config.lr_opacity, "name": "opacity"},
    ]
    if field is not None:
        groups.append({"params": list(field.parameters()),
                       "lr": config.field_lr_start, "name": "field"})
    return torch.optim.Adam(groups, eps=1e-15)


def fit_avatar(model: MorphableModel, uv_mesh: UvMesh, views: list[TrainView],
               config: FitConfig, field: MlpDeformationField | None = None,
               splats: SplatSet | None = None,
               log_every: int = 0) -> FitResult:
    """Fit splats plus deformation field to the training views.

    Raises FitDivergenceError (with a diagnostic dump attached) if the loss
    turns non-finite. A zero-iteration run returns the initialization.
    """
    if not views:
        raise ValueError("at least one training view is required")
    dtype = config.torch_dtype()
    beta0 = views[0].beta

    tris = torch.as_tensor(uv_mesh.triangles, dtype=torch.int64)
    static = torch.as_tensor(uv_mesh.static_mask)
    neutral = evaluate_uv_vertices(model, uv_mesh, beta0, np.zeros(model.k_expr))

    if splats is None:
        splats = init_splats(neutral, uv_mesh.triangles, config.n_splats,
                             seed=config.seed, sh_degree=config.sh_degree, dtype=dtype)
    if field is None:
        field = MlpDeformationField(dtype=dtype, seed=config.seed)
    init_state = SplatInitState.of(splats)
    splats.requires_grad_(True)

    res = uv_mesh.resolution
    bases, offmaps, targets = [], [], []
    encoding = None
    for view in views:
        base = evaluate_uv_vertices(model, uv_mesh, view.beta, view.phi)
        bases.append(torch.as_tensor(base, dtype=dtype))
        off, enc = deformation_inputs(model, uv_mesh, view.phi)
        offmaps.append(torch.as_tensor(off, dtype=dtype))
        if encoding is None:
            encoding = torch.as_tensor(enc, dtype=dtype)
        targets.append(torch.as_tensor(view.image, dtype=dtype))

    optimizer = _make_optimizer(splats, field, config)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    grad_accum = torch.zeros(splats.n_splats, dtype=dtype)
    grad_count = 0
    epoch_order: list[int] = []

    for it in range(config.iterations):
        lam = config.weights.lpips_at(it, config.iterations)
        for group in optimizer.param_groups:
            if group.get("name") == "field":
                group["lr"] = config.field_lr_at(it)
            elif group.get("name") == "position":
                group["lr"] = config.position_lr_at(it)

        picked = []
        for _ in range(min(config.views_per_iteration, len(views))):
            if not epoch_order:  # visit every view once per shuffled epoch
                epoch_order = rng.permutation(len(views)).tolist()
            picked.append(int(epoch_order.pop()))

        loss = None
        comps = None
        for vi in picked:
            view = views[vi]
            d_uv = field(offmaps[vi], encoding)
            verts = apply_deformation(bases[vi], d_uv, static)
            h, w = view.image.shape[:2]
            rendered = render_splats(splats, verts, tris, view.camera, h, w,
                                     background=config.background)
            one, c = total_loss(rendered, targets[vi], splats, init_state,
                                config.weights, lambda_lpips=lam, d_uv=d_uv, field=field)
            loss = one if loss is None else loss + one
            comps = c if comps is None else {k: comps[k] + c[k] for k in comps}
        loss = loss / len(picked)
        comps = {k: v / len(picked) for k, v in comps.items()}
        vi = picked[0]
        if not torch.isfinite(loss):
            raise FitDivergenceError(
                f"non-finite loss at iteration {it}",
                diagnostics={
                    "iteration": it,
                    "components": {k: float(v.detach()) for k, v in comps.items()},
                    "max_abs_position": float(splats.local_pos.detach().abs().max()),
                    "max_abs_log_scale": float(splats.log_scale.detach().abs().max()),
                    "view": vi,
                })

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if splats.local_pos.grad is not None:
            grad_accum += splats.local_pos.grad.detach().norm(dim=1)
            grad_count += 1
        optimizer.step()
        splats.renormalize_()

        row = {"iteration": it, "total": float(loss.detach()), "lambda_lpips": lam,
               "view": vi}
        row.update({k: float(v.detach()) for k, v in comps.items()})
        history.append(row)
        if log_every and it % log_every == 0:
            print(f"iter {it:5d} loss {float(loss):.5f} rgb {float(comps['rgb']):.5f}")

        if (config.densify_interval > 0 and it < config.densify_until * config.iterations
                and (it + 1) % config.densify_interval == 0 and grad_count > 0):
            splats, init_state, changed = densify_and_prune(
                splats, init_state, grad_accum / grad_count, config)
            if changed:
                optimizer = _make_optimizer(splats, field, config)
            grad_accum = torch.zeros(splats.n_splats, dtype=dtype)
            grad_count = 0

    return FitResult(splats=splats, field=field, init_state=init_state, history=history)


def densify_and_prune(splats: SplatSet, init_state: SplatInitState,
                      grad_norm: torch.Tensor, config: FitConfig):
    """Opacity pruning plus gradient-triggered splitting.

    Split children stay bound to the parent triangle, placed at +/- half a
    scale along the splat's widest local axis with scales shrunk by 1.6.
    """
    with torch.no_grad():
        opacity = torch.sigmoid(splats.opacity_logit)
        keep = opacity >= config.prune_opacity
        split = keep & (grad_norm > config.densify_grad_threshold)
        if int(keep.sum()) + int(split.sum()) > config.max_splats:
            split = torch.zeros_like(split)
        changed = bool((~keep).any() or split.any())
        if not changed:
            return splats, init_state, False

        def sel(t, mask):
            return t[mask]

        arrays = {k: sel(v.detach(), keep) for k, v in splats.trainable_tensors().items()}
        parent = splats.parent[keep]
        init_pos = init_state.local_pos[keep]
        init_rot = init_state.rotation[keep]

        sm = split[keep]
        if sm.any():
            from .splats import quat_to_matrix
            scale = torch.exp(arrays["log_scale"][sm])
            axis = torch.argmax(scale, dim=1)
            rot = quat_to_matrix(arrays["rotation"][sm])
            direction = torch.gather(
                rot.transpose(1, 2), 1,
                axis[:, None, None].expand(-1, 1, 3)).squeeze(1)
            step = 0.5 * torch.gather(scale, 1, axis[:, None]).squeeze(1)
            base_pos = arrays["local_pos"][sm]
            children = []
            for sign in (1.0, -1.0):
                child = {k: v[sm].clone() for k, v in arrays.items()}
                child["local_pos"] = base_pos + sign * step[:, None] * direction
                child["log_scale"] = arrays["log_scale"][sm] - math.log(1.6)
                children.append(child)
            merged = {}
            for k in arrays:
                merged[k] = torch.cat([arrays[k][~sm]] + [c[k] for c in children])
            parent = torch.cat([parent[~sm], parent[sm], parent[sm]])
            init_pos = torch.cat([init_pos[~sm], children[0]["local_pos"],
                                  children[1]["local_pos"]])
            init_rot = torch.cat([init_rot[~sm], arrays["rotation"][sm],
                                  arrays["rotation"][sm]])
            arrays = merged

        new_splats = SplatSet(
            log_scale=arrays["log_scale"].clone().requires_grad_(True),
            local_pos=arrays["local_pos"].clone().requires_grad_(True),
            rotation=arrays["rotation"].clone().requires_grad_(True),
            sh=arrays["sh"].clone().requires_grad_(True),
            opacity_logit=arrays["opacity_logit"].clone().requires_grad_(True),
            parent=parent.clone(),
            sh_degree=splats.sh_degree,
        )
        new_init = SplatInitState(local_pos=init_pos.clone(), rotation=init_rot.clone())
        return new_splats, new_init, True


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradCheckScene:
    """Self-contained double-precision scene for gradient verification."""

    splats: SplatSet
    vertices: torch.Tensor
    triangles: torch.Tensor
    camera: Camera
    height: int
    width: int
    target: torch.Tensor
    init_state: SplatInitState
    weights: AvatarLossWeights = dataclass_field(default_factory=AvatarLossWeights)
    background: float = 0.25


def _scene_loss(scene: GradCheckScene, pixel_mask: torch.Tensor | None):
    rendered = render_splats(scene.splats, scene.vertices, scene.triangles,
                             scene.camera, scene.height, scene.width,
                             background=scene.background)
    loss, _ = total_loss(rendered, scene.target, scene.splats, scene.init_state,
                         scene.weights, lambda_lpips=0.0, pixel_mask=pixel_mask)
    return loss


def cutoff_safe_mask(scene: GradCheckScene, band: float = 1.002,
                     dilate: int = 5) -> torch.Tensor:
    """Pixels whose value is independent of near-cutoff pairs.

    Renders with the weight cutoff moved to both band edges; pixels that
    differ carry a contribution close enough to the cutoff to cross it under
    the finite-difference perturbation and get excluded (dilated to cover the
    SSIM window coupling). The band only needs to exceed the relative motion
    of a Gaussian falloff under the probe step, which is tiny.
    """
    from .splat_render import WEIGHT_CUTOFF
    with torch.no_grad():
        lo = render_splats(scene.splats, scene.vertices, scene.triangles, scene.camera,
                           scene.height, scene.width, background=scene.background,
                           weight_cutoff=WEIGHT_CUTOFF / band)
        hi = render_splats(scene.splats, scene.vertices, scene.triangles, scene.camera,
                           scene.height, scene.width, background=scene.background,
                           weight_cutoff=WEIGHT_CUTOFF * band)
        unsafe = (lo - hi).abs().sum(dim=2) > 0
        if dilate > 0:
            k = 2 * dilate + 1
            unsafe = F.max_pool2d(unsafe[None, None].to(torch.float64), k, stride=1,
                                  padding=dilate)[0, 0] > 0
    return ~unsafe


PARAM_TENSORS = {"sh": "sh", "opacity": "opacity_logit", "position": "local_pos",
                 "scale": "log_scale", "rotation": "rotation"}


def gradient_check(scene: GradCheckScene, parameter: str, h: float = 1e-6,
                   mask_cutoff: bool = True) -> float:
    """Max relative error of analytic vs central finite-difference gradients
    of the total loss (perceptual weight zero) for one parameter tensor."""
    name = PARAM_TENSORS[parameter]
    tensor = getattr(scene.splats, name)
    pixel_mask = cutoff_safe_mask(scene) if mask_cutoff else None

    tensor.requires_grad_(True)
    loss = _scene_loss(scene, pixel_mask)
    grads = torch.autograd.grad(loss, tensor)[0].detach()

    flat = tensor.detach().reshape(-1)
    fd = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(_scene_loss(scene, pixel_mask))
            flat[i] = orig - h
            down = float(_scene_loss(scene, pixel_mask))
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * h)

    fd = fd.reshape(grads.shape)
    # entries far below the tensor's dominant gradient are compared against a
    # floor of 0.1% of that scale; central differences carry ~eps*L/h of
    # absolute rounding noise, which would otherwise masquerade as relative
    # error on near-zero entries
    scale = float(max(grads.abs().max(), fd.abs().max(), 1e-12))
    denom = torch.maximum(torch.maximum(grads.abs(), fd.abs()),
                          torch.full_like(fd, 1e-3 * scale))
    return float(((grads - fd).abs() / denom).max())


def render_view(model: MorphableModel, uv_mesh: UvMesh, result: FitResult,
                beta: np.ndarray, phi: np.ndarray, camera: Camera,
                height: int, width: int, background: float = 1.0) -> np.ndarray:
    """Render a fitted avatar at new parameters; returns (H, W, 3) float in [0, 1]."""
    dtype = result.splats.log_scale.dtype
    base = torch.as_tensor(evaluate_uv_vertices(model, uv_mesh, beta, phi), dtype=dtype)
    off, enc = deformation_inputs(model, uv_mesh, phi)
    with torch.no_grad():
        d_uv = result.field(torch.as_tensor(off, dtype=dtype),
                            torch.as_tensor(enc, dtype=dtype))
        verts = apply_deformation(base, d_uv, torch.as_tensor(uv_mesh.static_mask))
        img = render_splats(result.splats, verts,
                            torch.as_tensor(uv_mesh.triangles, dtype=torch.int64),
                            camera, height, width, background=background)
    return np.clip(img.numpy(), 0.0, 1.0)
