"""Per-view conditioning maps for the multi-view generator.

Each view gets a stack of maps at latent resolution: a positionally encoded
template-coordinate map (42 channels at L=7), a raw 3-channel expression
offset map, a unit view-direction map expressed in the first camera's frame,
an outcrop mask and a reference/generated flag. Positional encoding is
applied after rasterization interpolation; channel layout is component-major
with (sin, cos) interleaved by ascending frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import Camera, project_points
from .errors import NoVisibleGeometryError
from .morphable import Mesh, MorphableModel, evaluate_mesh, neutral_expression_offsets
from .rasterize import interpolate, rasterize_buffers

POSE_ENCODING_FREQS = 7
CROP_ENLARGE = 1.3
WHITE_PAD = 1.0


def positional_encode(values: np.ndarray, freqs: int) -> np.ndarray:
    """Sine/cosine encoding of the last axis.

    Output layout per input component: sin(2^0 p), cos(2^0 p), ...,
    sin(2^(L-1) p), cos(2^(L-1) p); components are ordered before
    frequencies. An n-vector maps to 2*L*n channels.
    """
    if freqs < 1:
        raise ValueError("at least one frequency is required")
    v = np.asarray(values, dtype=np.float64)
    scales = 2.0 ** np.arange(freqs)
    ang = v[..., :, None] * scales  # (..., n, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., n, L, 2)
    return enc.reshape(v.shape[:-1] + (v.shape[-1] * freqs * 2,))


@dataclass(frozen=True)
class ConditioningSet:
    """Conditioning stack for one view; all maps share H x W.

    ``beta``/``phi``/``camera`` carry the scene parameters the maps were
    rendered from so that oracle denoisers can reproduce the target view;
    they are dropped when conditioning is zeroed for classifier-free
    guidance.
    """

    pose_map: np.ndarray       # (H, W, 42)
    expr_map: np.ndarray       # (H, W, 3)
    view_map: np.ndarray       # (H, W, 3)
    mask_outcrop: np.ndarray   # (H, W) bool
    flag_is_reference: bool
    beta: np.ndarray | None = None
    phi: np.ndarray | None = None
    camera: Camera | None = None

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pose_map.shape[:2]

    def channels(self) -> int:
        return self.pose_map.shape[2] + self.expr_map.shape[2] + self.view_map.shape[2] + 2

    def stacked(self) -> np.ndarray:
        """All maps concatenated along channels (masks as 0/1 planes)."""
        h, w = self.resolution
        flag = np.full((h, w, 1), 1.0 if self.flag_is_reference else 0.0)
        return np.concatenate([
            self.pose_map, self.expr_map, self.view_map,
            self.mask_outcrop[..., None].astype(np.float64), flag,
        ], axis=2)

    def dropped(self) -> "ConditioningSet":
        """Zeroed copy used for the unconditional guidance branch."""
        return ConditioningSet(
            pose_map=np.zeros_like(self.pose_map),
            expr_map=np.zeros_like(self.expr_map),
            view_map=np.zeros_like(self.view_map),
            mask_outcrop=np.zeros_like(self.mask_outcrop),
            flag_is_reference=False,
        )


def make_pose_map(mesh: Mesh, model: MorphableModel, camera: Camera,
                  height: int, width: int) -> np.ndarray:
    """Rasterize template coordinates over the posed mesh, then encode.

    The attribute texture is the template geometry, so the map's values are
    expression-invariant; only coverage follows the posed mesh. Uncovered
    pixels are zero.
    """
    buffers = rasterize_buffers(mesh.vertices, mesh.triangles, camera, height, width)
    coords = interpolate(buffers, mesh.triangles, model.template_vertices, fill=0.0)
    enc = positional_encode(model.encode_coords(coords), POSE_ENCODING_FREQS)
    enc[~buffers.coverage] = 0.0
    return enc


def make_expression_map(mesh: Mesh, offsets: np.ndarray, camera: Camera,
                        height: int, width: int) -> np.ndarray:
    """Rasterize neutral-relative expression offsets (3 channels, no encoding)."""
    buffers = rasterize_buffers(mesh.vertices, mesh.triangles, camera, height, width)
    return interpolate(buffers, mesh.triangles, offsets, fill=0.0)


def make_view_direction_map(camera: Camera, first_camera: Camera,
                            height: int, width: int) -> np.ndarray:
    """Per-pixel unit ray directions in the first reference camera's frame."""
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    x = (cols + 0.5 - camera.cx) / camera.fx
    y = (rows + 0.5 - camera.cy) / camera.fy
    rays = np.stack([x, y, np.ones_like(x)], axis=-1)
    world = rays @ camera.rotation  # == rays @ (R^T)^T
    first = world @ first_camera.rotation.T
    return first / np.linalg.norm(first, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CropSpec:
    """Square crop in source-pixel units; may extend beyond source bounds."""

    origin_x: float
    origin_y: float
    side: float
    target_resolution: int
    enlarge: float = CROP_ENLARGE


def fit_crop(mesh: Mesh, camera: Camera, target_resolution: int = 512):
    """Head-framing square crop around the projected mesh.

    The tight projection bbox is squared about its center, enlarged by 30%
    and resampled to ``target_resolution``. Returns (CropSpec, adjusted
    Camera, outcrop mask at the target resolution); outcrop pixels are those
    whose source location falls outside the source image bounds.
    """
    uv, _, in_front = project_points(camera, mesh.vertices)
    if not np.any(in_front):
        raise NoVisibleGeometryError("all vertices are behind the camera")
    pts = uv[in_front]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    side = float(np.max(hi - lo)) * CROP_ENLARGE
    if side <= 0:
        raise NoVisibleGeometryError("projected geometry has zero extent")
    ox, oy = center - side / 2.0
    spec = CropSpec(origin_x=float(ox), origin_y=float(oy), side=side,
                    target_resolution=target_resolution)

    scale = target_resolution / side
    adjusted = replace(
        camera,
        fx=camera.fx * scale, fy=camera.fy * scale,
        cx=(camera.cx - ox) * scale, cy=(camera.cy - oy) * scale,
        width=target_resolution, height=target_resolution,
    )
    mask = outcrop_mask(spec, camera.width, camera.height, target_resolution)
    return spec, adjusted, mask


def outcrop_mask(spec: CropSpec, source_width: int, source_height: int,
                 resolution: int | None = None) -> np.ndarray:
    """True where a crop pixel center maps outside the source image."""
    res = resolution or spec.target_resolution
    step = spec.side / res
    cols, rows = np.meshgrid(np.arange(res), np.arange(res))
    sx = spec.origin_x + (cols + 0.5) * step
    sy = spec.origin_y + (rows + 0.5) * step
    return (sx < 0) | (sx > source_width) | (sy < 0) | (sy > source_height)


def assemble_conditioning_set(model: MorphableModel, beta, phi, camera: Camera,
                              first_camera: Camera, is_reference: bool,
                              latent_res: int,
                              mask_outcrop: np.ndarray | None = None) -> ConditioningSet:
    """Compose the full conditioning stack for one view at latent resolution.

    ``camera`` must already be expressed at ``latent_res`` (use
    ``Camera.scaled``). Synthetic direct views have no outcropping, so the
    mask defaults to all-false unless one is supplied by crop preprocessing.
    """
    mesh = evaluate_mesh(model, beta, phi)
    offsets = neutral_expression_offsets(model, beta, phi)
    pose = make_pose_map(mesh, model, camera, latent_res, latent_res)
    expr = make_expression_map(mesh, offsets, camera, latent_res, latent_res)
    view = make_view_direction_map(camera, first_camera, latent_res, latent_res)
    if mask_outcrop is None:
        mask_outcrop = np.zeros((latent_res, latent_res), dtype=bool)
    return ConditioningSet(
        pose_map=pose, expr_map=expr, view_map=view,
        mask_outcrop=mask_outcrop.astype(bool),
        flag_is_reference=bool(is_reference),
        beta=np.asarray(beta, dtype=np.float64),
        phi=np.asarray(phi, dtype=np.float64),
        camera=camera,
    )


def channel_visualization(channels: np.ndarray) -> np.ndarray:
    """Tile a (H, W, C) map into one (H, W*C) grayscale image, each channel
    min-max normalized; for PNG debugging exports."""
    h, w, c = channels.shape
    tiles = []
    for i in range(c):
        ch = channels[:, :, i]
        lo, hi = float(ch.min()), float(ch.max())
        tiles.append((ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch))
    return np.concatenate(tiles, axis=1)
