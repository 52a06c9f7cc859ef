"""Expression-dependent corrective deformation of the UV-remeshed head.

A trainable field maps the UV-rasterized expression offsets plus a fixed
positional encoding of UV coordinates (L=6, 24 channels) to a 3-channel
corrective deformation map. The correction is masked so static regions
(back of head, lower neck) never move, then added to the blendshape-driven
vertex positions.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np
import torch
from torch import nn

from .conditioning import positional_encode
from .morphable import MorphableModel, UvMesh, blend_uv, neutral_expression_offsets

UV_ENCODING_FREQS = 6


def uv_positional_encoding(uv_mesh: UvMesh) -> np.ndarray:
    """(res, res, 24) encoding of pixel-center UV coordinates, scaled by 2*pi
    so the lowest frequency spans one period across the atlas."""
    res = uv_mesh.resolution
    uv = uv_mesh.pixel_uv().reshape(res, res, 2)
    return positional_encode(2.0 * np.pi * uv, UV_ENCODING_FREQS)


def deformation_inputs(model: MorphableModel, uv_mesh: UvMesh, phi) -> tuple[np.ndarray, np.ndarray]:
    """Field inputs for one expression: (offset map res x res x 3, encoding
    map res x res x 24). Offsets are the expression blendshape deformations
    blended onto the UV grid; invalid pixels are zero."""
    offsets = neutral_expression_offsets(model, np.zeros(model.k_id), phi)
    grid = blend_uv(uv_mesh, offsets, model.triangles)
    res = uv_mesh.resolution
    return grid.reshape(res, res, 3), uv_positional_encoding(uv_mesh)


class DeformationField(Protocol):
    """Callable (offset map, encoding map) -> corrective map, all (res,res,3)
    /(res,res,24)/(res,res,3) tensors; owns trainable parameters."""

    def __call__(self, offset_map: torch.Tensor, encoding_map: torch.Tensor) -> torch.Tensor: ...

    def parameters(self): ...


class MlpDeformationField(nn.Module):
    """Per-pixel MLP applied convolutionally over the 27-channel input.

    The output layer is zero-initialized so the field starts as the identity
    correction (all-zero deformation).
    """

    def __init__(self, hidden: int = 32, dtype=torch.float64, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(27, hidden, dtype=dtype),
            nn.SiLU(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.SiLU(),
            nn.Linear(hidden, 3, dtype=dtype),
        )
        with torch.no_grad():
            for layer in self.net:
                if isinstance(layer, nn.Linear):
                    layer.weight.copy_(torch.empty_like(layer.weight).normal_(
                        std=(2.0 / layer.weight.shape[1]) ** 0.5, generator=gen))
                    layer.bias.zero_()
            self.net[-1].weight.zero_()

    def forward(self, offset_map: torch.Tensor, encoding_map: torch.Tensor) -> torch.Tensor:
        res = offset_map.shape[0]
        x = torch.cat([offset_map, encoding_map], dim=2).reshape(res * res, 27)
        return self.net(x).reshape(res, res, 3)


def apply_deformation(vertices: torch.Tensor, d_uv: torch.Tensor,
                      static_mask: torch.Tensor) -> torch.Tensor:
    """``v + d`` on movable vertices; static vertices pass through bitwise
    unchanged. ``d_uv`` may be (res, res, 3) or flattened (n, 3)."""
    d = d_uv.reshape(vertices.shape)
    if static_mask.shape[0] != vertices.shape[0]:
        raise ValueError("static mask length does not match vertex count")
    return torch.where(static_mask[:, None], vertices, vertices + d)
