"""Triangle-bound 3D Gaussian splats.

Each splat lives in a local frame attached to its parent triangle: origin at
the centroid, rotation columns (normalized first edge, face normal, their
cross product), scalar size k equal to the mean edge length. World state is
``position = origin + k * R @ mu``, ``rotation = R @ quat(r)``,
``scale = k * exp(s)``, so splats ride their triangle as the mesh deforms.

Stored parameterization: scales in log domain, opacity in logit domain,
rotation as a unit quaternion (wxyz), colors as per-channel spherical
harmonic coefficients. All tensors are plain torch so the renderer can
differentiate through binding and deformation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import DegenerateTriangleError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (..., 4) wxyz to rotation matrix (..., 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


@dataclass
class TriangleFrames:
    """Batched local frames, one per triangle."""

    origin: torch.Tensor    # (T, 3)
    rotation: torch.Tensor  # (T, 3, 3), columns (e1_hat, n_hat, n_hat x e1_hat)
    k: torch.Tensor         # (T,) mean edge length


def triangle_frames(vertices: torch.Tensor, triangles: torch.Tensor,
                    eps: float = 1e-20) -> TriangleFrames:
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    e1 = v1 - v0
    e1_hat = e1 / e1.norm(dim=1, keepdim=True).clamp_min(eps)
    n = torch.cross(e1, v2 - v0, dim=1)
    n_hat = n / n.norm(dim=1, keepdim=True).clamp_min(eps)
    c3 = torch.cross(n_hat, e1_hat, dim=1)
    rot = torch.stack([e1_hat, n_hat, c3], dim=-1)
    k = (e1.norm(dim=1) + (v2 - v1).norm(dim=1) + (v0 - v2).norm(dim=1)) / 3.0
    origin = (v0 + v1 + v2) / 3.0
    return TriangleFrames(origin=origin, rotation=rot, k=k)


def triangle_frame(mesh, index: int) -> TriangleFrames:
    """Frame of a single triangle of a (numpy-backed) mesh; raises on
    degenerate input."""
    verts = torch.as_tensor(np.asarray(mesh.vertices), dtype=torch.float64)
    tris = torch.as_tensor(np.asarray(mesh.triangles), dtype=torch.int64)
    tri = tris[index:index + 1]
    v = verts[tri[0]]
    area2 = torch.cross(v[1] - v[0], v[2] - v[0], dim=0).norm()
    if float(area2) < 1e-14:
        raise DegenerateTriangleError(f"triangle {index} has zero area")
    f = triangle_frames(verts, tri)
    return TriangleFrames(origin=f.origin[0], rotation=f.rotation[0], k=f.k[0])


@dataclass
class SplatSet:
    log_scale: torch.Tensor      # (n, 3)
    local_pos: torch.Tensor      # (n, 3)
    rotation: torch.Tensor       # (n, 4) unit quaternion wxyz
    sh: torch.Tensor             # (n, 3, coeffs)
    opacity_logit: torch.Tensor  # (n,)
    parent: torch.Tensor         # (n,) int64 triangle ids
    sh_degree: int = 1

    @property
    def n_splats(self) -> int:
        return self.log_scale.shape[0]

    def trainable_tensors(self) -> dict[str, torch.Tensor]:
        return {"log_scale": self.log_scale, "local_pos": self.local_pos,
                "rotation": self.rotation, "sh": self.sh,
                "opacity_logit": self.opacity_logit}

    def requires_grad_(self, flag: bool = True) -> "SplatSet":
        for t in self.trainable_tensors().values():
            t.requires_grad_(flag)
        return self

    def detached(self) -> "SplatSet":
        return replace(self, **{k: v.detach().clone() for k, v in self.trainable_tensors().items()},
                       parent=self.parent.clone())

    def renormalize_(self):
        """Project quaternions back to unit norm (after an optimizer step)."""
        with torch.no_grad():
            self.rotation /= self.rotation.norm(dim=1, keepdim=True).clamp_min(1e-20)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.detach().cpu().numpy() for k, v in self.trainable_tensors().items()}
        out["parent"] = self.parent.cpu().numpy()
        return out

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray], sh_degree: int,
                    dtype=torch.float64) -> "SplatSet":
        return SplatSet(
            log_scale=torch.as_tensor(arrays["log_scale"], dtype=dtype),
            local_pos=torch.as_tensor(arrays["local_pos"], dtype=dtype),
            rotation=torch.as_tensor(arrays["rotation"], dtype=dtype),
            sh=torch.as_tensor(arrays["sh"], dtype=dtype),
            opacity_logit=torch.as_tensor(arrays["opacity_logit"], dtype=dtype),
            parent=torch.as_tensor(arrays["parent"], dtype=torch.int64),
            sh_degree=sh_degree,
        )


def splat_world_state(splats: SplatSet, frames: TriangleFrames):
    """World-space (positions, rotation matrices, linear scales)."""
    origin = frames.origin[splats.parent]
    rot = frames.rotation[splats.parent]
    k = frames.k[splats.parent]
    pos = origin + k[:, None] * torch.einsum("nij,nj->ni", rot, splats.local_pos)
    world_rot = rot @ quat_to_matrix(splats.rotation)
    scale = k[:, None] * torch.exp(splats.log_scale)
    return pos, world_rot, scale


def apportion_by_area(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` splats over triangles."""
    areas = np.asarray(areas, dtype=np.float64)
    quota = total * areas / areas.sum()
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = quota - base
        top = np.argsort(-frac, kind="stable")[:short]
        base[top] += 1
    return base


INIT_SCALE_CONST = 0.7  # linear size c/n per splat, sized so splats tile their triangle


def init_splats(vertices: np.ndarray, triangles: np.ndarray, total_count: int,
                seed: int = 0, sh_degree: int = 1,
                scale_const: float = INIT_SCALE_CONST,
                dtype=torch.float64) -> SplatSet:
    """Area-proportional splat initialization on a triangle mesh.

    Positions are uniform within each parent triangle (expressed in its local
    frame), rotations identity, opacity 0.5, color mid-gray; the initial
    linear scale of each splat is ``scale_const / count(parent triangle)``.
    """
    rng = np.random.default_rng(seed)
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    counts = apportion_by_area(areas, total_count)

    parent = np.repeat(np.arange(tris.shape[0]), counts)
    n = parent.shape[0]
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    points = ((1 - r1)[:, None] * v0[parent]
              + (r1 * (1 - r2))[:, None] * v1[parent]
              + (r1 * r2)[:, None] * v2[parent])

    tv = torch.as_tensor(verts, dtype=torch.float64)
    tt = torch.as_tensor(tris, dtype=torch.int64)
    frames = triangle_frames(tv, tt)
    origin = frames.origin.numpy()[parent]
    rot = frames.rotation.numpy()[parent]
    k = frames.k.numpy()[parent]
    local = np.einsum("nji,nj->ni", rot, points - origin) / k[:, None]

    per_splat_scale = scale_const / counts[parent]
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    return SplatSet(
        log_scale=torch.as_tensor(np.log(per_splat_scale)[:, None].repeat(3, axis=1), dtype=dtype),
        local_pos=torch.as_tensor(local, dtype=dtype),
        rotation=torch.as_tensor(rotation, dtype=dtype),
        sh=torch.zeros((n, 3, sh_coeff_count(sh_degree)), dtype=dtype),
        opacity_logit=torch.zeros(n, dtype=dtype),
        parent=torch.as_tensor(parent, dtype=torch.int64),
        sh_degree=sh_degree,
    )


def eval_sh(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate per-splat RGB from SH coefficients along unit directions.

    ``sh`` is (n, 3, coeffs), ``dirs`` (n, 3); returns (n, 3). The constant
    0.5 offset and non-negativity clamp follow the usual splatting
    convention so that zero coefficients give mid-gray.
    """
    out = SH_C0 * sh[:, :, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        out = out - SH_C1 * y * sh[:, :, 1] + SH_C1 * z * sh[:, :, 2] - SH_C1 * x * sh[:, :, 3]
    if degree >= 2:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        xx, yy, zz = x * x, y * y, z * z
        out = (out
               + SH_C2[0] * (x * y) * sh[:, :, 4]
               + SH_C2[1] * (y * z) * sh[:, :, 5]
               + SH_C2[2] * (2 * zz - xx - yy) * sh[:, :, 6]
               + SH_C2[3] * (x * z) * sh[:, :, 7]
               + SH_C2[4] * (xx - yy) * sh[:, :, 8])
    if degree > 2:
        raise ValueError("spherical harmonics supported up to degree 2")
    return torch.clamp_min(out + 0.5, 0.0)
