"""Z-buffered software rasterizer with perspective-correct interpolation.

Deterministic by construction: pixel-center sampling, top-left fill rule for
edge ties, triangles visited in index order with a strict depth test (equal
depth keeps the earlier triangle), back-face culling off. Triangles with any
vertex behind the camera are excluded (no near-plane clipping; desk-scale
heads stay fully in front of their cameras).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_points


@dataclass(frozen=True)
class RasterBuffers:
    triangle_id: np.ndarray  # (H, W) int64, -1 where uncovered
    bary: np.ndarray         # (H, W, 3) perspective-correct weights
    depth: np.ndarray        # (H, W) camera-space z, +inf where uncovered

    @property
    def coverage(self) -> np.ndarray:
        return self.triangle_id >= 0


def _is_top_left(dx: float, dy: float) -> bool:
    # positive-area orientation, y-down pixel coordinates
    return dy < 0 or (dy == 0 and dx > 0)


def rasterize_buffers(vertices: np.ndarray, triangles: np.ndarray, camera: Camera,
                      height: int, width: int) -> RasterBuffers:
    uv, z, in_front = project_points(camera, vertices)

    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)

    for t in range(triangles.shape[0]):
        idx = triangles[t]
        if not (in_front[idx[0]] and in_front[idx[1]] and in_front[idx[2]]):
            continue
        pts = uv[idx]
        zs = z[idx]
        order = (0, 1, 2)
        area = ((pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                - (pts[1, 1] - pts[0, 1]) * (pts[2, 0] - pts[0, 0]))
        if area == 0.0:
            continue
        if area < 0:  # normalize winding so edge functions are positive inside
            order = (0, 2, 1)
            pts = pts[[0, 2, 1]]
            zs = zs[[0, 2, 1]]
            area = -area

        x0 = max(int(np.floor(pts[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(pts[:, 0].max() - 0.5)), width - 1)
        y0 = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(pts[:, 1].max() - 0.5)), height - 1)
        if x1 < x0 or y1 < y0:
            continue

        cols, rows = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        px = cols + 0.5
        py = rows + 0.5

        inside = np.ones(px.shape, dtype=bool)
        w = np.empty((3,) + px.shape)
        for e in range(3):
            a = pts[(e + 1) % 3]
            b = pts[(e + 2) % 3]
            val = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
            if _is_top_left(b[0] - a[0], b[1] - a[1]):
                inside &= val >= 0
            else:
                inside &= val > 0
            w[e] = val
        if not np.any(inside):
            continue

        w = w / area
        # perspective-correct weights and depth: interpolate 1/z linearly
        with np.errstate(divide="ignore", invalid="ignore"):
            w_over_z = w / zs[:, None, None]
            inv_z = w_over_z.sum(axis=0)
            pix_depth = 1.0 / inv_z
            wp = w_over_z * pix_depth[None]

        rr = rows[inside]
        cc = cols[inside]
        closer = pix_depth[inside] < depth[rr, cc]
        rr, cc = rr[closer], cc[closer]
        if rr.size == 0:
            continue
        sel = inside.copy()
        sel[inside] = closer
        depth[rr, cc] = pix_depth[sel]
        tri_id[rr, cc] = t
        for e in range(3):
            bary[rr, cc, order[e]] = wp[e][sel]

    return RasterBuffers(triangle_id=tri_id, bary=bary, depth=depth)


def interpolate(buffers: RasterBuffers, triangles: np.ndarray, attrs: np.ndarray,
                fill: float = 0.0) -> np.ndarray:
    """Blend per-vertex attributes over the covered pixels of ``buffers``."""
    attrs = np.asarray(attrs, dtype=np.float64)
    flat = attrs.reshape(attrs.shape[0], int(np.prod(attrs.shape[1:], dtype=np.int64)))
    h, w = buffers.triangle_id.shape
    out = np.full((h, w, flat.shape[1]), float(fill), dtype=np.float64)
    cov = buffers.coverage
    corners = triangles[buffers.triangle_id[cov]]
    wts = buffers.bary[cov]
    out[cov] = (flat[corners[:, 0]] * wts[:, 0:1]
                + flat[corners[:, 1]] * wts[:, 1:2]
                + flat[corners[:, 2]] * wts[:, 2:3])
    return out.reshape((h, w) + attrs.shape[1:])


def rasterize_attributes(mesh, per_vertex_attrs: np.ndarray, camera: Camera,
                         height: int, width: int, fill: float = 0.0):
    """Rasterize per-vertex attributes; returns (attribute image, coverage mask).

    ``mesh`` is anything with ``vertices`` and ``triangles`` arrays. Uncovered
    pixels take ``fill`` and coverage False.
    """
    attrs = np.asarray(per_vertex_attrs, dtype=np.float64)
    if attrs.shape[0] != mesh.vertices.shape[0]:
        raise ValueError("attribute count does not match vertex count")
    buffers = rasterize_buffers(mesh.vertices, mesh.triangles, camera, height, width)
    return interpolate(buffers, mesh.triangles, attrs, fill=fill), buffers.coverage
