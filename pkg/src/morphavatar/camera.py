"""Pinhole camera with world-to-camera extrinsics.

Conventions: camera x right, y down, z forward; a world point p maps to
camera coordinates ``R @ p + t`` and to the pixel
``(fx * x/z + cx, fy * y/z + cy)``. Pixel (col, row) covers
[col, col+1) x [row, row+1) with its center at (col+0.5, row+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same view at a resolution scaled by ``factor`` (intrinsics follow)."""
        return replace(
            self,
            fx=self.fx * factor, fy=self.fy * factor,
            cx=self.cx * factor, cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


def look_at(eye, target, fx: float, fy: float, cx: float, cy: float,
            width: int, height: int, up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at ``eye`` looking at ``target`` with zero roll (world up ``up``)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    # re-orthonormalize to survive the strict orthonormality check
    u_, _, vt = np.linalg.svd(rot)
    rot = u_ @ vt
    t = -rot @ eye
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot, translation=t,
                  width=width, height=height)


def project_points(camera: Camera, points: np.ndarray):
    """Project world points to pixel coordinates.

    Returns (uv (N,2), depth (N,), in_front (N,) bool). Points with
    camera-space z <= 0 are flagged behind-camera; their uv entries are
    not meaningful and must be excluded from rasterization.
    """
    p = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    pc = p @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)  # avoid div-by-zero on flagged points
    u = camera.fx * pc[:, 0] / zs + camera.cx
    v = camera.fy * pc[:, 1] / zs + camera.cy
    return np.stack([u, v], axis=1), z, in_front


def orbit_camera(center, distance: float, azimuth_deg: float, elevation_deg: float,
                 fx: float, fy: float, cx: float, cy: float,
                 width: int, height: int) -> Camera:
    """Camera on an orbit around ``center``, straight-on view at (0, 0).

    Azimuth rotates about world +y, elevation lifts toward +y; the head
    faces +z so (0, 0) places the camera in front of the face.
    """
    a = np.deg2rad(azimuth_deg)
    e = np.deg2rad(elevation_deg)
    direction = np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
    eye = np.asarray(center, dtype=np.float64) + distance * direction
    return look_at(eye, center, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
