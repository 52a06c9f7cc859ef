"""Linear 3D morphable head model.

Vertex positions are affine in the identity and expression coefficients:
``vertices = template + identity_basis @ beta + expression_basis @ phi``.
Licensed face-model assets are out of scope, so :func:`synth_model` builds a
procedural stand-in with the same mathematical structure (template mesh,
linear bases, UV atlas, static-region mask).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterShapeError, UnsupportedModelError


@dataclass(frozen=True)
class MorphableModel:
    """Template mesh plus linear identity/expression blendshape bases.

    ``identity_basis`` and ``expression_basis`` have shape (N_v, 3, K).
    ``static_mask`` is True for vertices excluded from corrective deformation
    (back of head, lower neck). ``pose_encode_center``/``pose_encode_scale``
    define the affine map applied to template coordinates before positional
    encoding; they are stored with the model so encoded maps are reproducible.
    """

    template_vertices: np.ndarray
    triangles: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    uv_coords: np.ndarray
    static_mask: np.ndarray
    pose_encode_center: np.ndarray = field(default=None)  # type: ignore[assignment]
    pose_encode_scale: float = 0.0

    def __post_init__(self):
        if self.pose_encode_center is None:
            center, scale = default_pose_encoding(self.template_vertices)
            object.__setattr__(self, "pose_encode_center", center)
            object.__setattr__(self, "pose_encode_scale", scale)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def k_id(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def k_expr(self) -> int:
        return self.expression_basis.shape[2]

    def encode_coords(self, points: np.ndarray) -> np.ndarray:
        """Map raw template coordinates into the positional-encoding domain."""
        return (points - self.pose_encode_center) * self.pose_encode_scale


@dataclass(frozen=True)
class Mesh:
    """Evaluated vertex positions; triangles are shared with the source model."""

    vertices: np.ndarray
    triangles: np.ndarray


@dataclass(frozen=True)
class UvMesh:
    """UV-pixel-aligned remesh of a morphable model.

    One candidate vertex per UV pixel center ((u+0.5)/res, (v+0.5)/res),
    stored row-major (``flat = row * res + col``). Valid vertices carry the
    source triangle that covers their pixel center plus barycentric weights,
    so they can be re-evaluated under new blendshape parameters. Grid cells
    with any invalid corner are omitted from the triangulation.
    """

    resolution: int
    vertices: np.ndarray          # (res*res, 3), zeros at invalid entries
    triangles: np.ndarray         # (n_tri, 3) indices into the res*res grid
    valid: np.ndarray             # (res*res,) bool
    source_triangle: np.ndarray   # (res*res,) int, -1 where invalid
    source_bary: np.ndarray       # (res*res, 3)
    static_mask: np.ndarray       # (res*res,) bool

    @property
    def n_candidates(self) -> int:
        return self.resolution * self.resolution

    def pixel_uv(self) -> np.ndarray:
        """(res*res, 2) UV coordinates of the pixel-center vertices."""
        res = self.resolution
        idx = np.arange(res * res)
        u = ((idx % res) + 0.5) / res
        v = ((idx // res) + 0.5) / res
        return np.stack([u, v], axis=1)

def _check_params(vec, expected: int, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    if v.shape[0] != expected:
        raise ParameterShapeError(f"{name} has length {v.shape[0]}, model expects {expected}")
    if not np.all(np.isfinite(v)):
        raise ParameterShapeError(f"{name} contains non-finite values")
    return v


def evaluate_mesh(model: MorphableModel, beta, phi) -> Mesh:
    """Evaluate vertex positions: template plus linear blendshape offsets."""
    b = _check_params(beta, model.k_id, "beta")
    p = _check_params(phi, model.k_expr, "phi")
    verts = model.template_vertices + model.identity_basis @ b + model.expression_basis @ p
    return Mesh(vertices=verts, triangles=model.triangles)


def neutral_expression_offsets(model: MorphableModel, beta, phi) -> np.ndarray:
    """Per-vertex 3D offset relative to the same identity with neutral expression.

    Identity terms cancel exactly, so this reduces to ``expression_basis @ phi``
    and is bitwise independent of ``beta``.
    """
    _check_params(beta, model.k_id, "beta")
    p = _check_params(phi, model.k_expr, "phi")
    return model.expression_basis @ p


def default_pose_encoding(template_vertices: np.ndarray) -> tuple[np.ndarray, float]:
    """Affine map taking the template bounding box into [-pi, pi]^3 (uniform scale)."""
    lo = template_vertices.min(axis=0)
    hi = template_vertices.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float(np.max(hi - lo))
    scale = 2.0 * np.pi / extent if extent > 0 else 1.0
    return center, scale


# ---------------------------------------------------------------------------
# UV remeshing


def _edge_sign(a: np.ndarray, b: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Signed area of (a, b, p) in UV space (exact half-plane test)."""
    return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])


def remesh_to_uv(model: MorphableModel, resolution: int = 128) -> UvMesh:
    """Resample the model to one vertex per covered UV pixel center.

    Point location uses exact half-plane tests; a pixel center lying on a
    shared edge goes to the lowest covering triangle index (triangles are
    visited in ascending order and the first hit wins).
    """
    if model.uv_coords is None or model.uv_coords.size == 0:
        raise UnsupportedModelError("model has no UV atlas")
    res = int(resolution)
    n = res * res
    uv = model.uv_coords
    tris = model.triangles

    src_tri = np.full(n, -1, dtype=np.int64)
    src_bary = np.zeros((n, 3), dtype=np.float64)

    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t]
        a, b, c = uv[i0], uv[i1], uv[i2]
        area = _edge_sign(a, b, np.array(c[0]), np.array(c[1]))
        if area == 0.0:
            continue
        # candidate pixel range from the triangle's UV bbox
        umin = min(a[0], b[0], c[0])
        umax = max(a[0], b[0], c[0])
        vmin = min(a[1], b[1], c[1])
        vmax = max(a[1], b[1], c[1])
        c0 = max(int(np.floor(umin * res - 0.5)), 0)
        c1 = min(int(np.ceil(umax * res - 0.5)), res - 1)
        r0 = max(int(np.floor(vmin * res - 0.5)), 0)
        r1 = min(int(np.ceil(vmax * res - 0.5)), res - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        px = (cols + 0.5) / res
        py = (rows + 0.5) / res
        w0 = _edge_sign(b, c, px, py)
        w1 = _edge_sign(c, a, px, py)
        w2 = _edge_sign(a, b, px, py)
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        flat = rows * res + cols
        hit = inside & (src_tri[flat] < 0)
        if not np.any(hit):
            continue
        f = flat[hit]
        src_tri[f] = t
        src_bary[f, 0] = w0[hit] / area
        src_bary[f, 1] = w1[hit] / area
        src_bary[f, 2] = w2[hit] / area

    valid = src_tri >= 0
    vertices = np.zeros((n, 3), dtype=np.float64)
    vertices[valid] = _blend(model.template_vertices, tris, src_tri, src_bary, valid)

    static = np.zeros(n, dtype=bool)
    static_f = model.static_mask.astype(np.float64)
    static_vals = _blend(static_f[:, None], tris, src_tri, src_bary, valid)[:, 0]
    static[valid] = static_vals >= 0.5

    # two triangles per grid cell, skipping cells with an invalid corner
    grid = np.arange(n).reshape(res, res)
    c00 = grid[:-1, :-1].ravel()
    c01 = grid[:-1, 1:].ravel()
    c10 = grid[1:, :-1].ravel()
    c11 = grid[1:, 1:].ravel()
    ok = valid[c00] & valid[c01] & valid[c10] & valid[c11]
    t1 = np.stack([c00[ok], c01[ok], c10[ok]], axis=1)
    t2 = np.stack([c01[ok], c11[ok], c10[ok]], axis=1)
    triangles = np.concatenate([t1, t2], axis=0)

    return UvMesh(
        resolution=res,
        vertices=vertices,
        triangles=triangles,
        valid=valid,
        source_triangle=src_tri,
        source_bary=src_bary,
        static_mask=static,
    )


def _blend(attr: np.ndarray, tris: np.ndarray, src_tri: np.ndarray,
           src_bary: np.ndarray, valid: np.ndarray) -> np.ndarray:
    corners = tris[src_tri[valid]]
    w = src_bary[valid]
    return (attr[corners[:, 0]] * w[:, 0:1]
            + attr[corners[:, 1]] * w[:, 1:2]
            + attr[corners[:, 2]] * w[:, 2:3])


def blend_uv(uv_mesh: UvMesh, source_attr: np.ndarray, triangles: np.ndarray | None = None) -> np.ndarray:
    """Blend per-source-vertex attributes onto the UV grid via the stored
    barycentric references. Invalid pixels are zero."""
    tris = triangles
    if tris is None:
        raise ValueError("triangles of the source model are required")
    attr = np.asarray(source_attr, dtype=np.float64)
    flat = attr.reshape(attr.shape[0], int(np.prod(attr.shape[1:], dtype=np.int64)))
    out = np.zeros((uv_mesh.n_candidates, flat.shape[1]), dtype=np.float64)
    out[uv_mesh.valid] = _blend(flat, tris, uv_mesh.source_triangle, uv_mesh.source_bary, uv_mesh.valid)
    return out.reshape((uv_mesh.n_candidates,) + attr.shape[1:])


def evaluate_uv_vertices(model: MorphableModel, uv_mesh: UvMesh, beta, phi) -> np.ndarray:
    """Re-evaluate UV-grid vertex positions under new blendshape parameters.

    Equals the barycentric blend of the re-evaluated source mesh (remeshing
    and blendshape evaluation commute because both are linear).
    """
    mesh = evaluate_mesh(model, beta, phi)
    return blend_uv(uv_mesh, mesh.vertices, model.triangles)


# ---------------------------------------------------------------------------
# Synthetic model


def synth_model(seed: int, n_subdiv: int = 2, k_id: int = 8, k_expr: int = 10) -> MorphableModel:
    """Deterministic procedural head model.

    Template: a latitude/longitude-subdivided ellipsoid (open at the poles so
    every triangle is non-degenerate), facing +z. UV atlas: cylindrical
    projection onto the grid, with the seam column duplicated so the atlas is
    non-overlapping. Blendshapes: smooth random bump fields with a bounded
    maximum vertex displacement. Static mask: rear third of the head.
    """
    if n_subdiv < 0:
        raise ValueError("n_subdiv must be >= 0")
    rng = np.random.default_rng(seed)
    n_lat = 6 * (2 ** n_subdiv)
    n_lon = 8 * (2 ** n_subdiv)
    radii = np.array([0.085, 0.115, 0.095])  # head-scale half axes in meters
    theta0 = 0.35  # polar cap opening, keeps pole cells non-degenerate

    rows = np.linspace(theta0, np.pi - theta0, n_lat + 1)
    cols = np.linspace(-np.pi, np.pi, n_lon + 1)  # seam column duplicated
    theta, psi = np.meshgrid(rows, cols, indexing="ij")
    d = np.stack([np.sin(theta) * np.sin(psi), np.cos(theta), np.sin(theta) * np.cos(psi)], axis=-1)
    verts = (d * radii).reshape(-1, 3)

    grid = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    c00 = grid[:-1, :-1].ravel()
    c01 = grid[:-1, 1:].ravel()
    c10 = grid[1:, :-1].ravel()
    c11 = grid[1:, 1:].ravel()
    tris = np.concatenate([
        np.stack([c00, c10, c01], axis=1),
        np.stack([c01, c10, c11], axis=1),
    ], axis=0).astype(np.int64)

    u = (psi + np.pi) / (2.0 * np.pi)
    v = (theta - theta0) / (np.pi - 2.0 * theta0)
    uv = np.stack([u.ravel(), v.ravel()], axis=1)

    mean_r = float(np.mean(radii))
    id_basis = _random_bump_basis(rng, verts, k_id, amplitude=0.010, radius=mean_r)
    ex_basis = _random_bump_basis(rng, verts, k_expr, amplitude=0.008, radius=mean_r)

    # rear third by depth; the head faces +z
    z = verts[:, 2]
    z_split = z.min() + (z.max() - z.min()) / 3.0
    static = z < z_split

    return MorphableModel(
        template_vertices=verts,
        triangles=tris,
        identity_basis=id_basis,
        expression_basis=ex_basis,
        uv_coords=uv,
        static_mask=static,
    )


def _random_bump_basis(rng: np.random.Generator, verts: np.ndarray, k: int,
                       amplitude: float, radius: float) -> np.ndarray:
    """Each column is a sum of three Gaussian displacement bumps, rescaled so
    its maximum vertex displacement equals ``amplitude``. Bumps depend only on
    3D position, so duplicated seam vertices deform identically."""
    n = verts.shape[0]
    basis = np.zeros((n, 3, k))
    for j in range(k):
        disp = np.zeros((n, 3))
        for _ in range(3):
            center = verts[rng.integers(0, n)]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            width = radius * rng.uniform(0.3, 0.7)
            w = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2.0 * width * width))
            disp += w[:, None] * direction
        peak = np.max(np.linalg.norm(disp, axis=1))
        basis[:, :, j] = disp * (amplitude / peak)
    return basis


# ---------------------------------------------------------------------------
# Invariant validation


def validate_model(model: MorphableModel, uv_check_resolution: int = 64) -> None:
    """Raise ValueError if any MorphableModel invariant is violated.

    The UV non-overlap check samples pixel centers at ``uv_check_resolution``
    and counts triangles whose open interior covers each sample.
    """
    nv = model.n_vertices
    tris = model.triangles
    if tris.min() < 0 or tris.max() >= nv:
        raise ValueError("triangle index out of range")
    v = model.template_vertices
    e1 = v[tris[:, 1]] - v[tris[:, 0]]
    e2 = v[tris[:, 2]] - v[tris[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    if np.any(areas <= 1e-14):
        raise ValueError("degenerate template triangle")
    if model.uv_coords.min() < 0.0 or model.uv_coords.max() > 1.0:
        raise ValueError("uv coordinates outside [0,1]^2")
    if model.identity_basis.shape[:2] != (nv, 3) or model.expression_basis.shape[:2] != (nv, 3):
        raise ValueError("basis leading dimensions do not match vertex count")
    if model.static_mask.shape != (nv,):
        raise ValueError("static mask shape mismatch")

    res = uv_check_resolution
    count = np.zeros(res * res, dtype=np.int32)
    uvc = model.uv_coords
    for t in range(tris.shape[0]):
        a, b, c = uvc[tris[t, 0]], uvc[tris[t, 1]], uvc[tris[t, 2]]
        area = _edge_sign(a, b, np.array(c[0]), np.array(c[1]))
        if area == 0.0:
            raise ValueError("degenerate UV triangle")
        umin, umax = min(a[0], b[0], c[0]), max(a[0], b[0], c[0])
        vmin, vmax = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        cmin = max(int(np.floor(umin * res)), 0)
        cmax = min(int(np.ceil(umax * res)), res - 1)
        rmin = max(int(np.floor(vmin * res)), 0)
        rmax = min(int(np.ceil(vmax * res)), res - 1)
        if cmax < cmin or rmax < rmin:
            continue
        colg, rowg = np.meshgrid(np.arange(cmin, cmax + 1), np.arange(rmin, rmax + 1))
        px = (colg + 0.5) / res
        py = (rowg + 0.5) / res
        w0 = _edge_sign(b, c, px, py)
        w1 = _edge_sign(c, a, px, py)
        w2 = _edge_sign(a, b, px, py)
        if area > 0:
            strict = (w0 > 0) & (w1 > 0) & (w2 > 0)
        else:
            strict = (w0 < 0) & (w1 < 0) & (w2 < 0)
        count[(rowg * res + colg)[strict]] += 1
    if np.any(count > 1):
        raise ValueError("overlapping UV triangulation")
