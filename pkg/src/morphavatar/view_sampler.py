"""Generation-time camera sampling and the expression database.

Views are drawn uniformly from the interior of an azimuth/elevation ellipse
(defaults 55 and 20 degrees) by rejection from the bounding rectangle, each
camera orbiting the head center at a fixed distance. The expression database
picks a diverse subset of expression samples by greedy k-center selection
under a weighted Euclidean metric, the weights being each blendshape's
maximum vertex displacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, orbit_camera
from .morphable import MorphableModel

PSI_MAX_DEG = 55.0
THETA_MAX_DEG = 20.0


def inside_ellipse(psi, theta, psi_max: float = PSI_MAX_DEG,
                   theta_max: float = THETA_MAX_DEG):
    """Strict ellipse-interior predicate on (azimuth, elevation) in degrees."""
    return (np.asarray(psi) / psi_max) ** 2 + (np.asarray(theta) / theta_max) ** 2 < 1.0


@dataclass(frozen=True)
class ViewSample:
    azimuth: float
    elevation: float
    camera: Camera


@dataclass(frozen=True)
class ExpressionDatabase:
    representatives: np.ndarray  # (G, K_expr)
    weights: np.ndarray          # (K_expr,)
    indices: np.ndarray          # (G,) positions within the input sample set


def sample_views(count: int, psi_max: float = PSI_MAX_DEG,
                 theta_max: float = THETA_MAX_DEG, distance: float = 0.65,
                 seed: int = 0, center=(0.0, 0.0, 0.0),
                 fx: float | None = None, fy: float | None = None,
                 cx: float | None = None, cy: float | None = None,
                 width: int = 64, height: int = 64) -> list[ViewSample]:
    """Rejection-sample ``count`` orbit views inside the ellipse."""
    if psi_max <= 0 or theta_max <= 0:
        raise ValueError("ellipse bounds must be positive")
    rng = np.random.default_rng(seed)
    fx = fx if fx is not None else 1.25 * width
    fy = fy if fy is not None else fx
    cx = cx if cx is not None else width / 2.0
    cy = cy if cy is not None else height / 2.0

    out: list[ViewSample] = []
    while len(out) < count:
        psi = rng.uniform(-psi_max, psi_max)
        theta = rng.uniform(-theta_max, theta_max)
        if not inside_ellipse(psi, theta, psi_max, theta_max):
            continue
        cam = orbit_camera(center, distance, psi, theta,
                           fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
        out.append(ViewSample(azimuth=psi, elevation=theta, camera=cam))
    return out


def blendshape_weights(model: MorphableModel) -> np.ndarray:
    """Maximum vertex displacement of each expression blendshape."""
    disp = np.linalg.norm(model.expression_basis, axis=1)  # (N_v, K)
    return disp.max(axis=0)


def build_expression_database(samples: np.ndarray, count: int,
                              weights: np.ndarray, seed: int = 0) -> ExpressionDatabase:
    """Greedy k-center selection of ``count`` representatives.

    Distance is ``||weights * (a - b)||_2``. The first pick is the medoid
    under the minimax criterion; every further pick maximizes its minimum
    distance to the chosen set. Fully deterministic (ties resolve to the
    lowest index); ``seed`` is accepted for interface stability only.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if count < 1 or count > n:
        raise ValueError(f"cannot pick {count} representatives from {n} samples")
    scaled = samples * np.asarray(weights, dtype=np.float64)

    chosen = np.empty(count, dtype=np.int64)
    # medoid: minimize the maximum distance to all other samples
    sq = (scaled ** 2).sum(axis=1)
    d2 = np.clip(sq[:, None] + sq[None, :] - 2.0 * (scaled @ scaled.T), 0.0, None)
    chosen[0] = int(np.argmin(d2.max(axis=1)))
    min_d2 = d2[chosen[0]].copy()
    for k in range(1, count):
        chosen[k] = int(np.argmax(min_d2))
        np.minimum(min_d2, d2[chosen[k]], out=min_d2)
    return ExpressionDatabase(representatives=samples[chosen],
                              weights=np.asarray(weights, dtype=np.float64),
                              indices=chosen)
