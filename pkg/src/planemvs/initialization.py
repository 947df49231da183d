"""Random per-pixel initialization seeded by reliable sparse features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import DomainError
from .geometry import Camera, PlaneHypothesis
from .scene_io import SparseModel


@dataclass(frozen=True)
class ReliableFeature:
    pixel: np.ndarray
    depth: float


@dataclass(frozen=True)
class SceneDepthRange:
    d_min_scene: float
    d_max_scene: float

    def __post_init__(self):
        if not 0 < self.d_min_scene <= self.d_max_scene:
            raise DomainError(
                f"invalid depth range [{self.d_min_scene}, {self.d_max_scene}]"
            )


class FeatureIndex:
    """Spatial index over reliable features of one reference image."""

    def __init__(self, features: list[ReliableFeature], radius: float):
        self.radius = float(radius)
        self.pixels = np.array([f.pixel for f in features], dtype=np.float64).reshape(-1, 2)
        self.depths = np.array([f.depth for f in features], dtype=np.float64)
        self._tree = cKDTree(self.pixels) if len(features) else None

    def __len__(self) -> int:
        return len(self.depths)

    def quadrant_nearest(self, x) -> list[int]:
        """Index of the closest in-radius feature in each occupied quadrant."""
        if self._tree is None:
            return []
        x = np.asarray(x, dtype=np.float64)
        idx = sorted(self._tree.query_ball_point(x, self.radius))
        best: dict[int, tuple[float, int]] = {}
        for i in idx:
            dx, dy = self.pixels[i] - x
            d2 = dx * dx + dy * dy
            if not d2 < self.radius * self.radius:
                continue
            q = (0 if dy < 0 else 2) + (0 if dx < 0 else 1)
            if q not in best or d2 < best[q][0]:
                best[q] = (d2, i)
        return [best[q][1] for q in sorted(best)]

    def grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """CSR bucket layout (cell size = radius) consumed by the map kernel."""
        cell = max(self.radius, 1.0)
        if len(self) == 0:
            return np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros(2, np.int64), cell
        cells = np.floor(self.pixels / cell).astype(np.int64)
        cells -= cells.min(axis=0)
        ncx, ncy = cells.max(axis=0) + 1
        key = cells[:, 1] * ncx + cells[:, 0]
        order = np.argsort(key, kind="stable")
        starts = np.zeros(ncx * ncy + 1, dtype=np.int64)
        np.add.at(starts, key + 1, 1)
        starts = np.cumsum(starts)
        origin = np.floor(self.pixels.min(axis=0) / cell).astype(np.int64)
        meta = np.array([ncx, ncy, origin[0], origin[1]], dtype=np.int64)
        return starts, order.astype(np.int64), meta, cell


def collect_reliable(
    model: SparseModel, ref_id: int, max_error: float = 2.0
) -> list[ReliableFeature]:
    """Features of ``ref_id`` whose 3D point is well reconstructed and widely seen.

    A point qualifies when its reprojection error is below ``max_error`` and its
    track length is at least ``floor(v - 1)``, with ``v`` the mean track length
    over the whole model. The per-pixel distance gate is applied later.
    """
    if not model.points3d:
        return []
    v = np.mean([len(p.track) for p in model.points3d.values()])
    min_track = math.floor(v - 1)
    cam = model.camera(ref_id)
    out = []
    for obs in model.images[ref_id].observations:
        if obs.point3d_id < 0:
            continue
        p = model.points3d[obs.point3d_id]
        if not p.reproj_error < max_error or len(p.track) < min_track:
            continue
        depth = float((cam.R @ p.position + cam.t)[2])
        if depth > 0:
            out.append(ReliableFeature(np.array(obs.xy, dtype=np.float64), depth))
    return out


def scene_depth_range(
    features: list[ReliableFeature], model: SparseModel | None = None, ref_id=None
) -> SceneDepthRange:
    """Robust 1st/99th percentile depth range.

    Falls back to every positive-depth linked point of ``ref_id`` when no
    reliable feature exists.
    """
    depths = np.array([f.depth for f in features])
    if len(depths) == 0 and model is not None:
        cam = model.camera(ref_id)
        depths = np.array(
            [
                (cam.R @ model.points3d[pid].position + cam.t)[2]
                for pid in model.linked_points(ref_id)
            ]
        )
        depths = depths[depths > 0]
    if len(depths) == 0:
        raise DomainError(f"no depth evidence for image {ref_id}")
    lo, hi = np.percentile(depths, [1.0, 99.0])
    return SceneDepthRange(float(lo), float(max(hi, lo)))


def sample_normal(theta: float, phi: float) -> np.ndarray:
    """Unit normal from the two sampling angles (before camera-facing flip)."""
    return np.array(
        [math.cos(theta) * math.sin(phi), math.sin(theta) * math.sin(phi), math.cos(phi)]
    )


def hypothesis_from_uniforms(
    cam: Camera,
    x,
    index: FeatureIndex,
    depth_range: SceneDepthRange,
    u_depth: float,
    u_theta: float,
    u_phi: float,
) -> PlaneHypothesis:
    chosen = index.quadrant_nearest(x)
    if len(chosen) >= 2:
        d = index.depths[chosen]
        lo, hi = float(d.min()), float(d.max())
    else:
        lo, hi = depth_range.d_min_scene, depth_range.d_max_scene
    depth = lo + u_depth * (hi - lo)
    n = sample_normal(2.0 * math.pi * u_theta, math.pi * (u_phi - 0.5))
    return PlaneHypothesis.facing(cam, x, depth, n)


def init_pixel(
    x,
    features: FeatureIndex,
    depth_range: SceneDepthRange,
    rng: np.random.Generator,
    cam: Camera,
) -> PlaneHypothesis:
    """Random hypothesis for pixel ``x``.

    The depth is uniform between the extreme depths of the closest in-radius
    feature of each image quadrant when at least two quadrants are occupied,
    otherwise uniform over the scene range.
    """
    u = rng.random(3)
    return hypothesis_from_uniforms(cam, x, features, depth_range, u[0], u[1], u[2])


def initialize_map(
    cam: Camera,
    features: FeatureIndex,
    depth_range: SceneDepthRange,
    uniforms: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`init_pixel` over a full image.

    ``uniforms`` has shape ``(3, H, W)`` (depth, azimuth, elevation draws).
    Returns ``(depth, normal)`` arrays.
    """
    starts, order, meta, cell = features.grid()
    h, w = uniforms.shape[1:]
    depth = np.empty((h, w))
    normal = np.empty((h, w, 3))
    _kernels.init_map(
        features.pixels,
        features.depths,
        starts,
        order,
        meta,
        cell,
        features.radius,
        depth_range.d_min_scene,
        depth_range.d_max_scene,
        np.array([cam.fx, cam.fy, cam.cx, cam.cy]),
        uniforms,
        depth,
        normal,
    )
    return depth, normal
