"""Greedy cross-view merging of filtered depth maps into one point cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import Camera
from .scene_io import PointCloud

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusedPoint:
    position: np.ndarray
    normal: np.ndarray
    support: int
    color: tuple


@dataclass
class FusedCloud:
    """Fused points as parallel arrays.

    Attributes:
        positions: ``(P, 3)`` running-mean positions (world frame).
        normals: ``(P, 3)`` world-frame normal of each reference contributor.
        colors: ``(P, 3)`` uint8 colors sampled at the reference pixel.
        support: ``(P,)`` number of merged views.
        source: ``(P, 3)`` int ``(image_id, v, u)`` of the reference pixel.
        consumed: per image id, how often each pixel was used (0 or 1).
    """

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    support: np.ndarray
    source: np.ndarray
    consumed: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.support)

    def __getitem__(self, k: int) -> FusedPoint:
        return FusedPoint(
            self.positions[k].copy(), self.normals[k].copy(), int(self.support[k]),
            tuple(int(c) for c in self.colors[k]),
        )

    def to_point_cloud(self) -> PointCloud:
        return PointCloud(self.positions, self.normals, self.colors)


def _pixel_rays(cam: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(len(u))], 1)


def _to_world(cam: Camera, X_cam: np.ndarray) -> np.ndarray:
    return (X_cam - cam.t) @ cam.R


def _gray_colors(image, v, u) -> np.ndarray:
    if image is None:
        return np.full((len(u), 3), 255, dtype=np.uint8)
    data = getattr(image, "data", image)
    if data.ndim == 3:
        vals = data[v, u, :3]
    else:
        vals = np.repeat(data[v, u][:, None], 3, axis=1)
    return np.clip(np.round(vals * 255.0), 0, 255).astype(np.uint8)


def fuse(
    maps,
    cams: dict,
    images: dict | None = None,
    rel_tol: float = 0.01,
) -> FusedCloud:
    """Merge depth maps image by image.

    Args:
        maps: ordered ``(image_id, DepthNormalMap)`` pairs (or a dict, taken in
            key order). Input maps are not modified.
        cams: image id -> :class:`Camera`.
        images: image id -> grayscale image in ``[0, 1]`` for colors; optional.
        rel_tol: merge threshold on ``|X_i - X'_j| / |X_i - C_j|``.

    Returns:
        The fused cloud. Every valid input pixel is accounted for exactly once:
        either it seeds a point or it is merged into one.
    """
    if not rel_tol > 0:
        raise DomainError("rel_tol must be positive")
    items = list(maps.items()) if isinstance(maps, dict) else list(maps)
    ids = [i for i, _ in items]
    avail = {i: m.valid.copy() for i, m in items}
    consumed = {i: np.zeros(m.valid.shape, dtype=np.int64) for i, m in items}
    # world points of every valid pixel, computed once per image
    world = {}
    for i, m in items:
        v, u = np.nonzero(m.valid)
        X = m.depth[v, u][:, None] * _pixel_rays(cams[i], u.astype(float), v.astype(float))
        Xw = np.full(m.valid.shape + (3,), np.nan)
        Xw[v, u] = _to_world(cams[i], X)
        world[i] = Xw
    out_pos, out_nrm, out_col, out_sup, out_src = [], [], [], [], []
    for k, (i, m) in enumerate(items):
        cam_i = cams[i]
        v, u = np.nonzero(avail[i])
        if len(v) == 0:
            continue
        consumed[i][v, u] += 1
        avail[i][v, u] = False
        X = world[i][v, u]
        total = X.copy()
        support = np.ones(len(v), dtype=np.int64)
        for j in ids[k + 1:]:
            cam_j = cams[j]
            Xc = X @ cam_j.R.T + cam_j.t
            z = Xc[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                uj = np.floor(cam_j.fx * Xc[:, 0] / z + cam_j.cx + 0.5)
                vj = np.floor(cam_j.fy * Xc[:, 1] / z + cam_j.cy + 0.5)
            hj, wj = avail[j].shape
            ok = (z > 0) & (uj >= 0) & (uj < wj) & (vj >= 0) & (vj < hj)
            cand = np.flatnonzero(ok)
            if len(cand) == 0:
                continue
            uj = uj[cand].astype(np.int64)
            vj = vj[cand].astype(np.int64)
            keep = avail[j][vj, uj]
            cand, uj, vj = cand[keep], uj[keep], vj[keep]
            Xj = world[j][vj, uj]
            dist = np.linalg.norm(X[cand] - Xj, axis=1)
            scale = np.linalg.norm(X[cand] - cam_j.center, axis=1)
            keep = dist < rel_tol * scale
            cand, uj, vj, Xj = cand[keep], uj[keep], vj[keep], Xj[keep]
            # a target pixel goes to the first reference pixel in raster order
            _, first = np.unique(vj * wj + uj, return_index=True)
            cand, uj, vj, Xj = cand[first], uj[first], vj[first], Xj[first]
            avail[j][vj, uj] = False
            consumed[j][vj, uj] += 1
            total[cand] += Xj
            support[cand] += 1
        out_pos.append(total / support[:, None])
        out_nrm.append(m.normal[v, u] @ cam_i.R)
        out_col.append(_gray_colors(None if images is None else images.get(i), v, u))
        out_sup.append(support)
        out_src.append(np.stack([np.full(len(v), i), v, u], axis=1))
        logger.debug("image %s: %d points", i, len(v))
    if out_pos:
        cloud = FusedCloud(
            np.concatenate(out_pos), np.concatenate(out_nrm), np.concatenate(out_col),
            np.concatenate(out_sup), np.concatenate(out_src), consumed,
        )
    else:
        cloud = FusedCloud(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
            np.zeros(0, np.int64), np.zeros((0, 3), np.int64), consumed,
        )
    return cloud


__all__ = ["FusedPoint", "FusedCloud", "fuse"]
