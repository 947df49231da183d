"""Neighbor-view selection from the sparse SfM model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySupport, NoNeighbors
from .geometry import Camera, perturb_point
from .scene_io import SparseModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    eps: float = 0.002
    t_tau: float = 0.1
    k: int = 8
    baseline_cap: float = 0.1
    angle_cap: float = 0.05


@dataclass(frozen=True)
class PairStats:
    source_id: int
    tau: float
    baseline: float
    angle: float
    shared_count: int
    zeta: float = math.nan


def _project_many(cam: Camera, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xc = X @ cam.R.T + cam.t
    z = Xc[:, 2]
    uv = np.stack(
        [cam.fx * Xc[:, 0] / z + cam.cx, cam.fy * Xc[:, 1] / z + cam.cy], axis=1
    )
    return uv, z


def displacement_tau(cam_i: Camera, cam_j: Camera, shared_points, eps: float) -> float:
    """Mean pixel displacement in view j when points are pushed away from ``C_i``.

    Raises:
        EmptySupport: no shared points were given.
    """
    X = np.asarray(shared_points, dtype=np.float64).reshape(-1, 3)
    if len(X) == 0:
        raise EmptySupport("no shared points")
    X_hat = perturb_point(X, cam_i.center, eps)
    uv, _ = _project_many(cam_j, X)
    uv_hat, _ = _project_many(cam_j, X_hat)
    return float(np.mean(np.linalg.norm(uv_hat - uv, axis=1)))


def score_zeta(
    stats: PairStats, baseline_cap: float = 0.1, angle_cap: float = 0.05
) -> float:
    """Ranking score; smaller is preferred."""
    if stats.shared_count <= 0:
        raise EmptySupport(f"source {stats.source_id} shares no points")
    return (
        min(stats.baseline, baseline_cap) * min(stats.angle, angle_cap)
        / stats.shared_count
    )


def axis_angle(cam_i: Camera, cam_j: Camera) -> float:
    """Angle in radians between the two principal axes."""
    c = float(np.clip(cam_i.axis @ cam_j.axis, -1.0, 1.0))
    return math.acos(c)


def pair_stats(
    model: SparseModel, ref_id: int, src_id: int, cfg: SelectionConfig
) -> PairStats:
    cam_i, cam_j = model.camera(ref_id), model.camera(src_id)
    shared = sorted(set(model.linked_points(ref_id)) & set(model.linked_points(src_id)))
    X = np.array([model.points3d[p].position for p in shared]).reshape(-1, 3)
    if len(X):
        # drop points behind either camera; they cannot project
        _, zi = _project_many(cam_i, X)
        _, zj = _project_many(cam_j, X)
        _, zh = _project_many(cam_j, perturb_point(X, cam_i.center, cfg.eps))
        X = X[(zi > 0) & (zj > 0) & (zh > 0)]
    baseline = float(np.linalg.norm(cam_i.center - cam_j.center))
    angle = axis_angle(cam_i, cam_j)
    if len(X) == 0:
        return PairStats(src_id, math.nan, baseline, angle, 0)
    tau = displacement_tau(cam_i, cam_j, X, cfg.eps)
    stats = PairStats(src_id, tau, baseline, angle, len(X))
    zeta = score_zeta(stats, cfg.baseline_cap, cfg.angle_cap)
    return PairStats(src_id, tau, baseline, angle, len(X), zeta)


def select_neighbors(
    model: SparseModel,
    ref_id: int,
    t_tau: float = 0.1,
    eps: float = 0.002,
    k: int = 8,
    cfg: SelectionConfig | None = None,
) -> list[int]:
    """Pick up to ``k`` source images for ``ref_id``, best first.

    Sources with ``tau < t_tau`` or no shared points are dropped; the rest are
    ordered by ascending score, ties broken by image id.

    Raises:
        NoNeighbors: no source survives the filters.
    """
    if cfg is None:
        cfg = SelectionConfig(eps=eps, t_tau=t_tau, k=k)
    if ref_id not in model.images:
        raise KeyError(ref_id)
    survivors = []
    for src_id in sorted(model.images):
        if src_id == ref_id:
            continue
        stats = pair_stats(model, ref_id, src_id, cfg)
        if stats.shared_count == 0 or stats.tau < cfg.t_tau:
            continue
        survivors.append(stats)
    if not survivors:
        raise NoNeighbors(f"image {ref_id} has no usable source image")
    survivors.sort(key=lambda s: (s.zeta, s.source_id))
    chosen = [s.source_id for s in survivors[: cfg.k]]
    logger.debug("image %d neighbors: %s", ref_id, chosen)
    return chosen
