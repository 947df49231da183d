"""Cross-view geometric-consistency filtering of depth/normal maps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .depthmap import DepthNormalMap
from .errors import ConfigError
from .geometry import Camera, PlaneHypothesis, relative_pose

logger = logging.getLogger(__name__)

# per-pixel outcome codes, in the order the tests are applied
CONSISTENT = 0
OUT_OF_VIEW = 1
DEPTH = 2
NORMAL = 3
REPROJECTION = 4

REASONS = {
    CONSISTENT: "consistent",
    OUT_OF_VIEW: "out_of_view",
    DEPTH: "depth",
    NORMAL: "normal",
    REPROJECTION: "reprojection",
}


@dataclass(frozen=True)
class ConsistencyConfig:
    """Thresholds of the pairwise test.

    ``relative=False`` compares raw depth differences against
    ``rel_depth_tol`` instead of differences scaled by the source depth.
    """

    rel_depth_tol: float = 0.02
    angle_tol_deg: float = 30.0
    reproj_tol_px: float = 1.0
    min_support: int = 2
    relative: bool = True

    def __post_init__(self):
        if not (self.rel_depth_tol > 0 and self.angle_tol_deg > 0 and self.reproj_tol_px > 0):
            raise ConfigError("consistency tolerances must be positive")
        if self.min_support < 1:
            raise ConfigError("min_support must be at least 1")


@dataclass(frozen=True)
class PairResult:
    consistent: bool
    reason: str


def _pixel_grid(h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w]
    return np.stack([u, v], axis=-1).astype(np.float64)


def pair_codes(
    cam_i: Camera,
    pix: np.ndarray,
    depth: np.ndarray,
    normal: np.ndarray,
    cam_j: Camera,
    map_j: DepthNormalMap,
    cfg: ConsistencyConfig,
) -> np.ndarray:
    """Outcome code for each reference sample against source map ``map_j``.

    Args:
        cam_i: reference camera.
        pix: ``(M, 2)`` reference pixels.
        depth: ``(M,)`` positive reference depths.
        normal: ``(M, 3)`` reference normals (camera-i frame).
        cam_j: source camera.
        map_j: source depth/normal map.
        cfg: thresholds.

    Returns:
        ``(M,)`` int array of outcome codes (``CONSISTENT`` ... ``REPROJECTION``).
    """
    pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    normal = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    R_rel, t_rel = relative_pose(cam_i, cam_j)
    rays = np.stack(
        [(pix[:, 0] - cam_i.cx) / cam_i.fx, (pix[:, 1] - cam_i.cy) / cam_i.fy,
         np.ones(len(pix))], axis=1,
    )
    Xj = (depth[:, None] * rays) @ R_rel.T + t_rel
    d_ij = Xj[:, 2]
    n_ij = normal @ R_rel.T
    codes = np.full(len(pix), OUT_OF_VIEW, dtype=np.int64)
    h, w = map_j.height, map_j.width
    with np.errstate(divide="ignore", invalid="ignore"):
        uj = cam_j.fx * Xj[:, 0] / d_ij + cam_j.cx
        vj = cam_j.fy * Xj[:, 1] / d_ij + cam_j.cy
    inside = (d_ij > 0) & (uj >= 0) & (uj <= w - 1) & (vj >= 0) & (vj <= h - 1)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return codes
    uj, vj = uj[idx], vj[idx]
    # nearest pixel; halves round up, matching floor(x + 0.5)
    ur = np.minimum(np.floor(uj + 0.5).astype(np.int64), w - 1)
    vr = np.minimum(np.floor(vj + 0.5).astype(np.int64), h - 1)
    u0 = np.minimum(np.floor(uj).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(vj).astype(np.int64), max(h - 2, 0))
    au, av = uj - u0, vj - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    # bilinear depth restricted to valid corners, weights renormalised
    num = np.zeros(len(idx))
    den = np.zeros(len(idx))
    for uu, vv, wt in (
        (u0, v0, (1 - au) * (1 - av)),
        (u1, v0, au * (1 - av)),
        (u0, v1, (1 - au) * av),
        (u1, v1, au * av),
    ):
        ok = map_j.valid[vv, uu]
        num += np.where(ok, wt * map_j.depth[vv, uu], 0.0)
        den += np.where(ok, wt, 0.0)
    usable = map_j.valid[vr, ur] & (den > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_j = num / den
    n_j = map_j.normal[vr, ur]

    diff = np.abs(d_ij[idx] - d_j)
    if cfg.relative:
        depth_ok = diff < cfg.rel_depth_tol * d_j
    else:
        depth_ok = diff < cfg.rel_depth_tol
    cos = np.einsum("ij,ij->i", n_ij[idx], n_j)
    nn = np.linalg.norm(n_ij[idx], axis=1) * np.linalg.norm(n_j, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.clip(cos / nn, -1.0, 1.0)
    normal_ok = cos > math.cos(math.radians(cfg.angle_tol_deg))

    # forward-backward: lift x'_j with the source depth and project back into i
    with np.errstate(divide="ignore", invalid="ignore"):
        rays_j = np.stack(
            [(uj - cam_j.cx) / cam_j.fx, (vj - cam_j.cy) / cam_j.fy, np.ones(len(idx))],
            axis=1,
        )
        Xi = (d_j[:, None] * rays_j - t_rel) @ R_rel
        ub = cam_i.fx * Xi[:, 0] / Xi[:, 2] + cam_i.cx
        vb = cam_i.fy * Xi[:, 1] / Xi[:, 2] + cam_i.cy
        err = np.hypot(ub - pix[idx, 0], vb - pix[idx, 1])
    reproj_ok = (Xi[:, 2] > 0) & (err < cfg.reproj_tol_px)

    sub = np.where(
        ~usable, OUT_OF_VIEW,
        np.where(~depth_ok, DEPTH,
                 np.where(~normal_ok, NORMAL,
                          np.where(~reproj_ok, REPROJECTION, CONSISTENT))),
    )
    codes[idx] = sub
    return codes


def check_pair(
    cam_i: Camera,
    cam_j: Camera,
    x,
    hyp_i: PlaneHypothesis,
    map_j: DepthNormalMap,
    cfg: ConsistencyConfig | None = None,
) -> PairResult:
    """Test one reference hypothesis at pixel ``x`` against a source map."""
    cfg = cfg or ConsistencyConfig()
    code = int(
        pair_codes(cam_i, np.asarray([x], float), [hyp_i.depth], hyp_i.normal[None],
                   cam_j, map_j, cfg)[0]
    )
    return PairResult(code == CONSISTENT, REASONS[code])


def support_count(
    ref_id: int,
    maps: dict,
    cams: dict,
    cfg: ConsistencyConfig,
    sources=None,
) -> np.ndarray:
    """Number of source views each valid reference pixel agrees with."""
    ref = maps[ref_id]
    cam_i = cams[ref_id]
    if sources is None:
        sources = [j for j in sorted(maps) if j != ref_id]
    count = np.zeros(ref.depth.shape, dtype=np.int64)
    mask = ref.valid
    if not mask.any():
        return count
    pix = _pixel_grid(ref.height, ref.width)[mask]
    depth = ref.depth[mask]
    normal = ref.normal[mask]
    hits = np.zeros(len(depth), dtype=np.int64)
    for j in sources:
        if j == ref_id or j not in maps:
            continue
        hits += pair_codes(cam_i, pix, depth, normal, cams[j], maps[j], cfg) == CONSISTENT
    count[mask] = hits
    return count


def filter_map(
    ref_id: int,
    maps: dict,
    cams: dict,
    cfg: ConsistencyConfig | None = None,
    sources=None,
) -> DepthNormalMap:
    """Invalidate pixels of ``maps[ref_id]`` with too little cross-view support.

    Args:
        ref_id: image to filter.
        maps: image id -> :class:`DepthNormalMap` (read only).
        cams: image id -> :class:`Camera`.
        cfg: thresholds; a pixel survives with ``>= cfg.min_support`` agreeing views.
        sources: ids to test against; defaults to every other map.

    Returns:
        A new map; survivors are bit-identical to the input.
    """
    cfg = cfg or ConsistencyConfig()
    ref = maps[ref_id]
    support = support_count(ref_id, maps, cams, cfg, sources)
    out = ref.copy()
    out.valid = ref.valid & (support >= cfg.min_support)
    out.clear_invalid()
    logger.debug(
        "image %d: %d of %d pixels survive filtering",
        ref_id, int(out.valid.sum()), int(ref.valid.sum()),
    )
    return out


__all__ = [
    "ConsistencyConfig", "PairResult", "check_pair", "pair_codes", "support_count",
    "filter_map", "REASONS",
]
