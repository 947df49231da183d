"""Plane hypothesis inference: fill holes of a filtered depth map.

Holes are filled along four scanline directions by local line fits; one
hypothesis per pixel is then chosen by MAP inference on a 4-connected grid
model at half resolution, and normals of the filled pixels are recomputed
from their neighbors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, _phi_kernels
from .depthmap import DepthNormalMap
from .errors import ConfigError, DomainError
from .geometry import Camera
from .matcher import MatchConfig, ViewBundle

logger = logging.getLogger(__name__)

# direction tags; STEREO marks the retained estimate of a reconstructed pixel
HORIZONTAL, VERTICAL, DIAG_UP, DIAG_DOWN, STEREO = 0, 1, 2, 3, 4
DIRECTIONS = ((1, 0), (0, 1), (1, -1), (1, 1))
MAX_LABELS = 4


@dataclass(frozen=True)
class PhiConfig:
    kappa1: float = 4.0
    kappa2: float = 0.5
    kappa3: float = 2.0
    fit_support: int = 6
    trw_iterations: int = 1

    def __post_init__(self):
        if not self.kappa1 > 0:
            raise ConfigError("kappa1 must be positive")
        if not self.kappa2 > 0:
            raise ConfigError("kappa2 must be positive")
        if not self.kappa3 >= 1:
            raise ConfigError("kappa3 must be at least 1")
        if self.fit_support < 2:
            raise ConfigError("fit_support must be at least 2")
        if self.trw_iterations < 1:
            raise ConfigError("trw_iterations must be at least 1")


@dataclass
class HypothesisSet:
    """Per-pixel candidate depths.

    Attributes:
        depths: ``(H, W, 4)``; the first ``count`` entries are used, the rest NaN.
        tags: ``(H, W, 4)`` direction tag of each entry, ``-1`` when unused.
        count: ``(H, W)`` number of entries.
    """

    depths: np.ndarray
    tags: np.ndarray
    count: np.ndarray

    def at(self, x) -> list[tuple[float, int]]:
        u, v = int(x[0]), int(x[1])
        return [
            (float(self.depths[v, u, k]), int(self.tags[v, u, k]))
            for k in range(self.count[v, u])
        ]


def generate_hypotheses(
    filtered: DepthNormalMap, cfg: PhiConfig | None = None
) -> HypothesisSet:
    """Directional line-fit hypotheses for every hole of ``filtered``.

    Reconstructed pixels carry their own depth as the single entry. A hole gets
    one entry per direction whose line holds at least two valid pixels and
    whose fitted depth is positive.
    """
    cfg = cfg or PhiConfig()
    h, w = filtered.depth.shape
    valid = np.ascontiguousarray(filtered.valid)
    depth = np.ascontiguousarray(filtered.depth, dtype=np.float64)
    fills = np.full((h, w, len(DIRECTIONS)), np.nan)
    for k, (du, dv) in enumerate(DIRECTIONS):
        out = np.full((h, w), np.nan)
        _phi_kernels.fill_direction(depth, valid, du, dv, cfg.fit_support, out)
        fills[..., k] = out
    fills[valid] = np.nan
    # compact the finite entries to the front, keeping direction order
    missing = np.isnan(fills)
    order = np.argsort(missing, axis=2, kind="stable")
    depths = np.take_along_axis(fills, order, axis=2)
    tags = np.where(np.take_along_axis(missing, order, axis=2), -1, order).astype(np.int8)
    count = (~missing).sum(axis=2)
    depths[valid, 0] = depth[valid]
    tags[valid, 0] = STEREO
    count[valid] = 1
    return HypothesisSet(depths, tags, count)


def node_potential(cost, c_max: float, cfg: PhiConfig | None = None):
    """Node potential from an aggregated matching cost."""
    cfg = cfg or PhiConfig()
    cost = np.minimum(cost, c_max)
    return (c_max - cost) / cfg.kappa1 + cfg.kappa2


def unary_from_cost(cost, c_max: float, cfg: PhiConfig | None = None):
    """Node energy ``-log`` of :func:`node_potential`."""
    phi = node_potential(cost, c_max, cfg)
    if np.any(phi <= 0):
        raise DomainError("node potential must be positive")
    return -np.log(phi)


def hypothesis_cost(
    bundle: ViewBundle, x, h: float, match_cfg: MatchConfig | None = None
) -> float:
    """Aggregated cost of a fronto-parallel window at depth ``h``.

    Window samples are back-projected at constant depth and reprojected into
    every source view; no homography is involved.
    """
    match_cfg = match_cfg or MatchConfig()
    if not h > 0:
        raise DomainError("hypothesis depth must be positive")
    out = np.empty((1, 1))
    _kernels.fronto_costs(
        bundle.ref, np.array([[float(x[0]), float(x[1])]]), np.array([[float(h)]]),
        *bundle.kernel_args(match_cfg), out,
    )
    return float(out[0, 0])


def unary_energy(
    x,
    h: float,
    bundle: ViewBundle,
    match_cfg: MatchConfig | None = None,
    cfg: PhiConfig | None = None,
) -> float:
    """Energy of assigning depth ``h`` to reference pixel ``x``."""
    match_cfg = match_cfg or MatchConfig()
    cost = hypothesis_cost(bundle, x, h, match_cfg)
    return float(unary_from_cost(cost, match_cfg.c_max, cfg))


def edge_potential(h1: float, h2: float, cfg: PhiConfig | None = None) -> float:
    """Smoothness potential; the ratio uses the smaller depth as denominator."""
    cfg = cfg or PhiConfig()
    if not (h1 > 0 and h2 > 0):
        raise DomainError("depths must be positive")
    if h1 > h2:
        ratio = (h1 - h2) / h2
    else:
        ratio = (h2 - h1) / h1
    return (cfg.kappa3 - min(1.0, ratio)) ** 2


def pairwise_energy(h1: float, h2: float, cfg: PhiConfig | None = None) -> float:
    return -math.log(edge_potential(h1, h2, cfg))


@dataclass
class GridGraph:
    """4-connected pairwise model over an ``H x W`` grid.

    Nodes with zero labels do not belong to the graph; edges are only formed
    between two member nodes.

    Attributes:
        depths: ``(H, W, K)`` label depths (entries past ``count`` ignored).
        unary: ``(H, W, K)`` node energies.
        count: ``(H, W)`` label counts.
        kappa3: edge truncation constant.
    """

    depths: np.ndarray
    unary: np.ndarray
    count: np.ndarray
    kappa3: float = 2.0

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.count = np.asarray(self.count, dtype=np.int64)
        if self.depths.shape != self.unary.shape or self.depths.shape[:2] != self.count.shape:
            raise ValueError("depths, unary and count shapes disagree")
        if np.any(self.count < 0) or np.any(self.count > self.depths.shape[2]):
            raise ValueError("label count out of range")
        k = np.arange(self.depths.shape[2])
        used = k[None, None, :] < self.count[..., None]
        if np.any(~(self.depths[used] > 0)):
            raise DomainError("label depths must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape

    def _flat(self):
        h, w, k = self.depths.shape
        used = np.arange(k)[None, None, :] < self.count[..., None]
        depths = np.where(used, self.depths, 1.0).reshape(h * w, k)
        unary = np.where(used, self.unary, np.inf).reshape(h * w, k)
        return unary, depths, self.count.reshape(-1)

    def energy(self, labels: np.ndarray) -> float:
        unary, depths, count = self._flat()
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        return float(
            _phi_kernels.labeling_energy(
                unary, depths, count, self.shape[1], self.kappa3, labels
            )
        )


def decode_map(graph: GridGraph, cfg: PhiConfig | None = None) -> np.ndarray:
    """Approximate MAP labeling by sequential tree-reweighted message passing.

    After ``cfg.trw_iterations`` forward/backward sweeps, three labelings are
    read from the messages: the independent belief minimum, and sequential
    conditional decodings in forward and in backward order. The per-node
    unary minimum is added as a fourth candidate and the candidate of lowest
    energy is returned (earliest on ties). On chains the belief minimum is
    already exact.

    Returns:
        ``(H, W)`` label indices, ``-1`` for nodes outside the graph.
    """
    cfg = cfg or PhiConfig()
    unary, depths, count = graph._flat()
    w = graph.shape[1]
    k3 = graph.kappa3
    msg = _phi_kernels.trw_messages(unary, depths, count, w, k3, cfg.trw_iterations)
    greedy = np.where(count > 0, np.argmin(unary, axis=1), -1)
    candidates = [
        _phi_kernels.belief_labels(unary, depths, count, msg),
        _phi_kernels.conditional_labels(unary, depths, count, w, k3, msg, False),
        _phi_kernels.conditional_labels(unary, depths, count, w, k3, msg, True),
        greedy.astype(np.int64),
    ]
    energies = [
        _phi_kernels.labeling_energy(unary, depths, count, w, k3, lab)
        for lab in candidates
    ]
    best = int(np.argmin(energies))
    return candidates[best].reshape(graph.shape)


def _camera_points(depth: np.ndarray, cam: Camera) -> np.ndarray:
    h, w = depth.shape
    u = (np.arange(w) - cam.cx) / cam.fx
    v = (np.arange(h) - cam.cy) / cam.fy
    rays = np.stack(
        [np.broadcast_to(u[None, :], (h, w)), np.broadcast_to(v[:, None], (h, w)),
         np.ones((h, w))], axis=-1,
    )
    return depth[..., None] * rays


def _normals_at(
    depth: np.ndarray,
    has_depth: np.ndarray,
    fallback: np.ndarray,
    cam: Camera,
    pixels: np.ndarray,
) -> np.ndarray:
    """Neighbor-based normals at ``pixels`` (``(M, 2)`` integer ``(u, v)``).

    A missing neighbor is replaced by the center point (one-sided difference).
    When an axis has no neighbor at all, or the cross product vanishes,
    ``fallback`` supplies the normal for that pixel.
    """
    h, w = depth.shape
    X = _camera_points(np.where(has_depth, depth, 0.0), cam)
    u, v = pixels[:, 0], pixels[:, 1]
    center = X[v, u]

    def side(du, dv):
        uu, vv = u + du, v + dv
        inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        uu, vv = np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1)
        ok = inside & has_depth[vv, uu]
        return np.where(ok[:, None], X[vv, uu], center), ok

    X_u, ok_u = side(0, -1)
    X_d, ok_d = side(0, 1)
    X_l, ok_l = side(-1, 0)
    X_r, ok_r = side(1, 0)
    n = np.cross(X_u - X_d, X_l - X_r)
    norm = np.linalg.norm(n, axis=1)
    scale = np.linalg.norm(X_u - X_d, axis=1) * np.linalg.norm(X_l - X_r, axis=1)
    good = (ok_u | ok_d) & (ok_l | ok_r) & (norm >= 1e-12) & (norm > 1e-12 * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[:, None]
    n = np.where(good[:, None], n, fallback)
    rays = np.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(len(u))], axis=1
    )
    flip = np.einsum("ij,ij->i", n, rays) > 0
    n[flip] *= -1.0
    return n


def _fallback_normals(dmap: DepthNormalMap, cam: Camera, pixels: np.ndarray) -> np.ndarray:
    """Previous normal, else the first valid 4-neighbor's, else facing the ray."""
    h, w = dmap.depth.shape
    u, v = pixels[:, 0], pixels[:, 1]
    rays = np.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(len(u))], axis=1
    )
    out = -rays / np.linalg.norm(rays, axis=1, keepdims=True)
    done = np.zeros(len(u), dtype=bool)
    for du, dv in ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)):
        uu, vv = u + du, v + dv
        inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        uu, vv = np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1)
        cand = dmap.normal[vv, uu]
        ok = ~done & inside & (np.linalg.norm(cand, axis=1) > 0)
        if (du, dv) != (0, 0):
            ok &= dmap.valid[vv, uu]
        out[ok] = cand[ok] / np.linalg.norm(cand[ok], axis=1, keepdims=True)
        done |= ok
    return out


def recompute_normal(dmap: DepthNormalMap, x, cam: Camera) -> np.ndarray:
    """Unit normal at ``x`` from the back-projected 4-connected neighbors.

    Uses ``(X_u - X_d) x (X_l - X_r)``, normalised and flipped toward the
    camera. Degenerate configurations fall back to the pixel's previous
    normal, then to a valid neighbor's normal, then to the reversed ray.
    """
    pix = np.array([[int(x[0]), int(x[1])]], dtype=np.int64)
    fallback = _fallback_normals(dmap, cam, pix)
    return _normals_at(dmap.depth, dmap.valid, fallback, cam, pix)[0]


@dataclass
class PhiTrace:
    holes: int = 0
    nodes: int = 0
    filled: int = 0
    energy: float = math.nan


def infer_planes(
    filtered: DepthNormalMap,
    bundle: ViewBundle,
    cam: Camera,
    match_cfg: MatchConfig | None = None,
    cfg: PhiConfig | None = None,
    trace: PhiTrace | None = None,
    events: list | None = None,
) -> DepthNormalMap:
    """Fill the holes of one filtered map.

    Args:
        filtered: filtered depth/normal map of the reference image.
        bundle: reference image and its neighbor views.
        cam: reference camera.
        match_cfg: window configuration used for hypothesis costs.
        cfg: inference parameters.
        trace: optional diagnostics sink.
        events: optional list receiving the names of the steps as they run.

    Returns:
        A new map. Valid input pixels are copied unchanged; filled holes get
        the chosen depth, a recomputed normal and their hypothesis cost.
    """
    match_cfg = match_cfg or MatchConfig()
    cfg = cfg or PhiConfig()
    log = events.append if events is not None else (lambda name: None)
    holes = ~filtered.valid
    if not holes.any():
        return filtered.copy()
    hyp = generate_hypotheses(filtered, cfg)
    log("generate_hypotheses")
    c_max = match_cfg.c_max

    # half-resolution graph on even pixels
    hd = hyp.depths[0::2, 0::2]
    hc = hyp.count[0::2, 0::2]
    hv = filtered.valid[0::2, 0::2]
    log("downsample")
    unary = np.zeros(hd.shape)
    kept = np.minimum(filtered.cost[0::2, 0::2][hv], c_max)
    unary[hv, 0] = unary_from_cost(kept, c_max, cfg)
    need = (~hv) & (hc > 0)
    vv, uu = np.nonzero(need)
    if len(vv):
        costs = np.empty((len(vv), MAX_LABELS))
        pix = np.stack([2 * uu, 2 * vv], axis=1).astype(np.float64)
        _kernels.fronto_costs(
            bundle.ref, pix, np.ascontiguousarray(hd[vv, uu]),
            *bundle.kernel_args(match_cfg), costs,
        )
        used = np.arange(MAX_LABELS)[None, :] < hc[vv, uu][:, None]
        unary[vv, uu] = np.where(
            used, unary_from_cost(np.where(used, costs, c_max), c_max, cfg), 0.0
        )
    log("hypothesis_costs")
    graph = GridGraph(np.nan_to_num(hd, nan=1.0), unary, hc, cfg.kappa3)
    labels = decode_map(graph, cfg)
    log("decode")
    chosen = np.take_along_axis(hd, np.maximum(labels, 0)[..., None], axis=2)[..., 0]
    reference = np.where(labels >= 0, chosen, np.nan)

    # nearest-neighbor upsampling and closest-hypothesis selection
    h, w = filtered.depth.shape
    ref_full = reference[np.arange(h)[:, None] // 2, np.arange(w)[None, :] // 2]
    diff = np.abs(hyp.depths - ref_full[..., None])
    diff[np.isnan(diff)] = np.inf
    pick = np.argmin(diff, axis=2)
    fill = holes & (hyp.count > 0) & np.isfinite(ref_full)
    new_depth = np.take_along_axis(hyp.depths, pick[..., None], axis=2)[..., 0]

    out = filtered.copy()
    out.depth[fill] = new_depth[fill]
    out.valid = filtered.valid | fill
    log("select_hypotheses")
    vf, uf = np.nonzero(fill)
    if len(vf):
        pix = np.stack([uf, vf], axis=1).astype(np.int64)
        fallback = _fallback_normals(filtered, cam, pix)
        out.normal[vf, uf] = _normals_at(out.depth, out.valid, fallback, cam, pix)
        costs = np.empty((len(vf), 1))
        _kernels.fronto_costs(
            bundle.ref, pix.astype(np.float64), new_depth[vf, uf][:, None].copy(),
            *bundle.kernel_args(match_cfg), costs,
        )
        out.cost[vf, uf] = np.minimum(costs[:, 0], c_max)
    log("recompute_normals")
    if trace is not None:
        trace.holes = int(holes.sum())
        trace.nodes = int((hc > 0).sum())
        trace.filled = int(fill.sum())
        trace.energy = graph.energy(labels)
    logger.debug("filled %d of %d holes", int(fill.sum()), int(holes.sum()))
    return out


def infer_planes_for_image(
    ref_id: int,
    filtered: DepthNormalMap,
    neighbors: list[int],
    model,
    images: dict,
    match_cfg: MatchConfig | None = None,
    cfg: PhiConfig | None = None,
    trace: PhiTrace | None = None,
    events: list | None = None,
) -> DepthNormalMap:
    """:func:`infer_planes` with the view bundle assembled from a sparse model."""
    cam = model.camera(ref_id)
    bundle = ViewBundle.build(
        images[ref_id], cam, [(images[j], model.camera(j)) for j in neighbors], neighbors
    )
    return infer_planes(filtered, bundle, cam, match_cfg, cfg, trace, events)


__all__ = [
    "PhiConfig", "HypothesisSet", "GridGraph", "PhiTrace", "generate_hypotheses",
    "node_potential", "unary_from_cost", "hypothesis_cost", "unary_energy",
    "edge_potential", "pairwise_energy", "decode_map", "recompute_normal",
    "infer_planes", "infer_planes_for_image",
]
