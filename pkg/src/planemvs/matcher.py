"""PatchMatch depth/normal estimation with dilated ZNCC windows."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .depthmap import DepthNormalMap
from .errors import BorderHit, ConfigError, NoNeighbors, ZeroVariance
from .geometry import Camera, PlaneHypothesis, relative_pose
from .initialization import (
    FeatureIndex,
    SceneDepthRange,
    collect_reliable,
    initialize_map,
    scene_depth_range,
)
from .scene_io import GrayImage, SparseModel

logger = logging.getLogger(__name__)

RED, BLACK = 0, 1

DEFAULT_OFFSETS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, -3), (0, 3), (-3, 0), (3, 0))


@dataclass(frozen=True)
class MatchConfig:
    r_now: int = 5
    r_orig: int = 7
    z_min: float = -1.0
    omega: float = 1.0
    iterations: int = 8
    offsets: tuple = DEFAULT_OFFSETS

    def __post_init__(self):
        if self.r_now < 1 or self.r_orig < self.r_now:
            raise ConfigError("need 1 <= r_now <= r_orig")
        if not -1.0 <= self.z_min < 1.0:
            raise ConfigError("z_min must lie in [-1, 1)")
        if self.omega <= 0:
            raise ConfigError("omega must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")

    @property
    def scale(self) -> float:
        return self.r_orig / self.r_now

    @property
    def c_max(self) -> float:
        return 1.0 - self.z_min

    @property
    def margin(self) -> float:
        """Distance from the border below which a pixel cannot be matched."""
        return self.scale * self.r_now


@dataclass
class ViewBundle:
    """Reference image plus packed source views for the kernels."""

    ref: np.ndarray
    kin: np.ndarray
    srcs: np.ndarray
    sizes: np.ndarray
    kj: np.ndarray
    rr: np.ndarray
    tt: np.ndarray
    source_ids: list = field(default_factory=list)

    @classmethod
    def build(cls, ref_img: GrayImage, ref_cam: Camera, sources, source_ids=()):
        """``sources`` is a sequence of ``(GrayImage, Camera)`` pairs."""
        n = len(sources)
        hmax = max([img.height for img, _ in sources] + [1])
        wmax = max([img.width for img, _ in sources] + [1])
        srcs = np.zeros((n, hmax, wmax))
        sizes = np.zeros((n, 2), dtype=np.int64)
        kj = np.zeros((n, 4))
        rr = np.zeros((n, 3, 3))
        tt = np.zeros((n, 3))
        for j, (img, cam) in enumerate(sources):
            srcs[j, : img.height, : img.width] = img.data
            sizes[j] = (img.width, img.height)
            kj[j] = (cam.fx, cam.fy, cam.cx, cam.cy)
            rr[j], tt[j] = relative_pose(ref_cam, cam)
        kin = np.array([ref_cam.fx, ref_cam.fy, ref_cam.cx, ref_cam.cy])
        return cls(
            np.ascontiguousarray(ref_img.data), kin, srcs, sizes, kj, rr, tt,
            list(source_ids),
        )

    def kernel_args(self, cfg: MatchConfig):
        return (self.kin, self.srcs, self.sizes, self.kj, self.rr, self.tt,
                cfg.r_now, cfg.scale, cfg.c_max, cfg.omega)


def matchable_mask(width: int, height: int, cfg: MatchConfig) -> np.ndarray:
    """Pixels whose full dilated window lies inside the reference image."""
    ext = cfg.margin
    u = np.arange(width)
    v = np.arange(height)
    ok_u = (u - ext >= 0) & (u + ext <= width - 1)
    ok_v = (v - ext >= 0) & (v + ext <= height - 1)
    return ok_v[:, None] & ok_u[None, :]


def zncc(
    ref: GrayImage,
    src: GrayImage,
    x,
    hyp: PlaneHypothesis,
    cams: tuple[Camera, Camera],
    cfg: MatchConfig,
) -> float:
    """Correlation of the dilated reference window at integer-or-real pixel ``x``.

    Raises:
        BorderHit: the window leaves either image.
        ZeroVariance: one of the two windows is constant.
    """
    bundle = ViewBundle.build(ref, cams[0], [(src, cams[1])])
    n = (2 * cfg.r_now + 1) ** 2
    refc, buf, H = np.empty(n), np.empty(n), np.empty(9)
    px, py = float(x[0]), float(x[1])
    refss = _kernels.ref_window(bundle.ref, px, py, cfg.r_now, cfg.scale, refc)
    if refss < 0:
        raise BorderHit(f"window around {tuple(x)} leaves the reference image")
    if refss == 0:
        raise ZeroVariance("constant reference window")
    n0, n1, n2 = hyp.normal
    if not _kernels.plane_homography(
        bundle.kin, bundle.kj[0], bundle.rr[0], bundle.tt[0], px, py, hyp.depth,
        n0, n1, n2, H,
    ):
        raise BorderHit("plane through the reference center")
    status, z = _kernels.view_zncc_h(
        bundle.srcs[0], int(bundle.sizes[0, 0]), int(bundle.sizes[0, 1]), H, px, py,
        cfg.r_now, cfg.scale, refc, refss, buf,
    )
    if status == _kernels.BORDER:
        raise BorderHit("mapped window leaves the source image")
    if status == _kernels.ZERO_VAR:
        raise ZeroVariance("constant source window")
    return float(z)


def aggregate_cost(scores, cfg: MatchConfig) -> float:
    """Combine per-view results (ZNCC floats, or ``None``/exceptions for misses)."""
    costs = np.empty(len(scores))
    for j, s in enumerate(scores):
        if s is None or isinstance(s, (BorderHit, ZeroVariance)):
            costs[j] = cfg.c_max
        else:
            costs[j] = min(1.0 - float(s), cfg.c_max)
    return float(_kernels.aggregate(costs, len(costs), cfg.c_max, cfg.omega))


class MatchState:
    """Mutable PatchMatch state; planes are kept as ``(normal, offset)``."""

    def __init__(self, bundle: ViewBundle, cfg: MatchConfig, depth, normal, valid):
        self.bundle = bundle
        self.cfg = cfg
        self.depth = np.array(depth, dtype=np.float64, order="C")
        self.normal = np.array(normal, dtype=np.float64, order="C")
        self.valid = np.array(valid, dtype=np.bool_, order="C")
        h, w = self.depth.shape
        kin = bundle.kin
        u = (np.arange(w) - kin[2]) / kin[0]
        v = (np.arange(h) - kin[3]) / kin[1]
        dot = self.normal[..., 0] * u[None, :] + self.normal[..., 1] * v[:, None]
        dot = dot + self.normal[..., 2]
        self.offset = -self.depth * dot
        self.cost = np.full((h, w), cfg.c_max)
        self.offsets = np.asarray(cfg.offsets, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_map(cls, bundle, cfg, dmap: DepthNormalMap, recompute_cost=False):
        state = cls(bundle, cfg, dmap.depth, dmap.normal, dmap.valid)
        if recompute_cost:
            state.compute_costs()
        else:
            state.cost = np.ascontiguousarray(dmap.cost, dtype=np.float64).copy()
        return state

    def compute_costs(self) -> None:
        _kernels.initial_costs(
            self.bundle.ref, self.depth, self.normal, self.valid, self.cost,
            *self.bundle.kernel_args(self.cfg),
        )

    def propagate(self, color: int, read_from: "MatchState | None" = None) -> int:
        src = read_from or self
        return _kernels.propagate(
            color, self.bundle.ref, self.depth, self.normal, self.offset, self.cost,
            self.valid, src.normal, src.offset, src.valid, self.offsets,
            *self.bundle.kernel_args(self.cfg),
        )

    def refine(self, draws: np.ndarray, depth_step: float) -> None:
        _kernels.refine(
            self.bundle.ref, self.depth, self.normal, self.offset, self.cost,
            self.valid, np.ascontiguousarray(draws), float(depth_step),
            *self.bundle.kernel_args(self.cfg),
        )

    def to_map(self) -> DepthNormalMap:
        return DepthNormalMap(
            self.depth.copy(), self.normal.copy(), self.cost.copy(), self.valid.copy()
        )


def propagate_checkerboard(
    dmap: DepthNormalMap, color: int, bundle: ViewBundle, cfg: MatchConfig
) -> DepthNormalMap:
    """One red (``0``) or black (``1``) propagation phase; returns a new map."""
    state = MatchState.from_map(bundle, cfg, dmap)
    state.propagate(color)
    return state.to_map()


def refine_random(
    dmap: DepthNormalMap,
    x,
    depth_range: SceneDepthRange,
    rng: np.random.Generator,
    bundle: ViewBundle,
    cfg: MatchConfig,
) -> DepthNormalMap:
    """Random refinement of the single pixel ``x``; returns a new map."""
    u, v = int(x[0]), int(x[1])
    mask = np.zeros_like(dmap.valid)
    mask[v, u] = dmap.valid[v, u]
    state = MatchState(bundle, cfg, dmap.depth, dmap.normal, mask)
    state.cost = dmap.cost.copy()
    draws = np.full((3,) + dmap.depth.shape, 0.5)
    draws[:, v, u] = rng.random(3)
    state.refine(draws, depth_range.d_max_scene / 4.0)
    out = state.to_map()
    out.valid = dmap.valid.copy()
    return out


@dataclass
class EstimationTrace:
    """Per-iteration diagnostics of :func:`estimate_depth_map`."""

    mean_cost: list = field(default_factory=list)
    evaluated: list = field(default_factory=list)
    seconds: float = 0.0


def estimate_from_bundle(
    bundle: ViewBundle,
    cam: Camera,
    features: FeatureIndex,
    depth_range: SceneDepthRange,
    cfg: MatchConfig,
    seed: int,
    trace: EstimationTrace | None = None,
    events: list | None = None,
) -> DepthNormalMap:
    """Initialization followed by ``cfg.iterations`` red/black/refine rounds.

    ``events``, when given, receives the names of the steps as they run.
    """
    t0 = time.perf_counter()
    h, w = bundle.ref.shape
    rng = np.random.default_rng(seed)
    depth, normal = initialize_map(cam, features, depth_range, rng.random((3, h, w)))
    state = MatchState(bundle, cfg, depth, normal, matchable_mask(w, h, cfg))
    state.compute_costs()
    if events is not None:
        events.append("initialize")
    step = depth_range.d_max_scene / 4.0
    for it in range(cfg.iterations):
        n_eval = state.propagate(RED)
        n_eval += state.propagate(BLACK)
        state.refine(rng.random((3, h, w)), step)
        if events is not None:
            events.append("propagate_refine")
        if trace is not None:
            inside = state.valid
            trace.mean_cost.append(float(state.cost[inside].mean()) if inside.any() else 0.0)
            trace.evaluated.append(int(n_eval))
        logger.debug("iteration %d: %d propagation candidates", it + 1, n_eval)
    out = state.to_map()
    out.valid &= out.cost < cfg.c_max
    out.clear_invalid()
    if trace is not None:
        trace.seconds = time.perf_counter() - t0
    return out


def estimate_depth_map(
    ref_id: int,
    neighbors: list[int],
    model: SparseModel,
    images: dict,
    cfg: MatchConfig,
    seed: int,
    trace: EstimationTrace | None = None,
    events: list | None = None,
) -> DepthNormalMap:
    """Estimate the depth/normal map of ``ref_id`` against its neighbors.

    Pixels with no contributing view (aggregated cost at ``c_max``) and pixels
    within the window margin of the border are returned invalid.
    """
    if not neighbors:
        raise NoNeighbors(f"image {ref_id} has no neighbors")
    cam = model.camera(ref_id)
    bundle = ViewBundle.build(
        images[ref_id], cam, [(images[j], model.camera(j)) for j in neighbors], neighbors
    )
    features = collect_reliable(model, ref_id)
    depth_range = scene_depth_range(features, model, ref_id)
    index = FeatureIndex(features, radius=cam.width / 10.0)
    return estimate_from_bundle(
        bundle, cam, index, depth_range, cfg, seed, trace, events
    )


def sample_hypothesis(dmap: DepthNormalMap, x) -> PlaneHypothesis:
    u, v = int(x[0]), int(x[1])
    return PlaneHypothesis(float(dmap.depth[v, u]), dmap.normal[v, u])


__all__ = [
    "MatchConfig", "ViewBundle", "MatchState", "zncc", "aggregate_cost",
    "propagate_checkerboard", "refine_random", "estimate_depth_map",
    "estimate_from_bundle", "matchable_mask", "RED", "BLACK", "EstimationTrace",
]
