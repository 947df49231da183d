"""Procedural planar scenes with exact ground-truth depth for benchmarking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..depthmap import DepthNormalMap
from ..errors import ConfigError
from ..geometry import Camera
from ..scene_io import (
    CameraIntrinsics,
    GrayImage,
    ImageRecord,
    Observation,
    Point3D,
    SparseModel,
    TrackElement,
    read_depth_map,
    rotation_to_qvec,
    save_gray,
    write_depth_map,
    write_sparse_model,
)


@dataclass(frozen=True)
class PlaneSpec:
    """A finite (or unbounded) textured plane.

    ``inner_flat`` gives half extents of a centred rectangle rendered at a
    constant intensity; ``texture="flat"`` makes the whole plane constant.
    """

    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, -1.0)
    u_axis: tuple = (1.0, 0.0, 0.0)
    half_extent: tuple | None = None
    texture: str = "noise"
    inner_flat: tuple | None = None
    flat_value: float = 0.55


@dataclass(frozen=True)
class SceneSpec:
    width: int = 320
    height: int = 240
    n_cameras: int = 5
    layout: str = "arc"
    span_deg: float = 40.0
    baseline: float = 1.0
    distance: float = 5.0
    focal_scale: float = 1.2
    planes: tuple = (PlaneSpec(),)
    texture_cell: float = 3.0
    flat_noise: float = 0.0
    n_points: int = 2000
    outlier_fraction: float = 0.03
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "SceneSpec":
        """Named scenes used by the tests and the ``synth`` command.

        * ``fronto``: one fronto-parallel plane seen by a sideways camera rig;
        * ``textured``: fully textured wall seen from an arc of cameras;
        * ``frame``: wall with a textured frame around a textureless interior.
        """
        if name == "fronto":
            spec = cls(layout="line", n_cameras=2, baseline=0.6,
                       planes=(PlaneSpec(point=(0.0, 0.0, 0.0)),))
        elif name == "textured":
            spec = cls()
        elif name == "frame":
            spec = cls(
                n_cameras=8,
                span_deg=70.0,
                planes=(PlaneSpec(inner_flat=(1.3, 0.75)),),
            )
        else:
            raise ConfigError(f"unknown scene preset {name!r}")
        return replace(spec, **overrides)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    model: SparseModel
    images: dict
    gt_depth: dict
    gt_normal: dict
    planes: tuple = field(default=())

    @property
    def cameras(self) -> dict:
        return {i: self.model.camera(i) for i in self.model.images}

    def gt_map(self, image_id: int) -> DepthNormalMap:
        depth = self.gt_depth[image_id]
        valid = np.isfinite(depth)
        return DepthNormalMap(
            np.where(valid, depth, 0.0),
            np.where(valid[..., None], self.gt_normal[image_id], 0.0),
            np.zeros(depth.shape),
            valid,
        )


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _camera_poses(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    poses = []
    n = spec.n_cameras
    if spec.layout == "arc":
        angles = np.radians(np.linspace(-spec.span_deg / 2, spec.span_deg / 2, n))
        for a in angles:
            C = spec.distance * np.array([math.sin(a), 0.0, -math.cos(a)])
            R = _look_at(C, np.zeros(3))
            poses.append((R, -R @ C))
    elif spec.layout == "line":
        for x in np.linspace(-spec.baseline / 2, spec.baseline / 2, n):
            C = np.array([x, 0.0, -spec.distance])
            poses.append((np.eye(3), -C))
    else:
        raise ConfigError(f"unknown camera layout {spec.layout!r}")
    return poses


class _Texture:
    """Smooth value noise on a wrapped random lattice."""

    def __init__(self, rng: np.random.Generator, cell: float, size: int = 512):
        self.cell = cell
        self.size = size
        self.grid = rng.uniform(0.1, 0.9, (size, size))

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        gs, gt = s / self.cell, t / self.cell
        i0, j0 = np.floor(gs).astype(np.int64), np.floor(gt).astype(np.int64)
        fs, ft = gs - i0, gt - j0
        ws = fs * fs * (3 - 2 * fs)
        wt = ft * ft * (3 - 2 * ft)
        n = self.size
        i0, j0 = i0 % n, j0 % n
        i1, j1 = (i0 + 1) % n, (j0 + 1) % n
        g = self.grid
        top = (1 - ws) * g[j0, i0] + ws * g[j0, i1]
        bottom = (1 - ws) * g[j1, i0] + ws * g[j1, i1]
        return (1 - wt) * top + wt * bottom


def _plane_frame(p: PlaneSpec):
    n = np.asarray(p.normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    u = np.asarray(p.u_axis, dtype=np.float64)
    u = u - (u @ n) * n
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.asarray(p.point, dtype=np.float64), n, u, v


def _render(spec, cam: Camera, planes, textures, rng):
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1
    )
    rays = rays_cam @ cam.R  # world directions (z_cam = 1 scaling)
    C = cam.center
    best = np.full((h, w), np.inf)
    image = np.zeros((h, w))
    normal_cam = np.zeros((h, w, 3))
    for k, p in enumerate(planes):
        P0, n, u_ax, v_ax = _plane_frame(p)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((P0 - C) @ n) / denom
        hit = np.isfinite(lam) & (lam > 0)
        X = C + lam[..., None] * rays
        s = (X - P0) @ u_ax
        t = (X - P0) @ v_ax
        if p.half_extent is not None:
            hit &= (np.abs(s) <= p.half_extent[0]) & (np.abs(t) <= p.half_extent[1])
        closer = hit & (lam < best)
        if not closer.any():
            continue
        best[closer] = lam[closer]
        if p.texture == "flat":
            vals = np.full((h, w), p.flat_value)
        else:
            vals = textures[k](s, t)
            if p.inner_flat is not None:
                inner = (np.abs(s) < p.inner_flat[0]) & (np.abs(t) < p.inner_flat[1])
                vals = np.where(inner, p.flat_value, vals)
        image[closer] = vals[closer]
        nc = cam.R @ n
        normal_cam[closer] = nc
    # lam multiplies rays normalised to z_cam = 1, so lam is the camera depth
    depth = np.where(np.isfinite(best), best, np.nan)
    flip = (normal_cam * rays_cam).sum(-1) > 0
    normal_cam[flip] *= -1
    if spec.flat_noise > 0:
        image = image + rng.normal(0.0, spec.flat_noise, image.shape)
    return np.clip(image, 0.0, 1.0), depth, normal_cam


def _surface_is_flat(p: PlaneSpec, s, t):
    if p.texture == "flat":
        return np.ones_like(s, dtype=bool)
    if p.inner_flat is None:
        return np.zeros_like(s, dtype=bool)
    return (np.abs(s) < p.inner_flat[0]) & (np.abs(t) < p.inner_flat[1])


def _sparse_points(spec, cams, planes, gt_depth, rng):
    """Sample textured surface points and build SfM-like tracks."""
    P_all = []
    attempts = 0
    while len(P_all) < spec.n_points and attempts < 50:
        attempts += 1
        ci = int(rng.integers(len(cams)))
        cam = cams[ci]
        m = spec.n_points
        uv = rng.uniform([0, 0], [cam.width - 1, cam.height - 1], (m, 2))
        ui, vi = np.round(uv).astype(int).T
        d = gt_depth[ci][vi, ui]
        ok = np.isfinite(d)
        rays = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy,
                         np.ones(m)], 1)
        # exact surface point: re-intersect the ray with the visible plane
        for ray in rays[ok]:
            world_dir = cam.R.T @ ray
            best, best_k, best_X = np.inf, -1, None
            for k, p in enumerate(planes):
                P0, n, u_ax, v_ax = _plane_frame(p)
                den = world_dir @ n
                if den == 0:
                    continue
                lam = ((P0 - cam.center) @ n) / den
                if not 0 < lam < best:
                    continue
                X = cam.center + lam * world_dir
                s, t = (X - P0) @ u_ax, (X - P0) @ v_ax
                if p.half_extent is not None and (
                    abs(s) > p.half_extent[0] or abs(t) > p.half_extent[1]
                ):
                    continue
                best, best_k, best_X = lam, k, (X, s, t)
            if best_k < 0:
                continue
            X, s, t = best_X
            if _surface_is_flat(planes[best_k], np.array([s]), np.array([t]))[0]:
                continue
            P_all.append(X)
            if len(P_all) >= spec.n_points:
                break
    points = {}
    observations = {i: [] for i in range(len(cams))}
    pid = 1
    for X in P_all:
        track = []
        for ci, cam in enumerate(cams):
            Xc = cam.R @ X + cam.t
            if Xc[2] <= 0:
                continue
            u = cam.fx * Xc[0] / Xc[2] + cam.cx
            v = cam.fy * Xc[1] / Xc[2] + cam.cy
            if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
                continue
            gd = gt_depth[ci][int(round(v)), int(round(u))]
            if not np.isfinite(gd) or abs(gd - Xc[2]) > 1e-2 * Xc[2]:
                continue
            track.append((ci, np.array([u, v])))
        if len(track) < 2:
            continue
        outlier = rng.random() < spec.outlier_fraction
        error = rng.uniform(2.5, 6.0) if outlier else rng.uniform(0.1, 1.5)
        pos = X + (rng.normal(0, 0.3, 3) if outlier else 0.0)
        elements = []
        for ci, xy in track:
            elements.append(TrackElement(ci + 1, len(observations[ci])))
            observations[ci].append(Observation(xy, pid))
        points[pid] = Point3D(pid, pos, (128, 128, 128), float(error), elements)
        pid += 1
    return points, observations


def gen_scene(spec: SceneSpec) -> SyntheticScene:
    """Render a scene; the same spec (seed included) gives identical output.

    Raises:
        ConfigError: fewer than 2 cameras, resolution below 64x64 or no planes.
    """
    if spec.n_cameras < 2:
        raise ConfigError("need at least 2 cameras")
    if spec.width < 64 or spec.height < 64:
        raise ConfigError("resolution must be at least 64x64")
    if not spec.planes:
        raise ConfigError("scene has no planes")
    rng = np.random.default_rng(spec.seed)
    f = spec.focal_scale * spec.width
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    intr = CameraIntrinsics(1, "PINHOLE", spec.width, spec.height, (f, f, cx, cy))
    footprint = spec.distance / f
    textures = [_Texture(rng, spec.texture_cell * footprint) for _ in spec.planes]
    images_rec = {}
    cams = []
    for k, (R, t) in enumerate(_camera_poses(spec)):
        q = rotation_to_qvec(R)
        rec = ImageRecord(k + 1, 1, q, t, f"view_{k + 1:03d}.png", [])
        images_rec[k + 1] = rec
        cams.append(Camera(f, f, cx, cy, rec.R, t, spec.width, spec.height))
    images, gt_depth, gt_normal = {}, {}, {}
    for k, cam in enumerate(cams):
        img, depth, normal = _render(spec, cam, spec.planes, textures, rng)
        images[k + 1] = GrayImage(img)
        gt_depth[k + 1] = depth
        gt_normal[k + 1] = normal
    points, observations = _sparse_points(
        spec, cams, spec.planes, [gt_depth[k + 1] for k in range(len(cams))], rng
    )
    for k in range(len(cams)):
        images_rec[k + 1].observations = observations[k]
    model = SparseModel({1: intr}, images_rec, points)
    model._link()
    return SyntheticScene(spec, model, images, gt_depth, gt_normal, spec.planes)


def save_scene(scene: SyntheticScene, directory) -> Path:
    """Write ``sparse/``, ``images/`` (8-bit PNG) and ``ground_truth/``."""
    directory = Path(directory)
    write_sparse_model(scene.model, directory / "sparse")
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "ground_truth").mkdir(parents=True, exist_ok=True)
    for image_id, img in scene.images.items():
        save_gray(img, directory / "images" / scene.model.images[image_id].name)
        write_depth_map(
            scene.gt_map(image_id), directory / "ground_truth" / f"{image_id}.phim"
        )
    return directory


def load_ground_truth(directory, model: SparseModel) -> dict | None:
    """Ground-truth depth arrays (NaN = no surface) if the directory has them."""
    gt_dir = Path(directory) / "ground_truth"
    if not gt_dir.is_dir():
        return None
    out = {}
    for image_id in model.images:
        path = gt_dir / f"{image_id}.phim"
        if path.is_file():
            m = read_depth_map(path)
            out[image_id] = np.where(m.valid, m.depth, np.nan)
    return out
