"""Small constructors shared by the test modules."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from planemvs.errors import BorderHit
from planemvs.geometry import Camera, PlaneHypothesis, back_project, project
from planemvs.matcher import MatchConfig, zncc
from planemvs.phi import GridGraph, pairwise_energy
from planemvs.scene_io import (
    CameraIntrinsics,
    GrayImage,
    ImageRecord,
    Observation,
    Point3D,
    SparseModel,
    TrackElement,
    rotation_to_qvec,
)


def look_at(center, target=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation whose +z axis points from ``center`` to ``target``."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    return np.stack([x, np.cross(z, x), z])


def camera_at(center, target=(0.0, 0.0, 0.0), f=100.0, w=100, h=80) -> Camera:
    R = look_at(center, target)
    return Camera(f, f, (w - 1) / 2, (h - 1) / 2, R, -R @ np.asarray(center, float), w, h)


def random_camera(rng: np.random.Generator, w=640, h=480) -> Camera:
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-2, 2, 3)
    f = rng.uniform(300, 900)
    return Camera(f, f * rng.uniform(0.9, 1.1), rng.uniform(0.3, 0.7) * w,
                  rng.uniform(0.3, 0.7) * h, R, t, w, h)


def build_model(cams, points, errors=None) -> SparseModel:
    """Sparse model observing ``points`` from every camera that sees them.

    Image ids and point ids start at 1. Points seen by fewer than two cameras
    are dropped.
    """
    intr = {}
    images = {}
    for k, cam in enumerate(cams, start=1):
        intr[k] = CameraIntrinsics(k, "PINHOLE", cam.width, cam.height,
                                   (cam.fx, cam.fy, cam.cx, cam.cy))
        images[k] = ImageRecord(k, k, rotation_to_qvec(cam.R), cam.t.copy(),
                                f"img{k}.png", [])
    pts = {}
    for pid, X in enumerate(np.asarray(points, float).reshape(-1, 3), start=1):
        track = []
        for k, cam in enumerate(cams, start=1):
            Xc = cam.R @ X + cam.t
            if Xc[2] <= 0:
                continue
            u = cam.fx * Xc[0] / Xc[2] + cam.cx
            v = cam.fy * Xc[1] / Xc[2] + cam.cy
            if 0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1:
                track.append((k, np.array([u, v])))
        if len(track) < 2:
            continue
        elements = []
        for k, xy in track:
            elements.append(TrackElement(k, len(images[k].observations)))
            images[k].observations.append(Observation(xy, pid))
        err = 0.5 if errors is None else float(errors[pid - 1])
        pts[pid] = Point3D(pid, X.copy(), (128, 128, 128), err, elements)
    model = SparseModel(intr, images, pts)
    model._link()
    return model


def brute_force_energy(graph) -> float:
    """Exhaustive minimum of the grid energy, enumerating every labeling.

    Energies are looked up from per-node and per-edge tables built with the
    scalar potential functions, so the decoder's kernels are not involved.
    """
    h, w = graph.shape
    counts = graph.count.reshape(-1)
    labels = np.array(list(itertools.product(*[range(c) for c in counts])), dtype=np.int64)
    unary = graph.unary.reshape(h * w, -1)
    depths = graph.depths.reshape(h * w, -1)
    total = np.zeros(len(labels))
    for i in range(h * w):
        total += unary[i, :counts[i]][labels[:, i]]
    edges = [(v * w + u, v * w + u + 1) for v in range(h) for u in range(w - 1)]
    edges += [(v * w + u, (v + 1) * w + u) for v in range(h - 1) for u in range(w)]
    for a, b in edges:
        table = np.array([[pairwise_energy(depths[a, p], depths[b, q])
                           for q in range(counts[b])] for p in range(counts[a])])
        total += table[labels[:, a], labels[:, b]]
    return float(total.min())


def _sample(img, u, v):
    return map_coordinates(img, [np.atleast_1d(v), np.atleast_1d(u)], order=1, mode="nearest")


def dense_zncc(ref, src, cam_i, cam_j, x, hyp, r, s):
    """Window correlation by explicit ray-plane intersection per sample."""
    a, b = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    u = x[0] + s * a.ravel()
    v = x[1] + s * b.ravel()
    ref_vals = _sample(ref, u, v)
    X0 = back_project(cam_i, x, hyp.depth)
    n_w = cam_i.R.T @ hyp.normal
    src_vals = []
    for uu, vv in zip(u, v):
        ray = cam_i.R.T @ np.array([(uu - cam_i.cx) / cam_i.fx, (vv - cam_i.cy) / cam_i.fy, 1])
        lam = ((X0 - cam_i.center) @ n_w) / (ray @ n_w)
        p, _ = project(cam_j, cam_i.center + lam * ray)
        src_vals.append(_sample(src, p[0], p[1])[0])
    src_vals = np.array(src_vals)
    da = ref_vals - ref_vals.mean()
    db = src_vals - src_vals.mean()
    return float((da @ db) / np.sqrt((da @ da) * (db @ db)))


def random_pair(rng, size=64):
    ref = rng.random((size, size))
    src = rng.random((size, size))
    f = rng.uniform(60, 90)
    c = (size - 1) / 2
    cam_i = Camera(f, f, c, c, np.eye(3), np.zeros(3), size, size)
    ang = rng.uniform(-0.05, 0.05)
    R = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0], [-np.sin(ang), 0, np.cos(ang)]])
    cam_j = Camera(f * rng.uniform(0.95, 1.05), f, c + rng.uniform(-2, 2), c, R,
                   np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1), 0.05]), size, size)
    return GrayImage(ref), GrayImage(src), cam_i, cam_j


def dilation_worst_error(r_now, r_orig, n_pairs, seed):
    """Largest |zncc - dense_zncc| over ``n_pairs`` random pairs and hypotheses."""
    rng = np.random.default_rng(seed)
    cfg = MatchConfig(r_now=r_now, r_orig=r_orig)
    worst, done = 0.0, 0
    while done < n_pairs:
        ref, src, cam_i, cam_j = random_pair(rng)
        x = rng.uniform(28, 36, 2)
        if r_now == r_orig:
            x = np.round(x)
        n = rng.normal(size=3) * 0.3 + [0, 0, -1]
        hyp = PlaneHypothesis.facing(cam_i, x, rng.uniform(4, 8), n)
        try:
            z = zncc(ref, src, x, hyp, (cam_i, cam_j), cfg)
        except BorderHit:
            continue
        expect = dense_zncc(ref.data, src.data, cam_i, cam_j, x, hyp, r_now, cfg.scale)
        worst = max(worst, abs(z - expect))
        done += 1
    return worst


def random_graph(rng, h, w, max_labels=4, fixed=None):
    """Random grid graph with log-uniform unaries and depths in [3, 6]."""
    count = rng.integers(1, max_labels + 1, (h, w)) if fixed is None else np.full((h, w), fixed)
    depths = np.full((h, w, max_labels), np.nan)
    unary = np.zeros((h, w, max_labels))
    for v in range(h):
        for u in range(w):
            c = count[v, u]
            depths[v, u, :c] = rng.uniform(3.0, 6.0, c)
            unary[v, u, :c] = -np.log(rng.uniform(0.5, 1.0, c))
    return GridGraph(np.nan_to_num(depths, nan=1.0), unary, count)
