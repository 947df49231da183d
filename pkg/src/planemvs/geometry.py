"""Pinhole camera model, plane-induced homographies and bilinear sampling.

Conventions used throughout the package:

* pixel coordinates are ``(u, v) = (column, row)`` with pixel centers on
  integer coordinates;
* ``R, t`` map world points into the camera frame, ``X_cam = R X + t``;
* depth is the camera-frame ``z`` coordinate, not the ray length;
* hypothesis normals live in the reference camera frame and face the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateHomography,
    DegenerateProjection,
    DomainError,
    OutOfBounds,
)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    center: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise DomainError("rotation is not orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        center = -R.T @ t
        if not np.all(np.isfinite(center)):
            raise DomainError("camera center is not finite")
        object.__setattr__(self, "center", center)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def axis(self) -> np.ndarray:
        """Principal axis (+z of the camera) in world coordinates."""
        return self.R[2].copy()

    def ray(self, x) -> np.ndarray:
        """Camera-frame viewing direction of pixel ``x`` scaled to ``z = 1``."""
        u, v = float(x[0]), float(x[1])
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by ``factor`` (area convention)."""
        w = int(np.ceil(self.width * factor))
        h = int(np.ceil(self.height * factor))
        return Camera(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            self.R,
            self.t,
            w,
            h,
        )


def back_project(cam: Camera, x, d: float) -> np.ndarray:
    """World point seen at pixel ``x`` with camera-frame depth ``d``."""
    if not d > 0:
        raise DomainError(f"depth must be positive, got {d}")
    X_cam = d * cam.ray(x)
    return cam.R.T @ (X_cam - cam.t)


def project(cam: Camera, X) -> tuple[np.ndarray, float]:
    """Pinhole projection; returns the pixel and the camera-frame depth."""
    RX = cam.R @ np.asarray(X, dtype=np.float64)
    X_cam = RX + cam.t
    z = X_cam[2]
    # relative test so that the computed center itself is caught
    if abs(z) <= 1e-12 * (np.abs(RX).max() + np.abs(cam.t).max()):
        raise DegenerateProjection("point lies on the camera's focal plane")
    pixel = np.array(
        [cam.fx * X_cam[0] / z + cam.cx, cam.fy * X_cam[1] / z + cam.cy]
    )
    return pixel, float(z)


def perturb_point(X, C_i, eps: float) -> np.ndarray:
    """Push ``X`` away from the camera center ``C_i`` by a fraction ``eps``."""
    X = np.asarray(X, dtype=np.float64)
    C_i = np.asarray(C_i, dtype=np.float64)
    # X + eps (X - C) keeps X = C and eps = 0 exact
    return X + eps * (X - C_i)


def relative_pose(cam_i: Camera, cam_j: Camera) -> tuple[np.ndarray, np.ndarray]:
    """``(R_rel, t_rel)`` mapping camera-i coordinates into camera j."""
    R_rel = cam_j.R @ cam_i.R.T
    t_rel = cam_j.t - R_rel @ cam_i.t
    return R_rel, t_rel


@dataclass(frozen=True)
class PlaneHypothesis:
    depth: float
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if not self.depth > 0:
            raise DomainError("hypothesis depth must be positive")
        norm = np.linalg.norm(n)
        if norm == 0:
            raise DomainError("normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)

    @classmethod
    def facing(cls, cam: Camera, x, depth: float, normal) -> "PlaneHypothesis":
        """Build a hypothesis whose normal is flipped toward the camera."""
        n = np.asarray(normal, dtype=np.float64)
        if n @ cam.ray(x) > 0:
            n = -n
        return cls(depth, n)


def plane_offset(cam: Camera, x, hyp: PlaneHypothesis) -> float:
    """Offset ``p`` of the plane ``n . X + p = 0`` in the camera frame."""
    X0 = hyp.depth * cam.ray(x)
    return float(-(hyp.normal @ X0))


def plane_homography(
    cam_i: Camera, cam_j: Camera, x, hyp: PlaneHypothesis
) -> np.ndarray:
    """Homography taking reference pixels on the hypothesised plane into view j."""
    p = plane_offset(cam_i, x, hyp)
    R_rel, t_rel = relative_pose(cam_i, cam_j)
    # camera-j center expressed in the camera-i frame
    C_j = -R_rel.T @ t_rel
    scale = max(1.0, abs(p), float(np.linalg.norm(C_j)))
    if abs(p) < 1e-12 * scale or abs(hyp.normal @ C_j + p) < 1e-12 * scale:
        raise DegenerateHomography("plane passes through a camera center")
    M = R_rel - np.outer(t_rel, hyp.normal) / p
    return cam_j.K @ M @ cam_i.K_inv


def intersect_ray_plane(cam: Camera, x, normal, offset: float) -> np.ndarray:
    """Camera-frame intersection of the ray through ``x`` with ``n . X + p = 0``."""
    ray = cam.ray(x)
    denom = float(np.asarray(normal) @ ray)
    if denom == 0:
        raise DegenerateProjection("ray parallel to plane")
    return (-offset / denom) * ray


def interpolate(img, p) -> float:
    """Bilinear interpolation at the real-valued pixel ``p = (u, v)``."""
    data = getattr(img, "data", img)
    h, w = data.shape
    u, v = float(p[0]), float(p[1])
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise OutOfBounds(f"({u}, {v}) outside {w}x{h} image")
    u0 = min(int(np.floor(u)), max(w - 2, 0))
    v0 = min(int(np.floor(v)), max(h - 2, 0))
    au, av = u - u0, v - v0
    u1 = min(u0 + 1, w - 1)
    v1 = min(v0 + 1, h - 1)
    top = (1 - au) * data[v0, u0] + au * data[v0, u1]
    bottom = (1 - au) * data[v1, u0] + au * data[v1, u1]
    return float((1 - av) * top + av * bottom)
