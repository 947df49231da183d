"""Readers and writers: SfM text models, gray images, PLY clouds, depth maps."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy.spatial.transform import Rotation

from .depthmap import DepthNormalMap
from .errors import (
    DecodeError,
    DomainError,
    FileMissing,
    FormatError,
    IoError,
    LinkError,
    ParseError,
)
from .geometry import Camera

logger = logging.getLogger(__name__)

UNLINKED = -1
SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


# ---------------------------------------------------------------------------
# Sparse model
# ---------------------------------------------------------------------------


@dataclass
class CameraIntrinsics:
    camera_id: int
    model: str
    width: int
    height: int
    params: tuple[float, ...]

    @property
    def fx(self) -> float:
        return self.params[0]

    @property
    def fy(self) -> float:
        return self.params[0] if self.model == "SIMPLE_PINHOLE" else self.params[1]

    @property
    def cx(self) -> float:
        return self.params[-2]

    @property
    def cy(self) -> float:
        return self.params[-1]


@dataclass
class Observation:
    xy: np.ndarray
    point3d_id: int = UNLINKED


@dataclass
class ImageRecord:
    image_id: int
    camera_id: int
    qvec: np.ndarray
    tvec: np.ndarray
    name: str
    observations: list[Observation] = field(default_factory=list)

    @property
    def R(self) -> np.ndarray:
        return qvec_to_rotation(self.qvec)


@dataclass
class TrackElement:
    image_id: int
    point2d_idx: int
    xy: np.ndarray | None = None


@dataclass
class Point3D:
    point_id: int
    position: np.ndarray
    color: tuple[int, int, int]
    reproj_error: float
    track: list[TrackElement]


@dataclass
class SparseModel:
    cameras: dict[int, CameraIntrinsics]
    images: dict[int, ImageRecord]
    points3d: dict[int, Point3D]

    def camera(self, image_id: int) -> Camera:
        """Geometric camera for an image."""
        img = self.images[image_id]
        intr = self.cameras[img.camera_id]
        return Camera(
            intr.fx, intr.fy, intr.cx, intr.cy, img.R, img.tvec, intr.width, intr.height
        )

    def image_id_by_name(self, name: str) -> int:
        for image_id, img in self.images.items():
            if img.name == name:
                return image_id
        raise KeyError(name)

    def linked_points(self, image_id: int) -> dict[int, np.ndarray]:
        """Point ids observed in ``image_id`` mapped to their 2D coordinate."""
        out = {}
        for obs in self.images[image_id].observations:
            if obs.point3d_id != UNLINKED:
                out[obs.point3d_id] = obs.xy
        return out

    def scaled(self, factor: float) -> "SparseModel":
        """Model for images resampled by ``factor`` (used for half-scale runs)."""
        cams = {}
        for cid, c in self.cameras.items():
            p = list(c.params)
            p[:-2] = [v * factor for v in p[:-2]]
            p[-2] = (p[-2] + 0.5) * factor - 0.5
            p[-1] = (p[-1] + 0.5) * factor - 0.5
            cams[cid] = CameraIntrinsics(
                cid,
                c.model,
                int(np.ceil(c.width * factor)),
                int(np.ceil(c.height * factor)),
                tuple(p),
            )
        images = {}
        for iid, im in self.images.items():
            obs = [
                Observation((o.xy + 0.5) * factor - 0.5, o.point3d_id)
                for o in im.observations
            ]
            images[iid] = ImageRecord(iid, im.camera_id, im.qvec, im.tvec, im.name, obs)
        model = SparseModel(cams, images, {})
        for pid, p in self.points3d.items():
            model.points3d[pid] = Point3D(
                pid,
                p.position,
                p.color,
                p.reproj_error,
                [TrackElement(t.image_id, t.point2d_idx) for t in p.track],
            )
        model._link()
        return model

    def _link(self, source: str = "<model>") -> None:
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise LinkError(
                    f"image {img.image_id} references missing camera {img.camera_id}"
                )
            for obs in img.observations:
                if obs.point3d_id != UNLINKED and obs.point3d_id not in self.points3d:
                    raise LinkError(
                        f"image {img.image_id} references missing point {obs.point3d_id}"
                    )
        for p in self.points3d.values():
            for el in p.track:
                img = self.images.get(el.image_id)
                if img is None:
                    raise LinkError(
                        f"point {p.point_id} references missing image {el.image_id}"
                    )
                if not 0 <= el.point2d_idx < len(img.observations):
                    raise LinkError(
                        f"point {p.point_id} references observation {el.point2d_idx}"
                        f" of image {el.image_id}, which has {len(img.observations)}"
                    )
                el.xy = img.observations[el.point2d_idx].xy


def qvec_to_rotation(qvec) -> np.ndarray:
    w, x, y, z = np.asarray(qvec, dtype=np.float64) / np.linalg.norm(qvec)
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def rotation_to_qvec(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def _data_lines(path: Path):
    """Yield ``(line_number, stripped_text)`` for non-comment lines."""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, raw.strip()


def _read_cameras(path: Path) -> dict[int, CameraIntrinsics]:
    cameras = {}
    for lineno, line in _data_lines(path):
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            camera_id, model = int(elems[0]), elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = tuple(float(v) for v in elems[4:])
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad camera record ({exc})") from None
        if model not in SUPPORTED_MODELS:
            raise ParseError(path, lineno, f"unsupported camera model {model}")
        if len(params) != SUPPORTED_MODELS[model]:
            raise ParseError(
                path, lineno, f"{model} expects {SUPPORTED_MODELS[model]} parameters"
            )
        if camera_id in cameras:
            raise ParseError(path, lineno, f"duplicate camera id {camera_id}")
        cameras[camera_id] = CameraIntrinsics(camera_id, model, width, height, params)
    return cameras


def _read_images(path: Path) -> dict[int, ImageRecord]:
    images = {}
    lines = list(_data_lines(path))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            image_id = int(elems[0])
            qvec = np.array([float(v) for v in elems[1:5]])
            tvec = np.array([float(v) for v in elems[5:8]])
            camera_id = int(elems[8])
            name = " ".join(elems[9:])
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad image record ({exc})") from None
        if len(qvec) != 4 or len(tvec) != 3 or not name:
            raise ParseError(path, lineno, "bad image record")
        if not np.linalg.norm(qvec) > 0:
            raise ParseError(path, lineno, "zero quaternion")
        obs_line_no, obs_line = lines[i] if i < len(lines) else (lineno + 1, "")
        i += 1
        elems = obs_line.split()
        if len(elems) % 3:
            raise ParseError(path, obs_line_no, "observation list not a multiple of 3")
        observations = []
        try:
            for k in range(0, len(elems), 3):
                xy = np.array([float(elems[k]), float(elems[k + 1])])
                observations.append(Observation(xy, int(elems[k + 2])))
        except ValueError as exc:
            raise ParseError(path, obs_line_no, f"bad observation ({exc})") from None
        if image_id in images:
            raise ParseError(path, lineno, f"duplicate image id {image_id}")
        images[image_id] = ImageRecord(image_id, camera_id, qvec, tvec, name, observations)
    return images


def _read_points(path: Path) -> dict[int, Point3D]:
    points = {}
    for lineno, line in _data_lines(path):
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            point_id = int(elems[0])
            position = np.array([float(v) for v in elems[1:4]])
            color = tuple(int(v) for v in elems[4:7])
            error = float(elems[7])
            track_vals = [int(v) for v in elems[8:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad point record ({exc})") from None
        if len(position) != 3 or len(color) != 3 or len(track_vals) % 2:
            raise ParseError(path, lineno, "bad point record")
        if error < 0:
            raise ParseError(path, lineno, "negative reprojection error")
        track = [
            TrackElement(track_vals[k], track_vals[k + 1])
            for k in range(0, len(track_vals), 2)
        ]
        if len(track) < 2:
            raise ParseError(path, lineno, "track shorter than 2 observations")
        if point_id in points:
            raise ParseError(path, lineno, f"duplicate point id {point_id}")
        points[point_id] = Point3D(point_id, position, color, error, track)
    return points


def parse_sparse_model(directory) -> SparseModel:
    """Read ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from a directory.

    Raises:
        FileMissing: one of the three files is absent.
        ParseError: a malformed line (carries the 1-based line number).
        LinkError: a record references a non-existent id.
    """
    directory = Path(directory)
    paths = [directory / n for n in ("cameras.txt", "images.txt", "points3D.txt")]
    for p in paths:
        if not p.is_file():
            raise FileMissing(f"missing {p}")
    model = SparseModel(
        _read_cameras(paths[0]), _read_images(paths[1]), _read_points(paths[2])
    )
    model._link(str(directory))
    return model


def write_sparse_model(model: SparseModel, directory) -> None:
    """Write the text triplet; floats are written with ``repr`` (lossless)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid in sorted(model.cameras):
            c = model.cameras[cid]
            params = " ".join(repr(float(p)) for p in c.params)
            fh.write(f"{cid} {c.model} {c.width} {c.height} {params}\n")
    with open(directory / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for iid in sorted(model.images):
            im = model.images[iid]
            q = " ".join(repr(float(v)) for v in im.qvec)
            t = " ".join(repr(float(v)) for v in im.tvec)
            fh.write(f"{iid} {q} {t} {im.camera_id} {im.name}\n")
            fh.write(
                " ".join(
                    f"{float(o.xy[0])!r} {float(o.xy[1])!r} {o.point3d_id}"
                    for o in im.observations
                )
                + "\n"
            )
    with open(directory / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(model.points3d):
            p = model.points3d[pid]
            pos = " ".join(repr(float(v)) for v in p.position)
            col = " ".join(str(int(v)) for v in p.color)
            track = " ".join(f"{el.image_id} {el.point2d_idx}" for el in p.track)
            fh.write(f"{pid} {pos} {col} {float(p.reproj_error)!r} {track}\n")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@dataclass
class GrayImage:
    """Row-major brightness values in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DomainError("gray image must be 2-D")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise DomainError("intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def half_resample(data: np.ndarray) -> np.ndarray:
    """Bilinear 2x downsample to ``ceil(w/2) x ceil(h/2)``.

    Output pixel ``i`` samples the source at ``2 i + 0.5`` (clamped), which is
    the 2x2 box average for interior pixels.
    """
    h, w = data.shape
    oh, ow = -(-h // 2), -(-w // 2)
    u = np.clip(2.0 * np.arange(ow) + 0.5, 0, w - 1)
    v = np.clip(2.0 * np.arange(oh) + 0.5, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    au = (u - u0)[None, :]
    av = (v - v0)[:, None]
    top = (1 - au) * data[v0][:, u0] + au * data[v0][:, u1]
    bottom = (1 - au) * data[v1][:, u0] + au * data[v1][:, u1]
    return (1 - av) * top + av * bottom


def load_gray(path, half_scale: bool = False) -> GrayImage:
    """Decode an 8-bit raster and convert it to BT.601 luma in ``[0, 1]``."""
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "L":
                data = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode in ("RGB", "RGBA", "P", "LA", "CMYK", "YCbCr"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                data = (
                    0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
                ) / 255.0
            else:
                raise DecodeError(f"{path}: unsupported image mode {im.mode}")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from None
    data = np.clip(data, 0.0, 1.0)
    if half_scale:
        data = half_resample(data)
    return GrayImage(data)


def save_gray(img: GrayImage, path) -> None:
    """Store as an 8-bit grayscale PNG (values rounded)."""
    data = np.round(np.clip(img.data, 0, 1) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if not len(self.positions) == len(self.normals) == len(self.colors):
            raise DomainError("positions, normals and colors differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_tuples(cls, points: Iterable) -> "PointCloud":
        points = list(points)
        if not points:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
        pos, nrm, col = zip(*points)
        return cls(np.array(pos), np.array(nrm), np.array(col))


_PLY_VERTEX = np.dtype(
    [
        ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
        ("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ]
)
_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2",
    "int": "<i4", "uint": "<u4", "float": "<f4", "double": "<f8",
    "int8": "i1", "uint8": "u1", "int16": "<i2", "uint16": "<u2",
    "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}


def write_ply(cloud, path) -> None:
    """Binary little-endian PLY with double positions/normals and uchar colors."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud.from_tuples(cloud)
    if len(cloud):
        lengths = np.linalg.norm(cloud.normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-4):
            raise DomainError("normals must be unit length")
    records = np.empty(len(cloud), dtype=_PLY_VERTEX)
    for k, name in enumerate(("x", "y", "z")):
        records[name] = cloud.positions[:, k]
    for k, name in enumerate(("nx", "ny", "nz")):
        records[name] = cloud.normals[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        records[name] = cloud.colors[:, k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in ("x", "y", "z", "nx", "ny", "nz")]
    header += [f"property uchar {n}" for n in ("red", "green", "blue")]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(records.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_ply(path) -> PointCloud:
    """Read a binary little-endian vertex-only PLY (as written by ``write_ply``)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        count, fields = None, []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "binary_little_endian":
                raise FormatError(f"{path}: unsupported format {tokens[1]}")
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise FormatError(f"{path}: unsupported element {tokens[1]}")
                count = int(tokens[2])
            elif tokens[0] == "property":
                fields.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        dtype = np.dtype(fields)
        payload = fh.read()
    if count is None or len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: vertex payload size mismatch")
    rec = np.frombuffer(payload, dtype=dtype)

    def stack(names):
        if count == 0:
            return np.zeros((0, 3))
        return np.stack([rec[n] for n in names], axis=1)

    return PointCloud(
        stack(("x", "y", "z")),
        stack(("nx", "ny", "nz")),
        stack(("red", "green", "blue")).astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# Depth maps
# ---------------------------------------------------------------------------

DEPTH_MAGIC = b"PHIM"
DEPTH_VERSION = 1
_DEPTH_HEADER = struct.Struct("<4sIII")
_DEPTH_RECORD = np.dtype(
    [("depth", "<f8"), ("normal", "<f8", (3,)), ("cost", "<f8"), ("valid", "u1")]
)


def write_depth_map(dmap: DepthNormalMap, path) -> None:
    h, w = dmap.depth.shape
    records = np.empty(h * w, dtype=_DEPTH_RECORD)
    records["depth"] = dmap.depth.reshape(-1)
    records["normal"] = dmap.normal.reshape(-1, 3)
    records["cost"] = dmap.cost.reshape(-1)
    records["valid"] = dmap.valid.reshape(-1)
    try:
        with open(path, "wb") as fh:
            fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, DEPTH_VERSION, w, h))
            fh.write(records.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_depth_map(path) -> DepthNormalMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, w, h = _DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DEPTH_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = blob[_DEPTH_HEADER.size:]
    if len(body) != w * h * _DEPTH_RECORD.itemsize:
        raise FormatError(f"{path}: expected {w}x{h} records, file is truncated")
    rec = np.frombuffer(body, dtype=_DEPTH_RECORD)
    return DepthNormalMap(
        rec["depth"].reshape(h, w).copy(),
        rec["normal"].reshape(h, w, 3).copy(),
        rec["cost"].reshape(h, w).copy(),
        rec["valid"].reshape(h, w).astype(bool),
    )
