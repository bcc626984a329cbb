"""Shared geometric types and transform arithmetic.

World frame convention: right-handed, z up, meters everywhere.  The
registration unknown is a 2.5D similarity ``(s, theta, t, dz)`` acting as

    (x', y') = s * R(theta) @ (x, y) + t
    z'       = s * z + dz

All types are immutable after construction; operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InputError

TWO_PI = 2.0 * math.pi


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def point3(x: float, y: float, z: float) -> np.ndarray:
    """One finite 3D point as a length-3 array; cloud rows share this layout."""
    p = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(p)):
        raise InputError(f"coordinates must be finite, got {(x, y, z)}")
    return p


def rotation2(theta: float) -> np.ndarray:
    """2x2 rotation matrix [[cos, -sin], [sin, cos]] for an angle in radians."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute angle between two directions, in [0, pi]."""
    d = abs(a - b) % TWO_PI
    return min(d, TWO_PI - d)


@dataclass(frozen=True)
class Transform2D5:
    """Horizontal similarity plus vertical shift: (s, theta, t, dz)."""

    s: float = 1.0
    theta: float = 0.0
    t: tuple[float, float] = (0.0, 0.0)
    dz: float = 0.0

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise InputError(f"scale must be positive and finite, got {self.s}")
        object.__setattr__(self, "theta", self.theta % TWO_PI)
        object.__setattr__(self, "t", (float(self.t[0]), float(self.t[1])))

    def matrix2(self) -> np.ndarray:
        return rotation2(self.theta)

    def inverse(self) -> "Transform2D5":
        rinv = rotation2(-self.theta)
        tx, ty = -rinv @ np.asarray(self.t) / self.s
        return Transform2D5(1.0 / self.s, -self.theta, (tx, ty), -self.dz / self.s)

    def apply_xy(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        return self.s * xy @ self.matrix2().T + np.asarray(self.t)


@dataclass(frozen=True)
class PointCloud:
    """3D points with optional per-point RGB colors and unit normals."""

    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InputError("point coordinates must be finite")
        object.__setattr__(self, "points", _freeze(pts))
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(col) != len(pts):
                raise InputError("colors length must match points")
            object.__setattr__(self, "colors", _freeze(col))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise InputError("normals length must match points")
            lens = np.linalg.norm(nrm, axis=1)
            if len(nrm) and np.max(np.abs(lens - 1.0)) > 1e-6:
                raise InputError("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", _freeze(nrm))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class HeightGrid:
    """Georeferenced raster with 1..4 named float bands.

    ``(origin_x, origin_y)`` is the world position of the center of cell
    (row 0, col 0); row 0 is the max-y row, so y decreases with row index.
    NaN is the nodata sentinel.
    """

    origin_x: float
    origin_y: float
    gsd: float
    bands: dict[str, np.ndarray]

    def __post_init__(self):
        if not (self.gsd > 0 and math.isfinite(self.gsd)):
            raise InputError(f"gsd must be positive, got {self.gsd}")
        if not 1 <= len(self.bands) <= 4:
            raise InputError("grid must carry 1..4 bands")
        shapes = {b.shape for b in self.bands.values()}
        if len(shapes) != 1:
            raise InputError("all bands must share the same dimensions")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] * shape[1] == 0:
            raise InputError("bands must be non-empty 2D arrays")
        object.__setattr__(
            self, "bands", {k: _freeze(np.asarray(v)) for k, v in self.bands.items()}
        )

    @property
    def height(self) -> int:
        return next(iter(self.bands.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.bands.values())).shape[1]

    def band(self, name: str) -> np.ndarray:
        if name not in self.bands:
            raise InputError(f"grid has no band {name!r} (has {sorted(self.bands)})")
        return self.bands[name]

    def same_georef(self, other: "HeightGrid", tol: float = 1e-9) -> bool:
        return (
            abs(self.origin_x - other.origin_x) <= tol
            and abs(self.origin_y - other.origin_y) <= tol
            and abs(self.gsd - other.gsd) <= tol
            and self.width == other.width
            and self.height == other.height
        )

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest (row, col) per xy point plus an in-bounds mask."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        col = np.rint((xy[:, 0] - self.origin_x) / self.gsd).astype(np.int64)
        row = np.rint((self.origin_y - xy[:, 1]) / self.gsd).astype(np.int64)
        ok = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        return row, col, ok

    def cell_centers(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        x = self.origin_x + np.asarray(cols, dtype=float) * self.gsd
        y = self.origin_y - np.asarray(rows, dtype=float) * self.gsd
        return np.column_stack([x, y])


@dataclass(frozen=True)
class PerspectiveCamera:
    """Pinhole camera; ``rotation`` maps world directions into the camera frame."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        if not self.focal > 0:
            raise InputError("focal must be positive")
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or np.linalg.det(r) < 0:
            raise InputError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(
            self, "center", _freeze(np.asarray(self.center, dtype=float).reshape(3))
        )

    def view_dir(self) -> np.ndarray:
        """World-frame viewing direction (camera +z axis)."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ParallelCamera:
    """Nadir parallel projection tied to an orthophoto grid georef."""

    origin_x: float
    origin_y: float
    gsd: float
    width: int
    height: int

    def __post_init__(self):
        if not self.gsd > 0:
            raise InputError("gsd must be positive")

    @property
    def direction(self) -> np.ndarray:
        return np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh with optional per-face labels."""

    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray | None = None
    vertex_corrections: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise InputError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InputError("face with repeated vertex index")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "faces", _freeze(f))
        if self.face_labels is not None:
            lab = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(f):
                raise InputError("face_labels length must match faces")
            object.__setattr__(self, "face_labels", _freeze(lab))
        if self.vertex_corrections is not None:
            corr = np.asarray(self.vertex_corrections, dtype=np.float64).reshape(-1, 3)
            if len(corr) != len(v):
                raise InputError("vertex_corrections length must match vertices")
            object.__setattr__(self, "vertex_corrections", _freeze(corr))

    def face_normals(self) -> np.ndarray:
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0] = 1.0
        return n / lens[:, None]

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)


def apply_transform(cloud: PointCloud, T: Transform2D5) -> PointCloud:
    """Apply (s, theta, t, dz) to a cloud; normals rotate about the vertical axis."""
    if len(cloud) == 0:
        raise InputError("cloud must be non-empty")
    r = T.matrix2()
    pts = cloud.points
    xy = T.s * pts[:, :2] @ r.T + np.asarray(T.t)
    z = T.s * pts[:, 2] + T.dz
    out = np.column_stack([xy, z])
    normals = None
    if cloud.normals is not None:
        normals = np.column_stack([cloud.normals[:, :2] @ r.T, cloud.normals[:, 2]])
    return PointCloud(out, colors=cloud.colors, normals=normals)


def project_perspective(cam: PerspectiveCamera, p) -> tuple[float, float, float]:
    """Pinhole projection of a single world point; returns (u, v, depth).

    Raises BehindCameraError when the point has non-positive camera-frame depth.
    """
    pc = cam.rotation @ (np.asarray(p, dtype=float).reshape(3) - cam.center)
    if pc[2] <= 0:
        raise BehindCameraError(f"point {tuple(p)} is behind the camera (depth {pc[2]:g})")
    u = cam.focal * pc[0] / pc[2] + cam.cx
    v = cam.focal * pc[1] / pc[2] + cam.cy
    return float(u), float(v), float(pc[2])


def project_batch(cam: PerspectiveCamera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pinhole projection; callers must mask on depth > 0 themselves."""
    pc = (np.asarray(pts, dtype=float).reshape(-1, 3) - cam.center) @ cam.rotation.T
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = cam.focal * pc[:, :2] / depth[:, None]
    uv[:, 0] += cam.cx
    uv[:, 1] += cam.cy
    return uv, depth
