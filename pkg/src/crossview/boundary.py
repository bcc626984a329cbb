"""Building-boundary extraction from the overhead DSM and the ground cloud.

Overhead side: white top-hat on the DSM isolates high objects, NDVI strips
vegetation, connected components of the remaining mask yield boundary point
sets.  Ground side: per-point normals locate the vertical direction, facade
points are projected to the horizontal plane and grown into segments on an
occupancy grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InputError, AlgorithmError
from .geom import HeightGrid, PointCloud, _freeze

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean raster sharing a HeightGrid georef."""

    origin_x: float
    origin_y: float
    gsd: float
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _freeze(np.asarray(self.mask, dtype=bool)))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def same_georef(self, grid, tol: float = 1e-9) -> bool:
        return (
            abs(self.origin_x - grid.origin_x) <= tol
            and abs(self.origin_y - grid.origin_y) <= tol
            and abs(self.gsd - grid.gsd) <= tol
            and (self.height, self.width) == (grid.height, grid.width)
        )


@dataclass(frozen=True)
class BoundarySegment:
    """2D boundary point set of one building segment."""

    id: int
    points2d: np.ndarray
    barycenter: np.ndarray
    source: str  # "overhead" | "ground"
    n_points: int = 0  # supporting point/cell count behind the boundary

    def __post_init__(self):
        pts = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise InputError("boundary segment needs at least 3 points")
        object.__setattr__(self, "points2d", _freeze(pts))
        object.__setattr__(self, "barycenter", _freeze(pts.mean(axis=0)))
        if self.source not in ("overhead", "ground"):
            raise InputError(f"bad segment source {self.source!r}")


def disk_footprint(radius_cells: int) -> np.ndarray:
    r = int(radius_cells)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def tophat_mask(dsm: HeightGrid, se_radius_m: float, h_min: float) -> BinaryMask:
    """White top-hat (height minus grayscale opening by a disk) thresholded at h_min.

    Out-of-grid and NaN cells do not constrain the morphology; NaN cells are
    always false in the output.
    """
    h = dsm.band("height").astype(np.float64)
    if se_radius_m < dsm.gsd:
        raise InputError("structuring element radius must be at least one cell")
    r_cells = int(round(se_radius_m / dsm.gsd))
    fp = disk_footprint(r_cells)
    nan = ~np.isfinite(h)
    hi = np.where(nan, np.inf, h)
    eroded = ndimage.grey_erosion(hi, footprint=fp, mode="constant", cval=np.inf)
    eroded = np.where(np.isfinite(eroded), eroded, -np.inf)
    opened = ndimage.grey_dilation(eroded, footprint=fp, mode="constant", cval=-np.inf)
    tophat = h - opened
    mask = np.where(nan, False, tophat > h_min)
    return BinaryMask(dsm.origin_x, dsm.origin_y, dsm.gsd, mask)


def ndvi(grid: HeightGrid) -> HeightGrid:
    """Normalized difference vegetation index; 0 where nir + red == 0."""
    nir = grid.band("nir").astype(np.float64)
    red = grid.band("red").astype(np.float64)
    denom = nir + red
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom == 0, 0.0, (nir - red) / denom)
    return HeightGrid(grid.origin_x, grid.origin_y, grid.gsd, {"ndvi": out})


def remove_vegetation(mask: BinaryMask, ndvi_grid: HeightGrid, ndvi_max: float) -> BinaryMask:
    if not mask.same_georef(ndvi_grid):
        raise InputError("mask and NDVI grid georefs do not match")
    keep = mask.mask & (ndvi_grid.band("ndvi") <= ndvi_max)
    return BinaryMask(mask.origin_x, mask.origin_y, mask.gsd, keep)


def _boundary_cells(component: np.ndarray) -> np.ndarray:
    """True cells with at least one false 4-neighbor (grid edge counts as false)."""
    padded = np.pad(component, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return component & ~interior


def mask_boundary(mask: BinaryMask, min_cells: int = 4) -> list[BoundarySegment]:
    """Boundary point sets of the 8-connected components of a binary mask."""
    labels, n = ndimage.label(mask.mask, structure=_EIGHT)
    segments = []
    sid = 0
    for comp_label in range(1, n + 1):
        comp = labels == comp_label
        count = int(comp.sum())
        if count < min_cells:
            continue
        rows, cols = np.nonzero(_boundary_cells(comp))
        if len(rows) < 3:
            continue
        x = mask.origin_x + cols * mask.gsd
        y = mask.origin_y - rows * mask.gsd
        segments.append(
            BoundarySegment(sid, np.column_stack([x, y]), None, "overhead", n_points=count)
        )
        sid += 1
    return segments


def estimate_normals(
    cloud: PointCloud, k: int, sensor_positions: np.ndarray | None = None
) -> PointCloud:
    """PCA normals from the k nearest neighbors of every point.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue.  Sign: toward the nearest sensor when positions are
    given, otherwise toward +z where |nz| > 0.1, else toward +x.  Degenerate
    (collinear) neighborhoods get (0,0,1).
    """
    pts = cloud.points
    if k < 3:
        raise InputError("k must be at least 3")
    if len(pts) < k + 1:
        raise InputError(f"cloud must have at least k+1={k + 1} points")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    nb = pts[idx]  # (N, k+1, 3), self included
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    # rank < 2 neighborhoods: two smallest eigenvalues both ~0 relative to largest
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] / scale < 1e-10
    normals = normals.copy()
    normals[degenerate] = (0.0, 0.0, 1.0)
    if sensor_positions is not None:
        sensors = np.asarray(sensor_positions, dtype=float).reshape(-1, 3)
        stree = cKDTree(sensors)
        _, sidx = stree.query(pts)
        to_sensor = sensors[sidx] - pts
        flip = np.einsum("ij,ij->i", normals, to_sensor) < 0
    else:
        nz = normals[:, 2]
        flip = np.where(np.abs(nz) > 0.1, nz < 0, normals[:, 0] < 0)
    normals[flip] *= -1.0
    lens = np.linalg.norm(normals, axis=1)
    normals /= lens[:, None]
    return PointCloud(pts, colors=cloud.colors, normals=normals)


def _sphere_bin_centers(normals: np.ndarray, step_deg: float = 10.0) -> np.ndarray:
    """Centers of the occupied cells of a polar/azimuth binning of directions."""
    step = math.radians(step_deg)
    polar = np.arccos(np.clip(normals[:, 2], -1.0, 1.0))
    azim = np.arctan2(normals[:, 1], normals[:, 0]) % (2 * math.pi)
    ip = np.minimum((polar / step).astype(int), int(math.pi / step + 0.5) - 1)
    ia = (azim / step).astype(int)
    occupied = np.unique(ip.astype(np.int64) * 10000 + ia)
    ip_c = occupied // 10000
    ia_c = occupied % 10000
    pc = (ip_c + 0.5) * step
    ac = (ia_c + 0.5) * step
    return np.column_stack(
        [np.sin(pc) * np.cos(ac), np.sin(pc) * np.sin(ac), np.cos(pc)]
    )


def estimate_vertical(cloud: PointCloud, bin_deg: float = 10.0,
                      max_tilt_deg: float = 45.0) -> np.ndarray:
    """Vertical direction from the normal distribution.

    Candidates are the occupied spherical bin centers plus +z; each is scored
    by the number of normals parallel to it (ground support) plus the number
    perpendicular to it (facade support).  Near-horizontal candidates are
    excluded (any such direction collects the whole ground plane as
    perpendicular support, a degenerate near-tie), so only bins within
    ``max_tilt_deg`` of +/-z compete.  The winner is returned oriented with
    positive z.
    """
    if cloud.normals is None:
        raise InputError("cloud has no normals")
    normals = cloud.normals
    nondeg = np.abs(np.linalg.norm(normals, axis=1) - 1.0) < 1e-3
    normals = normals[nondeg]
    if len(normals) == 0:
        raise AlgorithmError("all normals degenerate; cannot estimate vertical")
    cands = _sphere_bin_centers(normals, bin_deg)
    cands = cands[np.abs(cands[:, 2]) >= math.cos(math.radians(max_tilt_deg))]
    cands = np.vstack([[0.0, 0.0, 1.0], cands])
    cos_t = math.cos(math.radians(bin_deg))
    sin_t = math.sin(math.radians(bin_deg))
    best_score = -1
    best = None
    chunk = 200_000
    scores = np.zeros(len(cands), dtype=np.int64)
    for start in range(0, len(normals), chunk):
        d = np.abs(normals[start:start + chunk] @ cands.T)  # (chunk, C)
        scores += (d > cos_t).sum(axis=0) + (d < sin_t).sum(axis=0)
    best = int(np.argmax(scores))  # ties: +z candidate is first, then bin order
    v = cands[best]
    if v[2] < 0:
        v = -v
    return v / np.linalg.norm(v)


def _plane_basis(vertical: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vertical, dtype=float)
    seed = np.array([1.0, 0.0, 0.0]) if abs(v[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = seed - (seed @ v) * v
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(v, e1)
    return e1, e2


def ground_segments(
    cloud: PointCloud, vertical: np.ndarray, cell_m: float, min_pts: int
) -> list[BoundarySegment]:
    """Facade segments of the ground cloud, as plan-view boundary point sets.

    Points whose normal lies within 10 degrees of horizontal are projected
    onto the plane perpendicular to ``vertical``; occupied cells of an
    occupancy grid are flooded 8-connected, segments with more than
    ``min_pts`` supporting points are kept, and each segment reports its
    occupied boundary-cell centers.
    """
    if cloud.normals is None:
        raise InputError("cloud has no normals")
    if abs(np.linalg.norm(vertical) - 1.0) > 1e-6:
        raise InputError("vertical must be unit length")
    facade = np.abs(cloud.normals @ vertical) < math.sin(math.radians(10.0))
    pts = cloud.points[facade]
    if len(pts) == 0:
        return []
    e1, e2 = _plane_basis(vertical)
    uv = np.column_stack([pts @ e1, pts @ e2])
    u0, v0 = uv.min(axis=0)
    cols = np.floor((uv[:, 0] - u0) / cell_m).astype(np.int64)
    rows = np.floor((uv[:, 1] - v0) / cell_m).astype(np.int64)
    h, w = rows.max() + 1, cols.max() + 1
    occ = np.zeros((h, w), dtype=bool)
    occ[rows, cols] = True
    counts = np.zeros((h, w), dtype=np.int64)
    np.add.at(counts, (rows, cols), 1)
    labels, n = ndimage.label(occ, structure=_EIGHT)
    segments = []
    sid = 0
    for comp_label in range(1, n + 1):
        comp = labels == comp_label
        npts = int(counts[comp].sum())
        if npts <= min_pts:
            continue
        brows, bcols = np.nonzero(_boundary_cells(comp))
        if len(brows) < 3:
            continue
        u = u0 + (bcols + 0.5) * cell_m
        v = v0 + (brows + 0.5) * cell_m
        segments.append(
            BoundarySegment(sid, np.column_stack([u, v]), None, "ground", n_points=npts)
        )
        sid += 1
    return segments
