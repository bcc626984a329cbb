"""Evaluation: registration RMSE, DSM RMSE, ICP baseline, mesh distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EvalError, InputError
from .geom import HeightGrid, PointCloud, Transform2D5, TriMesh, apply_transform, rotation2


@dataclass
class EvalReport:
    """Metric rows plus per-stage runtimes; everything non-negative."""

    metrics: list = field(default_factory=list)  # (metric, value, unit, stage)
    runtimes: list = field(default_factory=list)  # (stage, seconds)

    def add(self, metric: str, value: float, unit: str, stage: str):
        self.metrics.append((metric, float(value), unit, stage))

    def csv(self, seed: int) -> str:
        lines = ["metric,value,unit,stage,seed"]
        for m, v, u, s in self.metrics:
            lines.append(f"{m},{v:.9g},{u},{s},{seed}")
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        w = max((len(m) for m, *_ in self.metrics), default=10)
        lines = [f"{m:<{w}}  {v:>14.6g} {u:<6} [{s}]" for m, v, u, s in self.metrics]
        return "\n".join(lines) + "\n"


def eval_registration(registered: PointCloud, true_points: np.ndarray) -> float:
    """RMSE of the 3D distance between registered and true positions."""
    true_points = np.asarray(true_points, dtype=float).reshape(-1, 3)
    if len(true_points) != len(registered):
        raise InputError("per-point truth must match the cloud length")
    d2 = np.sum((registered.points - true_points) ** 2, axis=1)
    return float(math.sqrt(d2.mean()))


def rasterize_max(pts: np.ndarray, grid: HeightGrid) -> np.ndarray:
    """Per-cell max z of the points on the grid georef; NaN where empty."""
    row, col, ok = grid.cell_of(pts[:, :2])
    out = np.full((grid.height, grid.width), -np.inf)
    np.maximum.at(out, (row[ok], col[ok]), pts[ok, 2])
    out[~np.isfinite(out)] = np.nan
    return out


def rasterize_mesh_max(mesh: TriMesh, grid: HeightGrid) -> np.ndarray:
    """Max surface height per cell by sampling each triangle at cell centers."""
    out = np.full((grid.height, grid.width), -np.inf)
    v = mesh.vertices
    for f in mesh.faces:
        tri = v[f]
        xmin, ymin = tri[:, :2].min(axis=0)
        xmax, ymax = tri[:, :2].max(axis=0)
        c0 = max(0, int(math.floor((xmin - grid.origin_x) / grid.gsd)))
        c1 = min(grid.width - 1, int(math.ceil((xmax - grid.origin_x) / grid.gsd)))
        r0 = max(0, int(math.floor((grid.origin_y - ymax) / grid.gsd)))
        r1 = min(grid.height - 1, int(math.ceil((grid.origin_y - ymin) / grid.gsd)))
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        X = grid.origin_x + cols * grid.gsd
        Y = grid.origin_y - rows * grid.gsd
        XX, YY = np.meshgrid(X, Y)
        t = np.column_stack([tri[1, :2] - tri[0, :2], tri[2, :2] - tri[0, :2]])
        det = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
        if abs(det) < 1e-12:
            continue
        inv = np.array([[t[1, 1], -t[0, 1]], [-t[1, 0], t[0, 0]]]) / det
        pix = np.column_stack([XX.ravel(), YY.ravel()]) - tri[0, :2]
        ab = pix @ inv.T
        bc = np.column_stack([1.0 - ab.sum(axis=1), ab])
        inside = (bc >= -1e-9).all(axis=1)
        if not inside.any():
            continue
        z = bc[inside] @ tri[:, 2]
        rr = np.repeat(rows, len(cols))[inside]
        cc = np.tile(cols, len(rows))[inside]
        np.maximum.at(out, (rr, cc), z)
    out[~np.isfinite(out)] = np.nan
    return out


def eval_dsm(model, truth: HeightGrid) -> float:
    """RMSE between a rasterized model (cloud or mesh) and the truth DSM."""
    if isinstance(model, PointCloud):
        surf = rasterize_max(model.points, truth)
    elif isinstance(model, TriMesh):
        surf = rasterize_mesh_max(model, truth)
    else:
        surf = np.asarray(model, dtype=float)
    ref = truth.band("height").astype(np.float64)
    both = np.isfinite(surf) & np.isfinite(ref)
    if not both.any():
        raise EvalError("model and truth DSM do not overlap")
    diff = surf[both] - ref[both]
    return float(math.sqrt(np.mean(diff * diff)))


def icp_baseline(src: PointCloud, dst: PointCloud, max_iter: int = 40,
                 subsample: int = 20000, tol: float = 1e-6):
    """Point-to-point ICP constrained to (theta, t, dz), scale fixed at 1.

    Comparison baseline only.  Returns (Transform2D5, converged flag).
    """
    pts = src.points
    if len(pts) > subsample:
        idx = np.floor(np.arange(subsample) * len(pts) / subsample).astype(np.int64)
        pts = pts[idx]
    tree = cKDTree(dst.points)
    T = Transform2D5()
    prev_rms = np.inf
    converged = False
    for _ in range(max_iter):
        moved_xy = T.s * pts[:, :2] @ T.matrix2().T + np.asarray(T.t)
        moved_z = pts[:, 2] + T.dz
        moved = np.column_stack([moved_xy, moved_z])
        d, j = tree.query(moved)
        q = dst.points[j]
        rms = float(np.sqrt((d * d).mean()))
        # 2D Horn alignment of original xy onto matched xy
        mu_p = pts[:, :2].mean(axis=0)
        mu_q = q[:, :2].mean(axis=0)
        pc = pts[:, :2] - mu_p
        qc = q[:, :2] - mu_q
        a = float(np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0]))
        b = float(np.sum(pc[:, 0] * qc[:, 0] + pc[:, 1] * qc[:, 1]))
        theta = math.atan2(a, b)
        r = rotation2(theta)
        t = mu_q - r @ mu_p
        dz = float(np.mean(q[:, 2] - pts[:, 2]))
        T = Transform2D5(1.0, theta, (float(t[0]), float(t[1])), dz)
        if abs(prev_rms - rms) < tol:
            converged = True
            break
        prev_rms = rms
    return T, converged


def point_triangle_distance(points: np.ndarray, tri_pts: np.ndarray) -> np.ndarray:
    """Min distance from each point to any of the triangles (exact, chunked)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri_pts = np.asarray(tri_pts, dtype=float).reshape(-1, 3, 3)
    best = np.full(len(points), np.inf)
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    ab, ac = b - a, c - a
    chunk = max(1, int(2e6 // max(len(tri_pts), 1)))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk][:, None, :]
        ap = p - a[None]
        d1 = np.einsum("ptj,tj->pt", ap, ab)
        d2 = np.einsum("ptj,tj->pt", ap, ac)
        bp = p - b[None]
        d3 = np.einsum("ptj,tj->pt", bp, ab)
        d4 = np.einsum("ptj,tj->pt", bp, ac)
        cp = p - c[None]
        d5 = np.einsum("ptj,tj->pt", cp, ab)
        d6 = np.einsum("ptj,tj->pt", cp, ac)
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        with np.errstate(divide="ignore", invalid="ignore"):
            v = vb / denom
            w = vc / denom
        # region tests per Ericson, clamped to edges/vertices
        closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
        # vertex / edge regions
        t_ab = np.clip(d1 / np.where(d1 - d3 == 0, 1e-300, d1 - d3), 0, 1)
        on_ab = a[None] + t_ab[..., None] * ab[None]
        t_ac = np.clip(d2 / np.where(d2 - d6 == 0, 1e-300, d2 - d6), 0, 1)
        on_ac = a[None] + t_ac[..., None] * ac[None]
        bc_den = (d4 - d3) + (d5 - d6)
        t_bc = np.clip((d4 - d3) / np.where(bc_den == 0, 1e-300, bc_den), 0, 1)
        on_bc = b[None] + t_bc[..., None] * (c - b)[None]
        inside = (v >= 0) & (w >= 0) & (v + w <= 1) & (denom != 0)
        cands = np.stack([
            np.where(inside[..., None], closest, np.inf),
            on_ab, on_ac, on_bc,
        ])
        d_all = np.linalg.norm(cands - p[None], axis=-1)
        d_all = np.nan_to_num(d_all, nan=np.inf)
        best[s:s + chunk] = np.minimum(best[s:s + chunk], d_all.min(axis=(0, 2)))
    return best


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted deterministic surface sampling."""
    tri = mesh.vertices[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    if areas.sum() <= 0:
        raise InputError("mesh has zero area")
    rng = np.random.default_rng(seed)
    fi = rng.choice(len(tri), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[fi, 0], tri[fi, 1], tri[fi, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def hausdorff_mesh(mesh_a: TriMesh, mesh_b: TriMesh, n: int = 40000,
                   seed: int = 0) -> float:
    """Symmetric Hausdorff estimate from dense surface samples (both ways)."""
    pa = sample_mesh_surface(mesh_a, n, seed)
    pb = sample_mesh_surface(mesh_b, n, seed + 1)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))
