"""Per-segment-pair exhaustive 2D matching against a distance map.

A distance map of every overhead boundary point is built once with an exact
Euclidean distance transform.  For each (overhead, ground) segment pair the
rotation space is swept at a fixed interval; per rotation, translation
candidates are formed by snapping a handful of destination points onto the
(centralized) source points, each candidate is scored by the mean sampled
distance, and the best translation per rotation is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .boundary import BoundarySegment
from .errors import InputError
from .geom import HeightGrid, rotation2

_INF = 1e18


@dataclass(frozen=True)
class Hypothesis:
    """One candidate transformation (theta, t) for a segment pair, with its score."""

    src_segment: int
    dst_segment: int
    theta: float
    t: tuple[float, float]
    score: float
    s: float = 1.0

    def __post_init__(self):
        if self.score < 0:
            raise InputError("score must be non-negative")
        object.__setattr__(self, "theta", self.theta % (2 * math.pi))
        object.__setattr__(self, "t", (float(self.t[0]), float(self.t[1])))


@dataclass(frozen=True)
class DistanceMap:
    """HeightGrid with band "dist": meters to the nearest seed point."""

    grid: HeightGrid
    max_value: float

    @property
    def dist(self) -> np.ndarray:
        return self.grid.band("dist")

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Nearest-cell lookup; out-of-grid points return the map maximum."""
        row, col, ok = self.grid.cell_of(pts)
        out = np.full(len(row), self.max_value)
        out[ok] = self.dist[row[ok], col[ok]]
        return out


def _dt1d_sq(f: np.ndarray) -> np.ndarray:
    """1D squared-distance transform via the lower envelope of parabolas."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -_INF, _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edt_sq(seed_mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in cells) to the nearest true cell."""
    mask = np.asarray(seed_mask, dtype=bool)
    if not mask.any():
        raise InputError("distance transform needs at least one seed")
    g = np.where(mask, 0.0, _INF)
    for j in range(g.shape[1]):
        g[:, j] = _dt1d_sq(g[:, j])
    out = np.empty_like(g)
    for i in range(g.shape[0]):
        out[i] = _dt1d_sq(g[i])
    return np.rint(out).astype(np.int64)


def distance_transform(seeds: np.ndarray, gsd: float, margin_m: float) -> DistanceMap:
    """Distance map over the seeds' bounding box inflated by ``margin_m``."""
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    if len(seeds) == 0:
        raise InputError("distance transform needs at least one seed")
    if gsd <= 0:
        raise InputError("gsd must be positive")
    xmin, ymin = seeds.min(axis=0) - margin_m
    xmax, ymax = seeds.max(axis=0) + margin_m
    width = int(math.floor((xmax - xmin) / gsd)) + 1
    height = int(math.floor((ymax - ymin) / gsd)) + 1
    origin_x, origin_y = xmin, ymin + (height - 1) * gsd
    mask = np.zeros((height, width), dtype=bool)
    col = np.rint((seeds[:, 0] - origin_x) / gsd).astype(np.int64)
    row = np.rint((origin_y - seeds[:, 1]) / gsd).astype(np.int64)
    mask[np.clip(row, 0, height - 1), np.clip(col, 0, width - 1)] = True
    dist = np.sqrt(edt_sq(mask).astype(np.float64)) * gsd
    grid = HeightGrid(origin_x, origin_y, gsd, {"dist": dist})
    return DistanceMap(grid, float(dist.max()))


def chamfer_score(dmap: DistanceMap, pts: np.ndarray) -> float:
    """Mean distance-map value sampled at the points (nearest cell)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise InputError("chamfer score needs at least one point")
    return float(dmap.sample(pts).mean())


def _evenly_strided(n: int, count: int) -> np.ndarray:
    if n <= count:
        return np.arange(n)
    return np.floor(np.arange(count) * n / count).astype(np.int64)


def match_pair(
    dst: BoundarySegment,
    src: BoundarySegment,
    dmap: DistanceMap,
    s: float = 1.0,
    step_deg: float = 3.0,
    group_c: int = 10,
    n_eval: int = 200,
) -> list[Hypothesis]:
    """Sweep rotations at ``step_deg``, one best-translation hypothesis each.

    Translation candidates per rotation are ``q - s R p`` over ``group_c``
    evenly strided destination points q and the (subsampled, centralized)
    source points p; candidates are scored by the mean distance-map lookup
    over the source subsample.  Ties break toward smaller tx, then ty.
    """
    if len(dst.points2d) < 3 or len(src.points2d) < 3:
        raise InputError("segments need at least 3 points")
    if s <= 0:
        raise InputError("scale must be positive")
    n_theta = int(math.ceil(360.0 / step_deg))
    centroid = src.points2d.mean(axis=0)
    p_all = src.points2d - centroid
    p_eval = p_all[_evenly_strided(len(p_all), n_eval)]
    q = dst.points2d[_evenly_strided(len(dst.points2d), group_c)]

    grid = dmap.grid
    dist = dmap.dist
    h, w = dist.shape
    hyps = []
    for it in range(n_theta):
        theta = math.radians(it * step_deg)
        r = rotation2(theta)
        rp = s * p_eval @ r.T                        # (S, 2)
        cand = q[:, None, :] - rp[None, :, :]        # (C, S, 2) translations
        cand = cand.reshape(-1, 2)
        moved = cand[:, None, :] + rp[None, :, :]    # (C*S, S, 2)
        col = np.rint((moved[..., 0] - grid.origin_x) / grid.gsd).astype(np.int64)
        row = np.rint((grid.origin_y - moved[..., 1]) / grid.gsd).astype(np.int64)
        ok = (row >= 0) & (row < h) & (col >= 0) & (col < w)
        vals = np.where(ok, dist[np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)],
                        dmap.max_value)
        scores = vals.mean(axis=1)
        order = np.lexsort((cand[:, 1], cand[:, 0], scores))
        best = order[0]
        t_centered = cand[best]
        t = t_centered - s * (r @ centroid)          # translation for original coords
        hyps.append(
            Hypothesis(src.id, dst.id, theta, (float(t[0]), float(t[1])),
                       float(scores[best]), s)
        )
    return hyps


def filter_hypotheses(
    hyps: list[Hypothesis],
    ground_segments: list[BoundarySegment],
    dmap: DistanceMap,
    traj_len_m: float,
    err_max_m: float = 2.0,
) -> list[Hypothesis]:
    """Re-score each hypothesis on all ground boundary points near its segment.

    Points of every ground segment within ``traj_len_m / 10`` of the source
    segment's barycenter are transformed and re-scored; hypotheses above
    ``err_max_m`` mean error are dropped.  Result sorted by ascending score.
    """
    if traj_len_m <= 0:
        raise InputError("trajectory length must be positive")
    radius = traj_len_m / 10.0
    by_id = {seg.id: seg for seg in ground_segments}
    all_pts = np.vstack([seg.points2d for seg in ground_segments])
    survivors = []
    cache: dict[int, np.ndarray] = {}
    for hyp in hyps:
        seg = by_id.get(hyp.src_segment)
        if seg is None:
            raise InputError(f"hypothesis references unknown segment {hyp.src_segment}")
        if hyp.src_segment not in cache:
            near = np.linalg.norm(all_pts - seg.barycenter, axis=1) <= radius
            cache[hyp.src_segment] = all_pts[near]
        pts = cache[hyp.src_segment]
        r = rotation2(hyp.theta)
        moved = hyp.s * pts @ r.T + np.asarray(hyp.t)
        score = chamfer_score(dmap, moved)
        if score <= err_max_m:
            survivors.append(replace(hyp, score=score))
    survivors.sort(key=lambda h: (h.score, h.src_segment, h.dst_segment, h.theta))
    return survivors
