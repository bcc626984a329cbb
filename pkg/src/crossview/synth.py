"""Blocks-world scene generator with controllable drift.

Generates a ground-truth city (axis-aligned buildings, streets, vegetation
patches), an overhead cloud sampled at the DSM grid, a ground-view cloud
(facades + street within 25 m of a trajectory), camera stations along the
trajectory, rendered ground-view images, and a drift model that warps the
ground data the way a drifting monocular reconstruction would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GenerationError, InputError
from .fileio import PoseRecord, matrix_to_quat
from .geom import HeightGrid, PointCloud, Transform2D5, TriMesh

SWATH_M = 25.0          # ground data reaches this far from the trajectory
STATION_SPACING_M = 2.5
CAM_HEIGHT_M = 1.8
IMG_W, IMG_H, FOCAL = 320, 240, 260.0


@dataclass(frozen=True)
class DriftModel:
    """Global offset plus per-meter heading/lateral drift along the trajectory."""

    t0: Transform2D5 = field(default_factory=Transform2D5)
    rate_theta: float = 0.0   # radians per trajectory meter
    rate_lateral: float = 0.0  # meters per trajectory meter

    def __post_init__(self):
        if not (math.isfinite(self.rate_theta) and math.isfinite(self.rate_lateral)):
            raise InputError("drift rates must be finite")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent_m: float = 90.0
    n_buildings: int = 3
    footprint_min_m: float = 10.0
    footprint_max_m: float = 18.0
    height_min_m: float = 5.0
    height_max_m: float = 11.0
    gsd_m: float = 0.5
    noise_overhead_m: float = 0.3
    ground_spacing_m: float = 0.02
    noise_ground_m: float = 0.02
    n_vegetation: int = 2
    trajectory: tuple | None = None  # waypoint list; None = straight main street

    def __post_init__(self):
        if self.gsd_m < self.ground_spacing_m:
            raise InputError("overhead gsd must be at least the ground spacing")
        for name in ("extent_m", "footprint_min_m", "footprint_max_m",
                     "height_min_m", "height_max_m", "gsd_m", "ground_spacing_m"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


@dataclass(frozen=True)
class Trajectory:
    waypoints: np.ndarray     # (K, 2)
    stations: np.ndarray      # (S, 3) camera centers
    arclengths: np.ndarray    # (S,)
    headings: np.ndarray      # (S, 2) unit 2D heading per station

    @property
    def length(self) -> float:
        seg = np.diff(self.waypoints, axis=0)
        return float(np.linalg.norm(seg, axis=1).sum())


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    buildings: np.ndarray     # (B, 5): x0 y0 x1 y1 height
    vegetation: np.ndarray    # (V, 4): cx cy radius height
    dsm: HeightGrid           # truth: height, red, nir
    ortho: HeightGrid         # red, green, blue, nir
    overview: PointCloud
    ground: PointCloud
    view_pairs: np.ndarray    # (M, 2): point index, station id
    poses: tuple
    trajectory: Trajectory
    truth_mesh: TriMesh
    mesh_kinds: np.ndarray    # per truth-mesh face: 0 ground, 1 wall, 2 roof
    mesh_bids: np.ndarray


# ------------------------------------------------------------------ colors


def surface_color(kind: np.ndarray, bid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Deterministic procedural albedo, shared by clouds and the renderer."""
    kind = np.asarray(kind)
    bid = np.asarray(bid)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rgb = np.empty((len(pts), 3))
    ground = kind == 0
    wall = kind == 1
    roof = kind == 2
    base = 95.0 + 18.0 * np.sin(0.9 * x) * np.sin(1.1 * y)
    rgb[ground] = base[ground, None] * np.array([1.0, 1.02, 1.0])
    tint = ((bid * 53) % 41) - 20.0
    stripes = 40.0 * (np.floor(z / 0.7) % 2)
    columns = 18.0 * (np.floor((x + y) / 2.0) % 2)
    wl = 118.0 + tint + stripes + columns
    rgb[wall] = wl[wall, None] * np.array([1.0, 0.97, 0.92])
    rf = 148.0 + tint + 16.0 * np.sin(1.3 * x + 0.3 * bid)
    rgb[roof] = rf[roof, None] * np.array([0.98, 0.96, 0.95])
    return np.clip(rgb, 0, 255)


# ------------------------------------------------------------------ placement


def _default_trajectory(extent: float) -> np.ndarray:
    y = extent / 2.0
    return np.array([[0.08 * extent, y], [0.92 * extent, y]])


def _polyline_distance(pts2d: np.ndarray, waypoints: np.ndarray) -> np.ndarray:
    best = np.full(len(pts2d), np.inf)
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        ab = b - a
        L2 = float(ab @ ab)
        t = np.clip((pts2d - a) @ ab / max(L2, 1e-12), 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(pts2d - proj, axis=1))
    return best


def _place_buildings(spec: SceneSpec, waypoints: np.ndarray, rng) -> np.ndarray:
    out = []
    margin = 6.0
    corridor = 7.0  # half-width kept clear around the trajectory
    tries = 0
    while len(out) < spec.n_buildings:
        tries += 1
        if tries > 1000:
            raise GenerationError(
                f"could not place {spec.n_buildings} buildings in {tries} attempts"
            )
        w = rng.uniform(spec.footprint_min_m, spec.footprint_max_m)
        d = rng.uniform(spec.footprint_min_m, spec.footprint_max_m)
        x0 = rng.uniform(margin, spec.extent_m - margin - w)
        y0 = rng.uniform(margin, spec.extent_m - margin - d)
        h = rng.uniform(spec.height_min_m, spec.height_max_m)
        box = (x0, y0, x0 + w, y0 + d)
        corners = np.array([[box[0], box[1]], [box[2], box[1]],
                            [box[2], box[3]], [box[0], box[3]],
                            [(box[0] + box[2]) / 2, (box[1] + box[3]) / 2]])
        if _polyline_distance(corners, waypoints).min() < corridor:
            continue
        clash = False
        for b in out:
            if not (box[2] + 4.0 < b[0] or b[2] + 4.0 < box[0]
                    or box[3] + 4.0 < b[1] or b[3] + 4.0 < box[1]):
                clash = True
                break
        if not clash:
            out.append([*box, h])
    return np.array(out).reshape(-1, 5)


def _place_vegetation(spec: SceneSpec, buildings, waypoints, rng) -> np.ndarray:
    out = []
    tries = 0
    while len(out) < spec.n_vegetation:
        tries += 1
        if tries > 1000:
            break  # vegetation is decoration; give up quietly
        r = rng.uniform(2.5, 5.0)
        cx = rng.uniform(r + 2, spec.extent_m - r - 2)
        cy = rng.uniform(r + 2, spec.extent_m - r - 2)
        h = rng.uniform(4.0, 8.0)
        ok = _polyline_distance(np.array([[cx, cy]]), waypoints)[0] > r + 4.0
        for b in buildings:
            if b[0] - r - 1 < cx < b[2] + r + 1 and b[1] - r - 1 < cy < b[3] + r + 1:
                ok = False
        if ok:
            out.append([cx, cy, r, h])
    return np.array(out).reshape(-1, 4)


# ----------------------------------------------------------------- rasters


def _build_truth_rasters(spec, buildings, vegetation):
    n = int(round(spec.extent_m / spec.gsd_m))
    g = spec.gsd_m
    xs = (np.arange(n) + 0.5) * g
    ys = spec.extent_m - (np.arange(n) + 0.5) * g
    X, Y = np.meshgrid(xs, ys)
    H = np.zeros((n, n))
    kind = np.zeros((n, n), dtype=np.int64)
    bid = np.zeros((n, n), dtype=np.int64)
    for i, b in enumerate(buildings):
        m = (X >= b[0]) & (X <= b[2]) & (Y >= b[1]) & (Y <= b[3])
        H[m] = b[4]
        kind[m] = 2
        bid[m] = i
    veg_mask = np.zeros((n, n), dtype=bool)
    for v in vegetation:
        m = (X - v[0]) ** 2 + (Y - v[1]) ** 2 <= v[2] ** 2
        m &= kind == 0
        H[m] = v[3]
        veg_mask |= m
    pts = np.column_stack([X.ravel(), Y.ravel(), H.ravel()])
    rgb = surface_color(kind.ravel(), bid.ravel(), pts).reshape(n, n, 3)
    nir = np.where(veg_mask, 215.0, rgb[..., 0] * 0.9)
    rgb[veg_mask] = (45.0, 110.0, 55.0)
    origin_x, origin_y = xs[0], ys[0]
    dsm = HeightGrid(origin_x, origin_y, g, {
        "height": H.astype(np.float32),
        "red": rgb[..., 0].astype(np.float32),
        "nir": nir.astype(np.float32),
    })
    ortho = HeightGrid(origin_x, origin_y, g, {
        "red": rgb[..., 0].astype(np.float32),
        "green": rgb[..., 1].astype(np.float32),
        "blue": rgb[..., 2].astype(np.float32),
        "nir": nir.astype(np.float32),
    })
    return dsm, ortho


# ---------------------------------------------------------------- trajectory


def _build_trajectory(spec: SceneSpec) -> Trajectory:
    wp = np.asarray(spec.trajectory, dtype=float) if spec.trajectory is not None \
        else _default_trajectory(spec.extent_m)
    if len(wp) < 2:
        raise InputError("trajectory needs at least 2 waypoints")
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = seg_len.sum()
    n_st = max(2, int(total / STATION_SPACING_M))
    s_vals = np.linspace(0.0, total, n_st)
    cum = np.r_[0.0, np.cumsum(seg_len)]
    stations = np.empty((n_st, 3))
    headings = np.empty((n_st, 2))
    for i, s in enumerate(s_vals):
        k = min(np.searchsorted(cum, s, "right") - 1, len(seg) - 1)
        f = (s - cum[k]) / max(seg_len[k], 1e-12)
        stations[i, :2] = wp[k] + f * seg[k]
        stations[i, 2] = CAM_HEIGHT_M
        headings[i] = seg[k] / max(seg_len[k], 1e-12)
    return Trajectory(wp, stations, s_vals, headings)


def _station_cameras(traj: Trajectory) -> list[np.ndarray]:
    """World->camera rotations: stations alternate looking left/right, pitched down."""
    rots = []
    up = np.array([0.0, 0.0, 1.0])
    pitch = math.radians(8.0)
    for i in range(len(traj.stations)):
        h = traj.headings[i]
        n = np.array([-h[1], h[0]])
        side = n if i % 2 == 0 else -n
        look = np.array([side[0] * math.cos(pitch), side[1] * math.cos(pitch),
                         -math.sin(pitch)])
        z_c = look / np.linalg.norm(look)
        x_c = np.cross(z_c, up)
        x_c /= np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        rots.append(np.vstack([x_c, y_c, z_c]))
    return rots


def _make_poses(traj: Trajectory) -> list[PoseRecord]:
    rots = _station_cameras(traj)
    out = []
    for i, (r, c) in enumerate(zip(rots, traj.stations)):
        out.append(PoseRecord(i, FOCAL, IMG_W / 2.0, IMG_H / 2.0,
                              tuple(matrix_to_quat(r)), tuple(c)))
    return out


# ------------------------------------------------------------- ground cloud


def _segment_box_blocked(p0, p1, boxes, t_hi=0.995):
    """True per segment when any (slightly shrunk) box blocks p0->p1."""
    n = len(p0)
    blocked = np.zeros(n, dtype=bool)
    d = p1 - p0
    for b in boxes:
        lo = np.array([b[0] + 0.05, b[1] + 0.05, -1.0])
        hi = np.array([b[2] - 0.05, b[3] - 0.05, b[4] - 0.05])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - p0) / d
            t2 = (hi - p0) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmax >= 0.005) & (tmin <= t_hi)
        blocked |= hit
    return blocked


def _assign_views(points: np.ndarray, stations: np.ndarray, buildings,
                  k: int = 2, max_range: float = 35.0):
    """Per point: up to k nearest stations with line of sight; (M,2) pairs."""
    tree = cKDTree(stations[:, :2])
    kq = min(8, len(stations))
    _, near = tree.query(points[:, :2], k=kq)
    near = near.reshape(len(points), -1)
    pairs = []
    found = np.zeros(len(points), dtype=np.int64)
    for col in range(near.shape[1]):
        sid = near[:, col]
        cand = found < k
        if not np.any(cand):
            break
        idx = np.nonzero(cand)[0]
        p0 = stations[sid[idx]]
        p1 = points[idx]
        dist = np.linalg.norm(p1 - p0, axis=1)
        ok = dist <= max_range
        if len(buildings):
            ok &= ~_segment_box_blocked(p0, p1, buildings)
        sel = idx[ok]
        pairs.append(np.column_stack([sel, sid[sel]]))
        found[sel] += 1
    if pairs:
        pairs = np.vstack(pairs)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]
    return np.empty((0, 2), dtype=np.int64)


def _sample_ground_surfaces(spec: SceneSpec, buildings, vegetation, traj: Trajectory):
    """Facade and street samples within the swath; returns pts, kind, bid."""
    sp = spec.ground_spacing_m
    pts, kinds, bids = [], [], []
    for i, b in enumerate(buildings):
        x0, y0, x1, y1, h = b
        walls = [
            (np.array([x0, y0]), np.array([x1, y0])),
            (np.array([x1, y0]), np.array([x1, y1])),
            (np.array([x1, y1]), np.array([x0, y1])),
            (np.array([x0, y1]), np.array([x0, y0])),
        ]
        zs = np.arange(sp / 2, h, sp)
        for a, bb in walls:
            L = np.linalg.norm(bb - a)
            us = np.arange(sp / 2, L, sp)
            if len(us) == 0 or len(zs) == 0:
                continue
            base = a + us[:, None] * (bb - a) / L
            keep = _polyline_distance(base, traj.waypoints) <= SWATH_M
            base = base[keep]
            if len(base) == 0:
                continue
            U, Z = np.broadcast_arrays(base[:, None, :], zs[None, :, None])
            wall_pts = np.concatenate([U, Z[..., :1]], axis=2).reshape(-1, 3)
            pts.append(wall_pts)
            kinds.append(np.ones(len(wall_pts), dtype=np.int64))
            bids.append(np.full(len(wall_pts), i, dtype=np.int64))
    # street grid, offset half a cell
    n = int(spec.extent_m / sp)
    axis = (np.arange(n) + 0.5) * sp
    X, Y = np.meshgrid(axis, axis)
    grid = np.column_stack([X.ravel(), Y.ravel()])
    near = _polyline_distance(grid, traj.waypoints) <= SWATH_M
    grid = grid[near]
    inside = np.zeros(len(grid), dtype=bool)
    for b in buildings:
        inside |= (grid[:, 0] >= b[0] - 0.1) & (grid[:, 0] <= b[2] + 0.1) & \
                  (grid[:, 1] >= b[1] - 0.1) & (grid[:, 1] <= b[3] + 0.1)
    for v in vegetation:
        inside |= (grid[:, 0] - v[0]) ** 2 + (grid[:, 1] - v[1]) ** 2 <= v[2] ** 2
    grid = grid[~inside]
    street = np.column_stack([grid, np.zeros(len(grid))])
    pts.append(street)
    kinds.append(np.zeros(len(street), dtype=np.int64))
    bids.append(np.zeros(len(street), dtype=np.int64))
    return (np.vstack(pts) if pts else np.empty((0, 3)),
            np.concatenate(kinds), np.concatenate(bids))


# -------------------------------------------------------------- truth mesh


def _truth_mesh(spec, buildings):
    verts = []
    faces = []
    kinds = []
    bids = []

    def add_quad(p0, p1, p2, p3, kind, bid):
        base = len(verts)
        verts.extend([p0, p1, p2, p3])
        faces.append([base, base + 1, base + 2])
        faces.append([base, base + 2, base + 3])
        kinds.extend([kind, kind])
        bids.extend([bid, bid])

    tile = 8.0
    e = spec.extent_m
    nt = max(1, int(math.ceil(e / tile)))
    xs = np.linspace(0, e, nt + 1)
    for i in range(nt):
        for j in range(nt):
            add_quad([xs[j], xs[i], 0], [xs[j + 1], xs[i], 0],
                     [xs[j + 1], xs[i + 1], 0], [xs[j], xs[i + 1], 0], 0, 0)
    for bi, b in enumerate(buildings):
        x0, y0, x1, y1, h = b
        corners = [np.array([x0, y0]), np.array([x1, y0]),
                   np.array([x1, y1]), np.array([x0, y1])]
        for k in range(4):
            a, c = corners[k], corners[(k + 1) % 4]
            L = np.linalg.norm(c - a)
            nseg = max(1, int(math.ceil(L / 4.0)))
            for s in range(nseg):
                pa = a + (c - a) * s / nseg
                pb = a + (c - a) * (s + 1) / nseg
                add_quad([*pa, 0], [*pb, 0], [*pb, h], [*pa, h], 1, bi)
        add_quad([x0, y0, h], [x1, y0, h], [x1, y1, h], [x0, y1, h], 2, bi)
    mesh = TriMesh(np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64))
    return mesh, np.asarray(kinds, dtype=np.int64), np.asarray(bids, dtype=np.int64)


# ---------------------------------------------------------------- generator


def gen_city(spec: SceneSpec) -> Scene:
    """Deterministic synthetic city, overhead + ground data, poses and truth."""
    master = np.random.default_rng(spec.seed)
    traj = _build_trajectory(spec)
    buildings = _place_buildings(spec, traj.waypoints, master)
    vegetation = _place_vegetation(spec, buildings, traj.waypoints, master)
    dsm, ortho = _build_truth_rasters(spec, buildings, vegetation)

    # overhead cloud: one point per DSM cell (per-stream noise, order-free)
    ov_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10_001]))
    H = dsm.band("height")
    n = dsm.height
    xs = dsm.origin_x + np.arange(n) * dsm.gsd
    ys = dsm.origin_y - np.arange(n) * dsm.gsd
    X, Y = np.meshgrid(xs, ys)
    z = H.astype(np.float64) + ov_rng.normal(0.0, spec.noise_overhead_m, H.shape)
    ov_pts = np.column_stack([X.ravel(), Y.ravel(), z.ravel()])
    ov_rgb = np.stack([ortho.band("red"), ortho.band("green"), ortho.band("blue")],
                      axis=-1).reshape(-1, 3)
    overview = PointCloud(ov_pts, colors=np.clip(ov_rgb, 0, 255).astype(np.uint8))

    gpts, gkind, gbid = _sample_ground_surfaces(spec, buildings, vegetation, traj)
    if len(gpts) == 0:
        raise GenerationError("ground sampling produced no points")
    pairs = _assign_views(gpts, traj.stations, buildings)
    seen = np.zeros(len(gpts), dtype=bool)
    seen[pairs[:, 0]] = True
    gpts, gkind, gbid = gpts[seen], gkind[seen], gbid[seen]
    remap = np.cumsum(seen) - 1
    pairs = np.column_stack([remap[pairs[:, 0]], pairs[:, 1]])

    g_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10_002]))
    noise = g_rng.normal(0.0, spec.noise_ground_m, gpts.shape)
    colors = np.clip(surface_color(gkind, gbid, gpts), 0, 255).astype(np.uint8)
    ground = PointCloud(gpts + noise, colors=colors)

    poses = _make_poses(traj)
    mesh, kinds, bids = _truth_mesh(spec, buildings)
    return Scene(spec, buildings, vegetation, dsm, ortho, overview, ground,
                 pairs, tuple(poses), traj, mesh, kinds, bids)


# ------------------------------------------------------------------- drift


def distort(ground: PointCloud, poses, traj: Trajectory, drift: DriftModel):
    """Warp the ground cloud and poses by T0 composed with cumulative drift.

    Per point/pose, at the arclength of its nearest station, the local map is
    a rotation of rate_theta * arclength about the trajectory start plus a
    lateral offset rate_lateral * arclength along the local left normal; T0
    applies on top.  Returns (cloud', poses', true_points) where true_points
    are the pre-distortion positions (the stored inverse correction).
    """
    p0 = np.array([*traj.waypoints[0], 0.0])
    tree = cKDTree(traj.stations[:, :2])

    def local_map(pts: np.ndarray, ell: np.ndarray, normal: np.ndarray) -> np.ndarray:
        phi = drift.rate_theta * ell
        lat = drift.rate_lateral * ell
        c, s = np.cos(phi), np.sin(phi)
        rel = pts - p0
        x = c * rel[:, 0] - s * rel[:, 1] + p0[0] + lat * normal[:, 0]
        y = s * rel[:, 0] + c * rel[:, 1] + p0[1] + lat * normal[:, 1]
        out = np.column_stack([x, y, pts[:, 2]])
        r = drift.t0.matrix2()
        xy = drift.t0.s * out[:, :2] @ r.T + np.asarray(drift.t0.t)
        zz = drift.t0.s * out[:, 2] + drift.t0.dz
        return np.column_stack([xy, zz])

    _, sid = tree.query(ground.points[:, :2])
    ell = traj.arclengths[sid]
    normal = np.column_stack([-traj.headings[sid, 1], traj.headings[sid, 0]])
    moved = local_map(ground.points, ell, normal)
    cloud2 = PointCloud(moved, colors=ground.colors, normals=None)

    new_poses = []
    for i, p in enumerate(poses):
        ellp = np.array([traj.arclengths[min(i, len(traj.arclengths) - 1)]])
        h = traj.headings[min(i, len(traj.headings) - 1)]
        nrm = np.array([[-h[1], h[0]]])
        c2 = local_map(np.asarray(p.center).reshape(1, 3), ellp, nrm)[0]
        phi = drift.t0.theta + drift.rate_theta * ellp[0]
        rz = np.eye(3)
        rz[0, 0] = rz[1, 1] = math.cos(phi)
        rz[0, 1] = -math.sin(phi)
        rz[1, 0] = math.sin(phi)
        rot = p.rotation() @ rz.T
        new_poses.append(PoseRecord(p.frame_id, p.focal, p.cx, p.cy,
                                    tuple(matrix_to_quat(rot)), tuple(c2)))
    return cloud2, new_poses, ground.points.copy()


# ---------------------------------------------------------------- rendering


def render_ground_views(scene: Scene) -> list[np.ndarray]:
    """Software z-buffer renderings of the true scene from every station."""
    mesh, kinds, bids = scene.truth_mesh, scene.mesh_kinds, scene.mesh_bids
    tris = mesh.vertices[mesh.faces]
    images = []
    for p in scene.poses:
        cam = p.to_camera(IMG_W, IMG_H)
        img = np.full((IMG_H, IMG_W, 3), 60, dtype=np.float64)  # sky-ish floor
        zbuf = np.full((IMG_H, IMG_W), np.inf)
        pc = (mesh.vertices - cam.center) @ cam.rotation.T
        depth = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uu = cam.focal * pc[:, 0] / depth + cam.cx
            vv = cam.focal * pc[:, 1] / depth + cam.cy
        for f in range(len(tris)):
            ids = mesh.faces[f]
            d = depth[ids]
            if np.any(d < 0.05):
                continue
            tri = np.column_stack([uu[ids], vv[ids]])
            x0 = max(0, int(math.floor(tri[:, 0].min())))
            x1 = min(IMG_W - 1, int(math.ceil(tri[:, 0].max())))
            y0 = max(0, int(math.floor(tri[:, 1].min())))
            y1 = min(IMG_H - 1, int(math.ceil(tri[:, 1].max())))
            if x1 < x0 or y1 < y0:
                continue
            xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5,
                                 np.arange(y0, y1 + 1) + 0.5)
            pix = np.column_stack([xs.ravel(), ys.ravel()])
            t = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
            det = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
            if abs(det) < 1e-12:
                continue
            inv = np.array([[t[1, 1], -t[0, 1]], [-t[1, 0], t[0, 0]]]) / det
            ab = (pix - tri[0]) @ inv.T
            bc = np.column_stack([1.0 - ab.sum(axis=1), ab])
            inside = (bc >= -1e-9).all(axis=1)
            if not inside.any():
                continue
            world = bc[inside] @ mesh.vertices[ids]
            zf = bc[inside] @ d
            rows = ys.ravel()[inside].astype(int)
            cols = xs.ravel()[inside].astype(int)
            closer = zf < zbuf[rows, cols]
            rows, cols = rows[closer], cols[closer]
            if len(rows) == 0:
                continue
            zbuf[rows, cols] = zf[closer]
            col = surface_color(np.full(len(rows), kinds[f]),
                                np.full(len(rows), bids[f]), world[closer])
            img[rows, cols] = col
        images.append(np.clip(img, 0, 255).astype(np.uint8))
    return images
