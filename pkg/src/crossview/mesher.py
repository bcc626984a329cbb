"""Surface reconstruction: Delaunay tetrahedra + ray visibility + s-t min cut.

Every measured point contributes rays from its observing cameras (perspective)
or a synthetic overhead origin (vertical parallel rays from the per-cell
highest points).  Walking each ray through the tetrahedralization deposits
free-space evidence on crossed facets, soft-weighted by distance to the
endpoint, and full-space evidence just behind the endpoint.  The labeling is
an exact min cut; the surface is the free/full interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import DegeneracyError, InputError, MeshingError
from .geom import ParallelCamera, PointCloud, TriMesh, _freeze
from .graphcut import scipy_maxflow


@dataclass(frozen=True)
class TetMesh:
    """Delaunay tetrahedra plus one synthetic infinite region beyond the hull.

    ``neighbors[c, k]`` is the cell across the facet opposite vertex k of cell
    c, or -1 for the infinite region.  The infinite region has node id
    ``n_cells`` in graph contexts.
    """

    points: np.ndarray
    cells: np.ndarray
    neighbors: np.ndarray
    _tri: Delaunay = field(repr=False, compare=False, default=None)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def infinite_id(self) -> int:
        return len(self.cells)

    def find_cells(self, pts: np.ndarray) -> np.ndarray:
        """Containing cell per query point; -1 outside the hull."""
        return self._tri.find_simplex(np.asarray(pts, dtype=np.float64))

    def facet_vertices(self, c: int, k: int) -> np.ndarray:
        idx = [i for i in range(4) if i != k]
        return self.cells[c, idx]

    def reciprocal_index(self) -> np.ndarray:
        """recip[c,k] = local facet index of cell c within neighbors[c,k]."""
        nb = self.neighbors
        c_ids = np.arange(self.n_cells)[:, None]
        recip = np.full_like(nb, -1)
        for j in range(4):
            hit = np.take(nb, np.clip(nb, 0, None) * 4 + j) == c_ids
            hit &= nb >= 0
            recip[hit] = j
        return recip


def delaunay3(points: np.ndarray) -> TetMesh:
    """3D Delaunay tetrahedralization (Qhull backend)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 5:
        raise DegeneracyError("need at least 5 points for a tetrahedralization")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(pts).max())) < 3:
        raise DegeneracyError("points are coplanar or collinear")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegeneracyError(f"tetrahedralization failed: {exc}") from exc
    return TetMesh(pts, tri.simplices.astype(np.int64),
                   tri.neighbors.astype(np.int64), tri)


@dataclass(frozen=True)
class RayBundle:
    """Rays as parallel arrays: one (origin, target, alpha) triple per row."""

    origins: np.ndarray
    targets: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        a = np.broadcast_to(np.asarray(self.alphas, dtype=np.float64), (len(o),)).copy()
        if len(o) != len(t):
            raise InputError("origins and targets must have the same length")
        object.__setattr__(self, "origins", _freeze(o))
        object.__setattr__(self, "targets", _freeze(t))
        object.__setattr__(self, "alphas", _freeze(a))

    def __len__(self):
        return len(self.origins)


def concat_rays(bundles: list[RayBundle]) -> RayBundle:
    return RayBundle(
        np.vstack([b.origins for b in bundles]),
        np.vstack([b.targets for b in bundles]),
        np.concatenate([b.alphas for b in bundles]),
    )


def ortho_rays(cloud: PointCloud, georef: ParallelCamera, margin_m: float,
               alpha: float = 0.5) -> RayBundle:
    """One vertical ray per occupied orthophoto cell, onto its highest point."""
    if len(cloud) == 0:
        raise InputError("cloud is empty")
    pts = cloud.points
    col = np.rint((pts[:, 0] - georef.origin_x) / georef.gsd).astype(np.int64)
    row = np.rint((georef.origin_y - pts[:, 1]) / georef.gsd).astype(np.int64)
    ok = (row >= 0) & (row < georef.height) & (col >= 0) & (col < georef.width)
    idx = np.nonzero(ok)[0]
    key = row[idx] * georef.width + col[idx]
    # highest point per cell, ties toward the lower point index
    order = np.lexsort((idx, -pts[idx, 2], key))
    ks = key[order]
    first = np.r_[True, np.diff(ks) != 0]
    chosen = idx[order][first]
    targets = pts[chosen]
    z_top = pts[:, 2].max() + margin_m
    origins = targets.copy()
    origins[:, 2] = z_top
    return RayBundle(origins, targets, np.full(len(chosen), alpha))


def perspective_rays(cloud: PointCloud, view_pairs: np.ndarray,
                     centers_by_view: dict[int, np.ndarray],
                     alpha: float = 1.0) -> tuple[RayBundle, int]:
    """One ray per (point index, view id) pair; returns (bundle, skipped count).

    Rays whose camera center coincides with the target point are skipped.
    """
    pairs = np.asarray(view_pairs, dtype=np.int64).reshape(-1, 2)
    for vid in np.unique(pairs[:, 1]):
        if int(vid) not in centers_by_view:
            raise InputError(f"view id {int(vid)} has no pose")
    targets = cloud.points[pairs[:, 0]]
    origins = np.array([centers_by_view[int(v)] for v in pairs[:, 1]], dtype=float)
    origins = origins.reshape(-1, 3)
    lens = np.linalg.norm(targets - origins, axis=1)
    keep = lens > 1e-9
    skipped = int((~keep).sum())
    return RayBundle(origins[keep], targets[keep], np.full(int(keep.sum()), alpha)), skipped


@dataclass(frozen=True)
class TetGraph:
    """Min-cut instance over cells 0..n-1 (last id = infinite region)."""

    n_nodes: int
    src_cap: np.ndarray
    snk_cap: np.ndarray
    arcs: np.ndarray      # (m, 2) directed cell pairs
    arc_cap: np.ndarray   # (m,)
    walked: int = 0
    dropped: int = 0

    def __post_init__(self):
        for name in ("src_cap", "snk_cap", "arc_cap"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise InputError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, _freeze(a))
        object.__setattr__(self, "arcs",
                           _freeze(np.asarray(self.arcs, dtype=np.int64).reshape(-1, 2)))


def _facet_geometry(pts, cells, sel):
    """Outward facet normals/offsets for the selected cells: (A,4,3), (A,4)."""
    P = pts[cells[sel]]  # (A,4,3)
    ns = np.empty_like(P)
    ds = np.empty(P.shape[:2])
    for k in range(4):
        idx = [i for i in range(4) if i != k]
        a, b, c = P[:, idx[0]], P[:, idx[1]], P[:, idx[2]]
        n = np.cross(b - a, c - a)
        d = np.einsum("ij,ij->i", n, a)
        flip = np.einsum("ij,ij->i", n, P[:, k]) > d
        n[flip] *= -1.0
        d[flip] *= -1.0
        ns[:, k] = n
        ds[:, k] = d
    return ns, ds


def soft_weight(d: np.ndarray, sigma: float) -> np.ndarray:
    return 1.0 - np.exp(-np.square(d) / (2.0 * sigma * sigma))


def accumulate(tet: TetMesh, rays: RayBundle, sigma,
               max_steps: int = 100_000) -> TetGraph:
    """Walk every ray; deposit facet, source and sink capacities.

    The walk runs backward from just before the target toward the origin so
    crossing distances to the endpoint fall out directly.  The sink cell sits
    3 sigma past the target (backed off to the last finite cell when that
    leaves the hull).  ``sigma`` may be a scalar or one value per ray (soft
    visibility scaled to the local sampling density).  Rays that dead-end
    numerically are dropped and tallied.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(rays),))
    if np.any(sigma <= 0):
        raise InputError("sigma must be positive")
    pts, cells, neighbors = tet.points, tet.cells, tet.neighbors
    C = tet.n_cells
    recip = tet.reciprocal_index()
    n_rays = len(rays)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    delta = max(1e-12, 1e-6 * diag)

    fwd = rays.targets - rays.origins
    L = np.linalg.norm(fwd, axis=1)
    ok = L > 1e-9
    u = np.zeros_like(fwd)
    u[ok] = -fwd[ok] / L[ok, None]  # backward walk direction (target -> origin)

    src_cap = np.zeros(C + 1)
    snk_cap = np.zeros(C + 1)
    cap_out = np.zeros((C, 4))       # directed: cell -> neighbors[cell, k]
    cap_from_inf = np.zeros((C, 4))  # directed: infinite -> cell through facet k

    # sink cells: 3 sigma past the target, backed off toward the target when
    # that exits the hull (thin data sheets leave little volume behind); the
    # final probe sits just behind the target so full-space evidence is only
    # lost when there is truly nothing behind
    sink_cell = np.full(n_rays, -2, dtype=np.int64)
    back = 3.0 * sigma
    for frac in (1.0, 0.5, 0.25, 0.1, 0.03):
        pending = sink_cell == -2 if frac == 1.0 else sink_cell == -1
        if not np.any(pending):
            break
        step = np.maximum(back[pending] * frac, delta)
        q = rays.targets[pending] - step[:, None] * u[pending]
        sink_cell[np.nonzero(pending)[0]] = tet.find_cells(q)
    # remaining -1 entries legitimately sit outside the hull -> infinite node

    start = rays.targets + delta * u
    cur = tet.find_cells(start)
    s_cur = np.full(n_rays, delta)
    state = np.zeros(n_rays, dtype=np.int8)  # 0 active, 1 done, 2 dropped
    state[~ok] = 2
    outside = (cur < 0) & ok
    src_cap[C] += rays.alphas[outside].sum()  # origin-side free space outside hull
    state[outside] = 1
    active = np.nonzero(state == 0)[0]

    alphas = rays.alphas
    targets = rays.targets
    steps = 0
    while len(active) and steps < max_steps:
        steps += 1
        ns, ds = _facet_geometry(pts, cells, cur[active])
        ua = u[active]
        denom = np.einsum("akj,aj->ak", ns, ua)
        num = ds - np.einsum("akj,aj->ak", ns, targets[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            s_hit = num / denom
        bad = (denom <= 0) | ~np.isfinite(s_hit) | \
            (s_hit < s_cur[active][:, None] - 1e-9 * diag)
        s_hit[bad] = np.inf
        k_exit = np.argmin(s_hit, axis=1)
        s_exit = s_hit[np.arange(len(active)), k_exit]

        dead = ~np.isfinite(s_exit)
        if np.any(dead):
            state[active[dead]] = 2

        reached = (~dead) & (s_exit >= L[active])
        if np.any(reached):
            ids = active[reached]
            np.add.at(src_cap, cur[ids], alphas[ids])
            state[ids] = 1

        moving = (~dead) & (~reached)
        if np.any(moving):
            ids = active[moving]
            kk = k_exit[moving]
            ss = s_exit[moving]
            w = alphas[ids] * soft_weight(ss, sigma[ids])
            nb = neighbors[cur[ids], kk]
            to_inf = nb < 0
            if np.any(to_inf):
                np.add.at(cap_from_inf, (cur[ids[to_inf]], kk[to_inf]), w[to_inf])
                src_cap[C] += alphas[ids[to_inf]].sum()
                state[ids[to_inf]] = 1
            inside = ~to_inf
            if np.any(inside):
                rk = recip[cur[ids[inside]], kk[inside]]
                np.add.at(cap_out, (nb[inside], rk), w[inside])
                cur[ids[inside]] = nb[inside]
                s_cur[ids[inside]] = ss[inside]
        active = np.nonzero(state == 0)[0]

    if len(active):
        state[active] = 2
    walked_mask = state == 1
    dropped = int((state == 2).sum())

    sink_node = np.where(sink_cell >= 0, sink_cell, C)
    np.add.at(snk_cap, sink_node[walked_mask], alphas[walked_mask])

    arcs, caps = [], []
    cs, ks = np.nonzero(cap_out > 0)
    nb = neighbors[cs, ks]
    arcs.append(np.column_stack([cs, np.where(nb >= 0, nb, C)]))
    caps.append(cap_out[cs, ks])
    cs, ks = np.nonzero(cap_from_inf > 0)
    arcs.append(np.column_stack([np.full(len(cs), C), cs]))
    caps.append(cap_from_inf[cs, ks])
    arcs = np.vstack(arcs) if arcs else np.empty((0, 2), dtype=np.int64)
    caps = np.concatenate(caps) if caps else np.empty(0)
    return TetGraph(C + 1, src_cap, snk_cap, arcs, caps,
                    walked=int(walked_mask.sum()), dropped=dropped)


def facet_prior(tet: TetMesh, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant capacity on every interior facet (both directions).

    A small prior makes the min cut prefer compact surfaces, suppressing
    single-cell pinches in noisy regions; hull facets keep only their ray
    evidence so the cut can still reach the convex hull.
    """
    if beta <= 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    cs, ks = np.nonzero(tet.neighbors >= 0)
    nb = tet.neighbors[cs, ks]
    arcs = np.column_stack([cs, nb])
    return arcs, np.full(len(arcs), float(beta))


def mincut(graph: TetGraph, extra_arcs=None, extra_caps=None) -> tuple[np.ndarray, float]:
    """Exact min cut; returns (free mask over nodes, cut value)."""
    if graph.src_cap.sum() <= 0 or graph.snk_cap.sum() <= 0:
        raise MeshingError("disconnected evidence: missing source or sink capacity")
    n = graph.n_nodes
    s, t = n, n + 1
    node_arcs = [graph.arcs]
    node_caps = [graph.arc_cap]
    if extra_arcs is not None and len(extra_arcs):
        node_arcs.append(np.asarray(extra_arcs, dtype=np.int64).reshape(-1, 2))
        node_caps.append(np.asarray(extra_caps, dtype=np.float64))
    src_nodes = np.nonzero(graph.src_cap > 0)[0]
    node_arcs.append(np.column_stack([np.full(len(src_nodes), s), src_nodes]))
    node_caps.append(graph.src_cap[src_nodes])
    snk_nodes = np.nonzero(graph.snk_cap > 0)[0]
    node_arcs.append(np.column_stack([snk_nodes, np.full(len(snk_nodes), t)]))
    node_caps.append(graph.snk_cap[snk_nodes])
    arcs = np.vstack(node_arcs)
    caps = np.concatenate(node_caps)
    flow, reach = scipy_maxflow(n + 2, s, t, arcs, caps)
    return reach[:n], flow


def extract_surface(tet: TetMesh, free: np.ndarray) -> TriMesh:
    """Triangles of facets between free and full cells, normals into free space."""
    free = np.asarray(free, dtype=bool)
    if free.all() or not free.any():
        return TriMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    cells, neighbors, pts = tet.cells, tet.neighbors, tet.points
    C = tet.n_cells
    nb_id = np.where(neighbors >= 0, neighbors, C)
    full_cells = ~free[:C]
    emit = full_cells[:, None] & free[nb_id]  # facets of full cells facing free
    cs, ks = np.nonzero(emit)
    if len(cs) == 0:
        return TriMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    other = np.array([[i for i in range(4) if i != k] for k in range(4)])
    tris = cells[cs[:, None], other[ks]]  # (F, 3)
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    opp = pts[cells[cs, ks]]  # opposite vertex lies in the full cell
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, opp - a) > 0  # normal points into full cell
    tris[inward] = tris[inward][:, [0, 2, 1]]
    used = np.unique(tris)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(pts[used], remap[tris])


@dataclass(frozen=True)
class MeshStats:
    n_vertices: int
    n_edges: int
    n_faces: int
    euler: int
    boundary_edges: int
    nonmanifold_edges: int
    components: int
    bbox_min: tuple
    bbox_max: tuple

    @property
    def manifold_fraction(self) -> float:
        good = self.n_edges - self.boundary_edges - self.nonmanifold_edges
        return good / self.n_edges if self.n_edges else 1.0


def mesh_stats(mesh: TriMesh) -> MeshStats:
    f = mesh.faces
    v_used = len(mesh.vertices)
    if len(f) == 0:
        return MeshStats(v_used, 0, 0, v_used, 0, 0, 0,
                         tuple(mesh.vertices.min(axis=0)) if v_used else (),
                         tuple(mesh.vertices.max(axis=0)) if v_used else ())
    edges = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts >= 3).sum())
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    adj = coo_matrix(
        (np.ones(len(uniq)), (uniq[:, 0], uniq[:, 1])), shape=(v_used, v_used)
    )
    ncomp, labels = connected_components(adj + adj.T, directed=False)
    used = np.unique(f)
    ncomp_mesh = len(np.unique(labels[used]))
    euler = v_used - len(uniq) + len(f)
    return MeshStats(
        v_used, len(uniq), len(f), euler, boundary, nonmanifold, ncomp_mesh,
        tuple(mesh.vertices.min(axis=0)), tuple(mesh.vertices.max(axis=0)),
    )


def median_nn_spacing(pts: np.ndarray, sample: int = 20000) -> float:
    """Median nearest-neighbor distance, on a deterministic subsample."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 2:
        raise InputError("need at least 2 points")
    if len(pts) > sample:
        idx = np.floor(np.arange(sample) * len(pts) / sample).astype(np.int64)
        q = pts[idx]
    else:
        q = pts
    tree = cKDTree(pts)
    d, _ = tree.query(q, k=2)
    return float(np.median(d[:, 1]))


def cap_points(cloud: PointCloud, cap: int, seed: int = 0) -> PointCloud:
    """Uniform random subsample with a fixed seed when over the cap."""
    if len(cloud) <= cap:
        return cloud
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(cloud), size=cap, replace=False))
    return PointCloud(
        cloud.points[keep],
        colors=None if cloud.colors is None else cloud.colors[keep],
        normals=None if cloud.normals is None else cloud.normals[keep],
    )
