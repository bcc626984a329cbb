"""View-selection texturing with the orthophoto as one of the views.

Each face is assigned a source view (ground perspective frames or the nadir
orthophoto) by a Potts MRF whose data term prefers large, sharp projections;
the ortho data term is boosted to compensate the resolution gap.  Seam colors
are leveled by a global per-vertex least-squares adjustment, then charts are
baked into a single atlas (ortho charts up-sampled to the ground texel
density) and written as OBJ + MTL + PNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.sparse import coo_matrix, identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import factorized

from .errors import InputError
from .geom import HeightGrid, ParallelCamera, PerspectiveCamera, TriMesh, project_batch
from .graphcut import alpha_expansion

UNTEXTURED = -1
ORTHO_VIEW = 0
_BIG = 1e12


@dataclass(frozen=True)
class ViewSet:
    """Ground (image, camera) pairs plus the unique ortho view (id 0)."""

    ground_images: tuple
    ground_cams: tuple
    ortho_grid: HeightGrid
    ortho_cam: ParallelCamera

    def __post_init__(self):
        if len(self.ground_images) != len(self.ground_cams):
            raise InputError("one camera per ground image required")
        for name in ("red", "green", "blue"):
            self.ortho_grid.band(name)

    @property
    def n_views(self) -> int:
        return 1 + len(self.ground_images)

    def view_ids(self):
        return range(self.n_views)


def _ortho_uv(cam: ParallelCamera, xy: np.ndarray) -> np.ndarray:
    """World xy to fractional (col, row) in the ortho grid."""
    xy = np.atleast_2d(xy)
    col = (xy[:, 0] - cam.origin_x) / cam.gsd
    row = (cam.origin_y - xy[:, 1]) / cam.gsd
    return np.column_stack([col, row])


def _luminance(img: np.ndarray) -> np.ndarray:
    f = img.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def _gradient_mag(lum: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(lum)
    return np.hypot(gx, gy)


def _ortho_rgb(grid: HeightGrid) -> np.ndarray:
    return np.stack([grid.band("red"), grid.band("green"), grid.band("blue")], axis=-1)


# ------------------------------------------------------------------ visibility


def _segment_hits(origins, ends, tri_pts, t_hi=1.0 - 1e-6, t_lo=1e-6):
    """Möller-Trumbore: (R,) mask of segments hitting any of the triangles."""
    if len(tri_pts) == 0 or len(origins) == 0:
        return np.zeros(len(origins), dtype=bool)
    v0 = tri_pts[:, 0]
    e1 = tri_pts[:, 1] - v0
    e2 = tri_pts[:, 2] - v0
    d = ends - origins  # (R,3)
    hit_any = np.zeros(len(origins), dtype=bool)
    chunk = max(1, int(4e6 // max(len(tri_pts), 1)))
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk][:, None, :]
        dd = d[s:s + chunk][:, None, :]
        p = np.cross(dd, e2[None, :, :])
        det = np.einsum("rtj,tj->rt", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
        tvec = o - v0[None, :, :]
        uu = np.einsum("rtj,rtj->rt", tvec, p) * inv
        q = np.cross(tvec, e1[None, :, :])
        vv = np.einsum("rtj,rtj->rt", q, dd) * inv
        tt = np.einsum("rtj,tj->rt", q, e2) * inv
        ok = (np.abs(det) > 1e-300) & (uu >= 0) & (vv >= 0) & (uu + vv <= 1)
        ok &= (tt > t_lo) & (tt < t_hi)
        hit_any[s:s + chunk] = ok.any(axis=1)
    return hit_any


def _bin_rect_pairs(bx0, bx1, by0, by1, nbx):
    """COO (bin, item) pairs covering integer bin rectangles."""
    wx = bx1 - bx0 + 1
    wy = by1 - by0 + 1
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    items = np.repeat(np.arange(len(bx0)), counts)
    off = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    rwx = np.repeat(wx, counts)
    lx = off % rwx
    ly = off // rwx
    bins = (np.repeat(by0, counts) + ly) * nbx + (np.repeat(bx0, counts) + lx)
    return bins, items


def _occlusion_mask(ray_pts2d, origins, centroids, tri2d_min, tri2d_max,
                    tri_front, tri_pts, extent2d, self_face):
    """Exact centroid-ray occlusion using 2D binning of front triangles.

    ray_pts2d: projected centroid per ray (same plane as tri2d bounds).
    Returns a boolean occluded mask per ray.
    """
    n_rays = len(ray_pts2d)
    occluded = np.zeros(n_rays, dtype=bool)
    if n_rays == 0:
        return occluded
    (x0, y0), (x1, y1) = extent2d
    nb = 32
    sx = (x1 - x0) / nb + 1e-12
    sy = (y1 - y0) / nb + 1e-12

    front_ids = np.nonzero(tri_front)[0]
    if len(front_ids):
        bx0 = np.clip(((tri2d_min[front_ids, 0] - x0) / sx).astype(np.int64), 0, nb - 1)
        bx1 = np.clip(((tri2d_max[front_ids, 0] - x0) / sx).astype(np.int64), 0, nb - 1)
        by0 = np.clip(((tri2d_min[front_ids, 1] - y0) / sy).astype(np.int64), 0, nb - 1)
        by1 = np.clip(((tri2d_max[front_ids, 1] - y0) / sy).astype(np.int64), 0, nb - 1)
        bins, local = _bin_rect_pairs(bx0, bx1, by0, by1, nb)
        tri_of_pair = front_ids[local]
        order = np.argsort(bins, kind="stable")
        bins, tri_of_pair = bins[order], tri_of_pair[order]

        rbx = np.clip(((ray_pts2d[:, 0] - x0) / sx).astype(np.int64), 0, nb - 1)
        rby = np.clip(((ray_pts2d[:, 1] - y0) / sy).astype(np.int64), 0, nb - 1)
        rbins = rby * nb + rbx
        for b in np.unique(rbins):
            rsel = np.nonzero(rbins == b)[0]
            lo = np.searchsorted(bins, b, "left")
            hi = np.searchsorted(bins, b, "right")
            cand = tri_of_pair[lo:hi]
            if len(cand) == 0:
                continue
            for r in rsel:
                mine = cand[cand != self_face[r]]
                if len(mine) == 0:
                    continue
                occluded[r] = _segment_hits(
                    origins[r:r + 1], centroids[r:r + 1], tri_pts[mine]
                )[0]
    return occluded


def face_visibility(mesh: TriMesh, views: ViewSet) -> list[np.ndarray]:
    """Candidate view ids per face: front-facing, in-frame, centroid unoccluded."""
    if len(mesh.faces) == 0:
        raise InputError("mesh is empty")
    normals = mesh.face_normals()
    centroids = mesh.face_centroids()
    tri_pts = mesh.vertices[mesh.faces]
    n_faces = len(mesh.faces)
    candidates = [[] for _ in range(n_faces)]

    # ortho view: vertical rays from above
    cam = views.ortho_cam
    facing = normals[:, 2] > 0
    uv = _ortho_uv(cam, mesh.vertices[:, :2])
    inb = (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) & \
          (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
    in_all = inb[mesh.faces].all(axis=1)
    test = np.nonzero(facing & in_all)[0]
    if len(test):
        ztop = mesh.vertices[:, 2].max() + 10.0
        origins = centroids[test].copy()
        origins[:, 2] = ztop
        tri_xy_min = tri_pts[..., :2].min(axis=1)
        tri_xy_max = tri_pts[..., :2].max(axis=1)
        ext = (mesh.vertices[:, :2].min(axis=0), mesh.vertices[:, :2].max(axis=0))
        occ = _occlusion_mask(centroids[test, :2], origins, centroids[test],
                              tri_xy_min, tri_xy_max, np.ones(n_faces, dtype=bool),
                              tri_pts, ext, test)
        for f in test[~occ]:
            candidates[f].append(ORTHO_VIEW)

    for vi, (img, pcam) in enumerate(zip(views.ground_images, views.ground_cams),
                                     start=1):
        vdir = centroids - pcam.center
        facing = np.einsum("ij,ij->i", normals, vdir) < 0
        uvv, depth = project_batch(pcam, mesh.vertices)
        inb = (depth > 1e-9) & (uvv[:, 0] >= 0) & (uvv[:, 0] <= pcam.width - 1) & \
              (uvv[:, 1] >= 0) & (uvv[:, 1] <= pcam.height - 1)
        in_all = inb[mesh.faces].all(axis=1)
        test = np.nonzero(facing & in_all)[0]
        if len(test) == 0:
            continue
        vdepth = ((mesh.vertices - pcam.center) @ pcam.rotation.T)[:, 2]
        tri_depth = vdepth[mesh.faces]
        tri_front = (tri_depth > 1e-9).all(axis=1)
        straddle = ~tri_front & (tri_depth > 1e-9).any(axis=1)
        uv_f = uvv[mesh.faces]  # (F,3,2); garbage where depth <= 0, masked by tri_front
        tri_uv_min = uv_f.min(axis=1)
        tri_uv_max = uv_f.max(axis=1)
        cen_uv, _ = project_batch(pcam, centroids[test])
        ext = (np.array([0.0, 0.0]), np.array([float(pcam.width), float(pcam.height)]))
        origins = np.broadcast_to(pcam.center, (len(test), 3))
        occ = _occlusion_mask(cen_uv, origins, centroids[test],
                              tri_uv_min, tri_uv_max, tri_front, tri_pts, ext, test)
        st_ids = np.nonzero(straddle)[0]
        if len(st_ids):
            more = _segment_hits(np.asarray(origins), centroids[test], tri_pts[st_ids])
            occ |= more
        for f in test[~occ]:
            candidates[f].append(vi)
    return [np.array(sorted(c), dtype=np.int64) for c in candidates]


# --------------------------------------------------------------- view labeling


def _tri_area2d(p: np.ndarray) -> float:
    return 0.5 * abs(
        (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
        - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
    )


def _mean_under_triangle(img: np.ndarray, tri: np.ndarray) -> float:
    """Mean image value over pixels covered by a 2D triangle (centroid fallback)."""
    h, w = img.shape
    x0 = max(0, int(math.floor(tri[:, 0].min())))
    x1 = min(w - 1, int(math.ceil(tri[:, 0].max())))
    y0 = max(0, int(math.floor(tri[:, 1].min())))
    y1 = min(h - 1, int(math.ceil(tri[:, 1].max())))
    if x1 >= x0 and y1 >= y0:
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        b = _barycentric(tri, np.column_stack([xs.ravel(), ys.ravel()]))
        inside = (b >= -1e-9).all(axis=1)
        if inside.any():
            vals = img[y0:y1 + 1, x0:x1 + 1].ravel()[inside]
            return float(vals.mean())
    cx = min(max(int(tri[:, 0].mean()), 0), w - 1)
    cy = min(max(int(tri[:, 1].mean()), 0), h - 1)
    return float(img[cy, cx])


def _barycentric(tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    t = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    det = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
    if abs(det) < 1e-300:
        out = np.full((len(pts), 3), -1.0)
        return out
    inv = np.array([[t[1, 1], -t[0, 1]], [-t[1, 0], t[0, 0]]]) / det
    ab = (pts - tri[0]) @ inv.T
    return np.column_stack([1.0 - ab.sum(axis=1), ab])


def view_unaries(mesh: TriMesh, candidates, views: ViewSet, ortho_bias: float):
    """Unary cost table (F, n_views): -(projected px area * mean gradient).

    The ortho cost is divided by ``ortho_bias`` (default < 1), strengthening
    it to compensate the resolution gap and make ortho the default source.
    """
    n_faces = len(mesh.faces)
    unary = np.full((n_faces, views.n_views), _BIG)
    grads = {}
    uvs = {}
    lum = _luminance(_ortho_rgb(views.ortho_grid))
    grads[ORTHO_VIEW] = _gradient_mag(lum)
    uvs[ORTHO_VIEW] = _ortho_uv(views.ortho_cam, mesh.vertices[:, :2])
    for vi, (img, cam) in enumerate(zip(views.ground_images, views.ground_cams), start=1):
        grads[vi] = _gradient_mag(_luminance(img))
        uvs[vi], _ = project_batch(cam, mesh.vertices)
    for f in range(n_faces):
        for vi in candidates[f]:
            tri = uvs[vi][mesh.faces[f]]
            area = _tri_area2d(tri)
            g = _mean_under_triangle(grads[vi], tri)
            q = area * g
            if vi == ORTHO_VIEW:
                q = q / ortho_bias
            unary[f, vi] = -q
    return unary


@dataclass(frozen=True)
class FaceLabeling:
    """Per-face selected view id; UNTEXTURED where no view qualifies."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels",
                           np.asarray(self.labels, dtype=np.int64).reshape(-1))


def face_adjacency(faces: np.ndarray) -> np.ndarray:
    """(E,2) pairs of faces sharing an edge."""
    f = np.asarray(faces)
    edges = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    fid = np.tile(np.arange(len(f)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e, fid = edges[order], fid[order]
    same = (np.diff(e[:, 0]) == 0) & (np.diff(e[:, 1]) == 0)
    i = np.nonzero(same)[0]
    pairs = np.column_stack([fid[i], fid[i + 1]])
    return np.sort(pairs, axis=1)


def view_labeling(mesh: TriMesh, candidates, views: ViewSet,
                  lambda_smooth: float = 1.0, ortho_bias: float = 0.25) -> FaceLabeling:
    """Potts MRF over faces; solved with the shared alpha-expansion engine."""
    n_faces = len(mesh.faces)
    unary = view_unaries(mesh, candidates, views, ortho_bias)
    has_cand = np.array([len(c) > 0 for c in candidates])
    active = np.nonzero(has_cand)[0]
    labels_out = np.full(n_faces, UNTEXTURED, dtype=np.int64)
    if len(active) == 0:
        return FaceLabeling(labels_out)
    index = {int(f): i for i, f in enumerate(active)}
    sub_unary = unary[active]
    pairs = face_adjacency(mesh.faces)
    keep = has_cand[pairs[:, 0]] & has_cand[pairs[:, 1]]
    pairs = pairs[keep]
    edges = np.array([[index[int(a)], index[int(b)]] for a, b in pairs],
                     dtype=np.int64).reshape(-1, 2)
    L = views.n_views
    pair_m = (1.0 - np.eye(L))
    init = np.empty(len(active), dtype=np.int64)
    for i, f in enumerate(active):
        init[i] = ORTHO_VIEW if ORTHO_VIEW in candidates[f] else int(
            candidates[f][np.argmin(sub_unary[i, candidates[f]])]
        )
    labels, _, _ = alpha_expansion(
        sub_unary, edges, np.full(len(edges), lambda_smooth), pair_m, range(L), init
    )
    labels_out[active] = labels
    return FaceLabeling(labels_out)


def labeling_energy(mesh, candidates, labeling, views, lambda_smooth, ortho_bias):
    """Exact energy of a labeling, for oracle comparisons."""
    unary = view_unaries(mesh, candidates, views, ortho_bias)
    lab = labeling.labels if isinstance(labeling, FaceLabeling) else np.asarray(labeling)
    e = 0.0
    for f in range(len(mesh.faces)):
        if lab[f] != UNTEXTURED:
            e += unary[f, lab[f]]
    for a, b in face_adjacency(mesh.faces):
        if lab[a] != UNTEXTURED and lab[b] != UNTEXTURED and lab[a] != lab[b]:
            e += lambda_smooth
    return e


# -------------------------------------------------------------- color leveling


def _sample_view_color(views: ViewSet, vid: int, verts: np.ndarray) -> np.ndarray:
    """Bilinear RGB sample of mesh vertices in a view, (N,3) floats."""
    if vid == ORTHO_VIEW:
        rgb = _ortho_rgb(views.ortho_grid)
        uv = _ortho_uv(views.ortho_cam, verts[:, :2])
    else:
        rgb = views.ground_images[vid - 1].astype(np.float64)
        uv, _ = project_batch(views.ground_cams[vid - 1], verts)
    h, w = rgb.shape[:2]
    x = np.clip(uv[:, 0], 0, w - 1.000001)
    y = np.clip(uv[:, 1], 0, h - 1.000001)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    c = (rgb[y0, x0] * (1 - fx) * (1 - fy) + rgb[y0, x0 + 1] * fx * (1 - fy)
         + rgb[y0 + 1, x0] * (1 - fx) * fy + rgb[y0 + 1, x0 + 1] * fx * fy)
    return c


def color_adjust(mesh: TriMesh, labeling: FaceLabeling, views: ViewSet,
                 mu: float = 0.1) -> dict[int, np.ndarray]:
    """Per-(vertex, view) additive corrections leveling seam color differences.

    Least squares: seam terms (c_a + g_a - c_b - g_b)^2 across every label
    pair at a seam vertex, mu-weighted smoothness along same-label edges, and
    a zero-sum gauge per connected system.  Returns {view id: (V,3) array}.
    """
    lab = labeling.labels
    n_v = len(mesh.vertices)
    incid: dict[tuple[int, int], int] = {}
    for f, l in zip(mesh.faces, lab):
        if l == UNTEXTURED:
            continue
        for v in f:
            incid.setdefault((int(v), int(l)), len(incid))
    out = {int(l): np.zeros((n_v, 3)) for l in np.unique(lab) if l != UNTEXTURED}
    if not incid:
        return out
    n_u = len(incid)

    vert_labels: dict[int, set[int]] = {}
    for (v, l) in incid:
        vert_labels.setdefault(v, set()).add(l)

    color_cache: dict[int, np.ndarray] = {}

    def color(v, l):
        if l not in color_cache:
            color_cache[l] = _sample_view_color(views, l, mesh.vertices)
        return color_cache[l][v]

    rows, cols, vals = [], [], []
    rhs = []
    r = 0
    for v, ls in sorted(vert_labels.items()):
        ls = sorted(ls)
        if len(ls) < 2:
            continue
        for i in range(len(ls)):
            for j in range(i + 1, len(ls)):
                a, b = incid[(v, ls[i])], incid[(v, ls[j])]
                rows += [r, r]
                cols += [a, b]
                vals += [1.0, -1.0]
                rhs.append(color(v, ls[j]) - color(v, ls[i]))
                r += 1
    smu = math.sqrt(mu)
    edge_seen = set()
    for f, l in zip(mesh.faces, lab):
        if l == UNTEXTURED:
            continue
        for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(int(e[0]), int(e[1])), max(int(e[0]), int(e[1])), int(l))
            if key in edge_seen:
                continue
            edge_seen.add(key)
            a, b = incid[(key[0], key[2])], incid[(key[1], key[2])]
            rows += [r, r]
            cols += [a, b]
            vals += [smu, -smu]
            rhs.append(np.zeros(3))
            r += 1

    # connected systems over unknowns, via the equation structure; every row
    # has exactly two entries so pair connectivity is the row itself
    pair_rows = coo_matrix((np.ones(len(vals)), (rows, cols)), shape=(r, n_u)).tocsr()
    touched = np.asarray((pair_rows != 0).sum(axis=0)).ravel() > 0
    ends = np.asarray(cols, dtype=np.int64).reshape(-1, 2)
    adj = coo_matrix((np.ones(len(ends)), (ends[:, 0], ends[:, 1])),
                     shape=(n_u, n_u))
    ncomp, comp = connected_components(adj + adj.T, directed=False)

    A = coo_matrix((vals, (rows, cols)), shape=(r, n_u)).tocsr()
    b = np.array(rhs).reshape(r, 3)
    # the objective is shift-invariant per component: solve with a tiny ridge,
    # then de-mean each component (the zero-sum gauge, enforced exactly)
    ata = (A.T @ A + 1e-9 * identity(n_u)).tocsc()
    atb = A.T @ b
    solve = factorized(ata)
    g = np.column_stack([solve(atb[:, ch]) for ch in range(3)])
    g[~touched] = 0.0
    for c in range(ncomp):
        members = np.nonzero((comp == c) & touched)[0]
        if len(members):
            g[members] -= g[members].mean(axis=0)
    for (v, l), idx in incid.items():
        out[l][v] = g[idx]
    return out


# ----------------------------------------------------------------------- bake


@dataclass(frozen=True)
class TextureBundle:
    mesh: TriMesh
    labels: np.ndarray
    uvs: np.ndarray         # (F, 3, 2) in [0, 1]^2
    atlas: np.ndarray       # (S, S, 3) uint8


def _charts(mesh: TriMesh, labels: np.ndarray) -> list[np.ndarray]:
    """Edge-connected same-label face groups (non-UNTEXTURED)."""
    pairs = face_adjacency(mesh.faces)
    same = labels[pairs[:, 0]] == labels[pairs[:, 1]]
    keep = same & (labels[pairs[:, 0]] != UNTEXTURED)
    pairs = pairs[keep]
    n = len(mesh.faces)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    ncomp, comp = connected_components(adj + adj.T, directed=False)
    charts = []
    for c in np.unique(comp):
        fs = np.nonzero(comp == c)[0]
        if labels[fs[0]] == UNTEXTURED:
            continue
        charts.append(fs)
    charts.sort(key=lambda fs: int(fs[0]))
    return charts


def ground_texel_density(mesh: TriMesh, labels, uv_by_view, exclude=ORTHO_VIEW):
    """Median pixels-per-meter over ground-labeled faces."""
    vals = []
    tri3d = mesh.vertices[mesh.faces]
    for f, l in enumerate(labels):
        if l == UNTEXTURED or l == exclude:
            continue
        tri = uv_by_view[l][mesh.faces[f]]
        a2 = _tri_area2d(tri)
        e1 = tri3d[f, 1] - tri3d[f, 0]
        e2 = tri3d[f, 2] - tri3d[f, 0]
        a3 = 0.5 * np.linalg.norm(np.cross(e1, e2))
        if a3 > 1e-12 and a2 > 1e-12:
            vals.append(math.sqrt(a2 / a3))
    return float(np.median(vals)) if vals else None


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x = np.clip(x, 0, w - 1.000001)
    y = np.clip(y, 0, h - 1.000001)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)


def _apply_corrections(raster, face_uvpix, faces, corrections, label):
    corr = corrections.get(int(label)) if corrections else None
    if corr is None:
        return
    h, w = raster.shape[:2]
    for fi in range(len(faces)):
        tri = face_uvpix[fi]
        g = corr[faces[fi]]  # (3,3) per-corner corrections
        if np.all(g == 0):
            continue
        x0 = max(0, int(math.floor(tri[:, 0].min())))
        x1 = min(w - 1, int(math.ceil(tri[:, 0].max())))
        y0 = max(0, int(math.floor(tri[:, 1].min())))
        y1 = min(h - 1, int(math.ceil(tri[:, 1].max())))
        if x1 < x0 or y1 < y0:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        bc = _barycentric(tri, np.column_stack([xs.ravel(), ys.ravel()]))
        inside = (bc >= -1e-9).all(axis=1)
        if not inside.any():
            continue
        add = bc[inside] @ g
        sub = raster[y0:y1 + 1, x0:x1 + 1].reshape(-1, 3)
        sub[inside] += add
        raster[y0:y1 + 1, x0:x1 + 1] = sub.reshape(y1 - y0 + 1, x1 - x0 + 1, 3)


def _shelf_pack(sizes: list[tuple[int, int]], pad: int, smax: int):
    """Shelf packing into the smallest power-of-two square; None if > smax."""
    need = max((max(wh) for wh in sizes), default=1) + 2 * pad
    size = 16
    while size < need:
        size *= 2
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], i))
    while size <= smax:
        pos = [None] * len(sizes)
        x = y = shelf_h = pad
        ok = True
        for i in order:
            w, h = sizes[i]
            if x + w + pad > size:
                x = pad
                y += shelf_h + pad
                shelf_h = 0
            if y + h + pad > size:
                ok = False
                break
            pos[i] = (x, y)
            x += w + pad
            shelf_h = max(shelf_h, h)
        if ok:
            return size, pos
        size *= 2
    return None, None


def bake(mesh: TriMesh, labeling: FaceLabeling, corrections, views: ViewSet,
         atlas_max: int = 8192, texel_density: float | None = None) -> TextureBundle:
    """Rasterize per-label charts, pack them into a power-of-two atlas.

    Ground charts copy their view pixels at native resolution; ortho charts
    are sampled bilinearly at the median ground texel density (the ortho
    up-sampling).  Vertex color corrections are added per pixel by
    barycentric interpolation and clamped to [0, 255].
    """
    labels = labeling.labels
    uv_by_view = {ORTHO_VIEW: _ortho_uv(views.ortho_cam, mesh.vertices[:, :2])}
    for vi, cam in enumerate(views.ground_cams, start=1):
        uv_by_view[vi], _ = project_batch(cam, mesh.vertices)
    if texel_density is None:
        texel_density = ground_texel_density(mesh, labels, uv_by_view)
    if texel_density is None:
        texel_density = 1.0 / views.ortho_cam.gsd
    ortho_rgb = _ortho_rgb(views.ortho_grid)

    charts = _charts(mesh, labels)
    rasters, uvpix, chart_faces = [], [], []
    queue = list(charts)
    while queue:
        fs = queue.pop(0)
        label = int(labels[fs[0]])
        faces = mesh.faces[fs]
        if label == ORTHO_VIEW:
            xy = mesh.vertices[np.unique(faces)][:, :2]
            wx0, wy0 = xy.min(axis=0)
            wx1, wy1 = xy.max(axis=0)
            w = max(2, int(math.ceil((wx1 - wx0) * texel_density)) + 1)
            h = max(2, int(math.ceil((wy1 - wy0) * texel_density)) + 1)
            if w > atlas_max or h > atlas_max:
                queue = _bisect_chart(mesh, fs) + queue
                continue
            xs = wx0 + (np.arange(w) + 0.5) * (wx1 - wx0) / w
            ys = wy1 - (np.arange(h) + 0.5) * (wy1 - wy0) / h
            gx, gy = np.meshgrid(xs, ys)
            guv = _ortho_uv(views.ortho_cam, np.column_stack([gx.ravel(), gy.ravel()]))
            raster = _bilinear(ortho_rgb, guv[:, 0], guv[:, 1]).reshape(h, w, 3)
            vxy = mesh.vertices[:, :2]
            fuv = np.empty((len(fs), 3, 2))
            fuv[..., 0] = (vxy[faces][..., 0] - wx0) * w / max(wx1 - wx0, 1e-12)
            fuv[..., 1] = (wy1 - vxy[faces][..., 1]) * h / max(wy1 - wy0, 1e-12)
        else:
            img = views.ground_images[label - 1].astype(np.float64)
            uv = uv_by_view[label][np.unique(faces)]
            x0 = max(0, int(math.floor(uv[:, 0].min())))
            y0 = max(0, int(math.floor(uv[:, 1].min())))
            x1 = min(img.shape[1] - 1, int(math.ceil(uv[:, 0].max())))
            y1 = min(img.shape[0] - 1, int(math.ceil(uv[:, 1].max())))
            if x1 - x0 + 1 > atlas_max or y1 - y0 + 1 > atlas_max:
                queue = _bisect_chart(mesh, fs) + queue
                continue
            raster = img[y0:y1 + 1, x0:x1 + 1].copy()
            fuv = uv_by_view[label][faces] - np.array([x0, y0])
        _apply_corrections(raster, fuv, faces, corrections, label)
        rasters.append(np.clip(raster, 0, 255))
        uvpix.append(fuv)
        chart_faces.append(fs)

    sizes = [(r.shape[1], r.shape[0]) for r in rasters] + [(1, 1)]  # + gray chart
    size, pos = _shelf_pack(sizes, pad=1, smax=atlas_max)
    if size is None:
        raise InputError("charts exceed the maximum atlas size; increase atlas_max")
    atlas = np.zeros((size, size, 3), dtype=np.uint8)
    uvs = np.zeros((len(mesh.faces), 3, 2))
    for i, (raster, fuv, fs) in enumerate(zip(rasters, uvpix, chart_faces)):
        x, y = pos[i]
        h, w = raster.shape[:2]
        atlas[y:y + h, x:x + w] = raster.astype(np.uint8)
        px = fuv + np.array([x, y])
        uvs[fs, :, 0] = px[..., 0] / size
        uvs[fs, :, 1] = 1.0 - px[..., 1] / size
    gx, gy = pos[-1]
    atlas[gy, gx] = (128, 128, 128)
    untex = labels == UNTEXTURED
    uvs[untex, :, 0] = (gx + 0.5) / size
    uvs[untex, :, 1] = 1.0 - (gy + 0.5) / size
    return TextureBundle(mesh, labels.copy(), uvs, atlas)


def _bisect_chart(mesh: TriMesh, fs: np.ndarray) -> list[np.ndarray]:
    cent = mesh.face_centroids()[fs]
    spans = cent.max(axis=0) - cent.min(axis=0)
    axis = int(np.argmax(spans))
    order = np.argsort(cent[:, axis], kind="stable")
    half = len(fs) // 2
    return [fs[order[:half]], fs[order[half:]]]


def write_obj_bundle(bundle: TextureBundle, base_path) -> None:
    """Write <base>.obj, <base>.mtl and <base>.png with deterministic ordering."""
    import os

    base = str(base_path)
    stem = os.path.basename(base)
    mesh = bundle.mesh
    with open(base + ".obj", "wb") as fh:
        fh.write(f"mtllib {stem}.mtl\n".encode())
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n".encode())
        for f in range(len(mesh.faces)):
            for k in range(3):
                u, vv = bundle.uvs[f, k]
                fh.write(f"vt {u:.9g} {vv:.9g}\n".encode())
        fh.write(b"usemtl atlas\n")
        for f in range(len(mesh.faces)):
            i, j, k = mesh.faces[f] + 1
            t = 3 * f + 1
            fh.write(f"f {i}/{t} {j}/{t + 1} {k}/{t + 2}\n".encode())
    with open(base + ".mtl", "wb") as fh:
        fh.write(b"newmtl atlas\n")
        fh.write(b"Ka 1 1 1\nKd 1 1 1\n")
        fh.write(f"map_Kd {stem}.png\n".encode())
    Image.fromarray(bundle.atlas).save(base + ".png")
