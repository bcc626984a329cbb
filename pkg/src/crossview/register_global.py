"""Global registration: one transformation per ground segment via an MRF.

Each ground segment chooses among its filtered hypotheses; the data term
counts boundary points (of the segment and its k-adjacent neighbors) that
miss the overhead boundary by more than a threshold, the smooth term
penalizes neighboring segments picking dissimilar transforms.  The energy is
minimized with alpha-expansion.  Vertical alignment, pose update and cloud
fusion finish the job.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .boundary import BoundarySegment
from .errors import AlignmentError, InputError, RegistrationError
from .fileio import PoseRecord, matrix_to_quat
from .geom import HeightGrid, PointCloud, Transform2D5, angle_diff, apply_transform, rotation2
from .graphcut import alpha_expansion
from .register_local import DistanceMap, Hypothesis

UNASSIGNED = -1


@dataclass(frozen=True)
class EnergyParams:
    d_th: float = 2.0
    theta_th: float = math.radians(10.0)
    t_th: float = 100.0
    h: int = 1
    k_adj: int = 3
    p_large_cap: float = 20.0

    def __post_init__(self):
        for name in ("d_th", "theta_th", "t_th", "h", "k_adj", "p_large_cap"):
            if getattr(self, name) <= 0:
                raise InputError(f"energy parameter {name} must be positive")


@dataclass(frozen=True)
class SegmentGraph:
    """k-NN adjacency over segment barycenters.

    ``edges`` is the symmetrized neighbor relation (for the smooth term);
    ``knn`` keeps the directed k-nearest lists including the node itself
    (the point-collection rule of the data term).
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    knn: dict[int, tuple[int, ...]]


def build_graph(segments: list[BoundarySegment], k_adj: int) -> SegmentGraph:
    if not segments:
        raise InputError("graph needs at least one segment")
    ids = [seg.id for seg in segments]
    bary = np.array([seg.barycenter for seg in segments])
    n = len(ids)
    edges = set()
    knn = {}
    for i in range(n):
        d = np.linalg.norm(bary - bary[i], axis=1)
        order = np.lexsort((ids, d))  # distance, then id
        others = [j for j in order if j != i][: k_adj]
        knn[ids[i]] = tuple([ids[i]] + [ids[j] for j in others])
        for j in others:
            edges.add((min(ids[i], ids[j]), max(ids[i], ids[j])))
    return SegmentGraph(tuple(ids), tuple(sorted(edges)), knn)


def _collect_points(seg_by_id: dict[int, BoundarySegment], graph: SegmentGraph, node: int):
    return np.vstack([seg_by_id[j].points2d for j in graph.knn[node]])


def data_term(
    seg: BoundarySegment,
    hyp: Hypothesis,
    dmap: DistanceMap,
    graph: SegmentGraph,
    params: EnergyParams,
    seg_by_id: dict[int, BoundarySegment] | None = None,
) -> int:
    """Count of collected boundary points farther than d_th after transform."""
    if seg_by_id is None:
        seg_by_id = {seg.id: seg}
        pts = seg.points2d
    else:
        pts = _collect_points(seg_by_id, graph, seg.id)
    moved = hyp.s * pts @ rotation2(hyp.theta).T + np.asarray(hyp.t)
    return int((dmap.sample(moved) >= params.d_th).sum())


def smooth_term(ti: Hypothesis, tj: Hypothesis, params: EnergyParams) -> float:
    """Pairwise penalty: small constant for similar transforms, scaled else."""
    dth = angle_diff(ti.theta, tj.theta)
    dt = math.dist(ti.t, tj.t)
    if dth < params.theta_th and dt < params.t_th:
        return 2.0 * params.h
    p2 = (dth / params.theta_th + dt / params.t_th) * params.h
    return min(p2, params.p_large_cap * params.h)


@dataclass(frozen=True)
class Labeling:
    """Per-segment hypothesis index into the global table (UNASSIGNED if none)."""

    assignment: dict[int, int]
    energy: float


def minimize_energy(
    graph: SegmentGraph,
    segments: list[BoundarySegment],
    hypotheses: list[Hypothesis],
    dmap: DistanceMap,
    params: EnergyParams,
) -> Labeling:
    """Alpha-expansion over the global hypothesis table.

    A hypothesis not generated for a segment carries an implausibility
    surcharge of twice the segment's collected point count.  Segments with no
    hypothesis at all stay UNASSIGNED and are excluded from the energy.
    """
    if not hypotheses:
        raise RegistrationError("empty hypothesis table; local matching found nothing")
    seg_by_id = {seg.id: seg for seg in segments}
    # ascending-score visiting order keeps the expansion deterministic
    order = sorted(range(len(hypotheses)),
                   key=lambda i: (hypotheses[i].score, hypotheses[i].src_segment,
                                  hypotheses[i].dst_segment, hypotheses[i].theta))
    own = {nid: [i for i, h in enumerate(hypotheses) if h.src_segment == nid]
           for nid in graph.nodes}
    active = [nid for nid in graph.nodes if own[nid]]
    if not active:
        raise RegistrationError("no segment has a candidate hypothesis")
    node_index = {nid: k for k, nid in enumerate(active)}
    n, L = len(active), len(hypotheses)

    unary = np.empty((n, L))
    for nid in active:
        k = node_index[nid]
        count = len(_collect_points(seg_by_id, graph, nid))
        unary[k, :] = 2.0 * count
        for li in own[nid]:
            unary[k, li] = data_term(seg_by_id[nid], hypotheses[li], dmap, graph,
                                     params, seg_by_id)

    pair = np.empty((L, L))
    for i in range(L):
        for j in range(i, L):
            v = smooth_term(hypotheses[i], hypotheses[j], params)
            pair[i, j] = pair[j, i] = v

    edges = np.array([(node_index[a], node_index[b]) for a, b in graph.edges
                      if a in node_index and b in node_index], dtype=np.int64).reshape(-1, 2)
    edge_w = np.ones(len(edges))
    init = np.array([min(own[nid], key=lambda li: (unary[node_index[nid], li], li))
                     for nid in active], dtype=np.int64)
    labels, energy, trace = alpha_expansion(unary, edges, edge_w, pair, order, init)
    if any(b > a + 1e-9 for a, b in zip(trace, trace[1:])):
        raise RegistrationError("expansion energy increased; internal error")
    assignment = {nid: UNASSIGNED for nid in graph.nodes}
    for nid in active:
        assignment[nid] = int(labels[node_index[nid]])
    return Labeling(assignment, energy)


def labeling_energy(
    graph: SegmentGraph,
    segments: list[BoundarySegment],
    hypotheses: list[Hypothesis],
    dmap: DistanceMap,
    params: EnergyParams,
    assignment: dict[int, int],
) -> float:
    """Energy of an arbitrary assignment, straight from the definitions."""
    seg_by_id = {seg.id: seg for seg in segments}
    e = 0.0
    for nid, li in assignment.items():
        if li == UNASSIGNED:
            continue
        h = hypotheses[li]
        if h.src_segment == nid:
            e += data_term(seg_by_id[nid], h, dmap, graph, params, seg_by_id)
        else:
            e += 2.0 * len(_collect_points(seg_by_id, graph, nid))
    for a, b in graph.edges:
        la, lb = assignment.get(a, UNASSIGNED), assignment.get(b, UNASSIGNED)
        if la != UNASSIGNED and lb != UNASSIGNED:
            e += smooth_term(hypotheses[la], hypotheses[lb], params)
    return e


def vertical_align(cloud: PointCloud, dsm: HeightGrid, cell_m: float = 2.0,
                   band_m: float = 0.5, min_points: int = 50) -> float:
    """Median height offset between DSM and the cloud's ground-class points.

    Ground-class points sit within ``band_m`` above the per-cell minimum z of
    a ``cell_m`` grid over the cloud.  Returns dz to ADD to cloud z values.
    """
    pts = cloud.points
    heights = dsm.band("height")
    col = np.floor((pts[:, 0] - pts[:, 0].min()) / cell_m).astype(np.int64)
    row = np.floor((pts[:, 1] - pts[:, 1].min()) / cell_m).astype(np.int64)
    key = row * (col.max() + 1) + col
    order = np.argsort(key, kind="stable")
    ks, zs = key[order], pts[order, 2]
    starts = np.r_[0, np.nonzero(np.diff(ks))[0] + 1]
    minz = np.minimum.reduceat(zs, starts)
    cell_min = np.empty(len(pts))
    spans = np.diff(np.r_[starts, len(ks)])
    cell_min[order] = np.repeat(minz, spans)
    ground = pts[pts[:, 2] <= cell_min + band_m]
    r, c, ok = dsm.cell_of(ground[:, :2])
    dsm_z = np.full(len(ground), np.nan)
    dsm_z[ok] = heights[r[ok], c[ok]]
    valid = np.isfinite(dsm_z)
    n_overlap = int(valid.sum())
    if n_overlap == 0:
        raise AlignmentError("transformed cloud does not overlap the DSM")
    if n_overlap < min_points:
        warnings.warn(f"only {n_overlap} overlapping ground points; dz fixed to 0")
        return 0.0
    return float(np.median(dsm_z[valid] - ground[valid, 2]))


@dataclass(frozen=True)
class ResolvedTransforms:
    per_segment: dict[int, Transform2D5]
    dominant: Transform2D5
    barycenters: dict[int, np.ndarray]  # segment barycenters in the source frame


def resolve_transform(
    labeling: Labeling,
    segments: list[BoundarySegment],
    hypotheses: list[Hypothesis],
    dz: float,
) -> ResolvedTransforms:
    """Package the labeling into per-segment transforms plus a dominant one.

    The dominant transform is the label covering the largest total supporting
    point count (ties toward the smaller label index).
    """
    seg_by_id = {seg.id: seg for seg in segments}
    per_segment = {}
    coverage: dict[int, int] = {}
    for nid, li in labeling.assignment.items():
        if li == UNASSIGNED:
            continue
        h = hypotheses[li]
        per_segment[nid] = Transform2D5(h.s, h.theta, h.t, dz)
        weight = seg_by_id[nid].n_points or len(seg_by_id[nid].points2d)
        coverage[li] = coverage.get(li, 0) + weight
    if not per_segment:
        raise InputError("no assigned segment")
    best_label = min(coverage, key=lambda li: (-coverage[li], li))
    h = hypotheses[best_label]
    dominant = Transform2D5(h.s, h.theta, h.t, dz)
    barycenters = {nid: seg_by_id[nid].barycenter for nid in per_segment}
    return ResolvedTransforms(per_segment, dominant, barycenters)


def apply_piecewise(cloud: PointCloud, resolved: ResolvedTransforms) -> PointCloud:
    """Transform each point by the transform of its nearest assigned segment.

    Ties on barycenter distance break toward the lower segment id.
    """
    ids = sorted(resolved.per_segment)
    bary = np.array([resolved.barycenters[nid] for nid in ids])
    pts = cloud.points
    d = np.linalg.norm(pts[:, None, :2] - bary[None, :, :], axis=2) if len(ids) < 64 else None
    if d is not None:
        nearest = np.argmin(d, axis=1)  # argmin takes the first (lowest id) on ties
    else:
        tree = cKDTree(bary)
        _, nearest = tree.query(pts[:, :2])
    out = np.empty_like(pts)
    normals = None if cloud.normals is None else np.empty_like(cloud.normals)
    for k, nid in enumerate(ids):
        sel = nearest == k
        if not np.any(sel):
            continue
        T = resolved.per_segment[nid]
        r = T.matrix2()
        out[sel, :2] = T.s * pts[sel, :2] @ r.T + np.asarray(T.t)
        out[sel, 2] = T.s * pts[sel, 2] + T.dz
        if normals is not None:
            normals[sel, :2] = cloud.normals[sel, :2] @ r.T
            normals[sel, 2] = cloud.normals[sel, 2]
    return PointCloud(out, colors=cloud.colors, normals=normals)


def apply_to_poses(poses: list[PoseRecord], T: Transform2D5) -> list[PoseRecord]:
    """Map camera centers through T and compose rotations with the z rotation."""
    r3 = np.eye(3)
    r3[:2, :2] = T.matrix2()
    out = []
    for p in poses:
        c = np.asarray(p.center)
        c2 = np.empty(3)
        c2[:2] = T.s * T.matrix2() @ c[:2] + np.asarray(T.t)
        c2[2] = T.s * c[2] + T.dz
        rot = p.rotation() @ r3.T
        out.append(
            PoseRecord(p.frame_id, p.focal, p.cx, p.cy, tuple(matrix_to_quat(rot)),
                       tuple(c2))
        )
    return out


def fuse_clouds(
    overview: PointCloud, ground: PointCloud, dedup_radius_m: float
) -> PointCloud:
    """Ground points plus overview points with no ground point within the radius."""
    if dedup_radius_m > 0 and len(ground):
        tree = cKDTree(ground.points)
        d, _ = tree.query(overview.points)
        keep = d > dedup_radius_m
    else:
        keep = np.ones(len(overview), dtype=bool)
    pts = np.vstack([ground.points, overview.points[keep]])
    colors = None
    if ground.colors is not None and overview.colors is not None:
        colors = np.vstack([ground.colors, overview.colors[keep]])
    normals = None
    if ground.normals is not None and overview.normals is not None:
        normals = np.vstack([ground.normals, overview.normals[keep]])
    return PointCloud(pts, colors=colors, normals=normals)


def registration_report(
    resolved: ResolvedTransforms, labeling: Labeling, hypotheses: list[Hypothesis],
    dz: float, energy: float
) -> str:
    lines = ["segment  theta_deg  tx_m  ty_m  score_m"]
    for nid in sorted(resolved.per_segment):
        li = labeling.assignment[nid]
        h = hypotheses[li]
        lines.append(
            f"{nid:7d}  {math.degrees(h.theta):9.3f}  {h.t[0]:.3f}  {h.t[1]:.3f}  {h.score:.4f}"
        )
    d = resolved.dominant
    lines.append(
        f"dominant theta_deg={math.degrees(d.theta):.3f} t=({d.t[0]:.3f}, {d.t[1]:.3f}) "
        f"s={d.s:.6f} dz={dz:.3f}"
    )
    lines.append(f"energy {energy:.6f}")
    return "\n".join(lines) + "\n"
