"""File-based pipeline stages: gen, extract, register, mesh, texture, eval.

Every stage reads and writes only the package's file formats (PLY, HGT1,
poses text, CSV, PNG/OBJ for textures) so stages can be rerun and inspected
independently.  ``run_pipeline`` chains everything and emits the evaluation
report plus per-stage timings.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import boundary as bnd
from . import register_global as rg
from . import register_local as rl
from .config import RunConfig
from .errors import InputError, EvalError
from .evaluate import (EvalReport, eval_dsm, eval_registration, hausdorff_mesh,
                       icp_baseline, rasterize_max)
from .fileio import (read_grid, read_mesh_ply, read_ply, read_poses, write_grid,
                     write_mesh_ply, write_ply, write_poses)
from .geom import HeightGrid, ParallelCamera, PointCloud, Transform2D5, apply_transform
from .mesher import (accumulate, cap_points, concat_rays, delaunay3, extract_surface,
                     facet_prior, median_nn_spacing, mesh_stats, mincut, ortho_rays,
                     perspective_rays)
from .synth import (DriftModel, Scene, SceneSpec, distort, gen_city,
                    render_ground_views)
from .texturer import (ViewSet, bake, color_adjust, face_visibility, view_labeling,
                       write_obj_bundle)


def _p(out, name):
    return os.path.join(out, name)


def _need(out, name):
    path = _p(out, name)
    if not os.path.exists(path):
        raise InputError(f"missing {name} in {out}; run the earlier stages first")
    return path


def scene_spec_from_config(cfg: RunConfig, seed: int) -> SceneSpec:
    return SceneSpec(
        seed=seed,
        extent_m=cfg.scene_extent_m,
        n_buildings=cfg.scene_buildings,
        footprint_min_m=cfg.scene_footprint_min_m,
        footprint_max_m=cfg.scene_footprint_max_m,
        height_min_m=cfg.scene_height_min_m,
        height_max_m=cfg.scene_height_max_m,
        gsd_m=cfg.scene_gsd_m,
        noise_overhead_m=cfg.scene_noise_overhead_m,
        ground_spacing_m=cfg.scene_ground_spacing_m,
        noise_ground_m=cfg.scene_noise_ground_m,
        n_vegetation=cfg.scene_vegetation,
    )


def drift_from_config(cfg: RunConfig) -> DriftModel:
    t0 = Transform2D5(1.0, math.radians(cfg.scene_t0_theta_deg),
                      (cfg.scene_t0_tx_m, cfg.scene_t0_ty_m), cfg.scene_t0_dz_m)
    return DriftModel(t0, cfg.scene_drift_theta_rad_per_m,
                      cfg.scene_drift_lateral_m_per_m)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _fmt(v) -> str:
    return f"{v:.10g}"


# ------------------------------------------------------------------- stages


def stage_gen(cfg: RunConfig, seed: int, out: str) -> Scene:
    os.makedirs(out, exist_ok=True)
    spec = scene_spec_from_config(cfg, seed)
    scene = gen_city(spec)
    drift = drift_from_config(cfg)
    ground_d, poses_d, true_pts = distort(scene.ground, scene.poses,
                                          scene.trajectory, drift)
    write_grid(scene.dsm, _p(out, "truth_dsm.hgt"))
    write_grid(scene.ortho, _p(out, "ortho.hgt"))
    write_ply(scene.overview, _p(out, "overview.ply"))
    write_ply(ground_d, _p(out, "ground.ply"))
    write_ply(PointCloud(true_pts, colors=scene.ground.colors),
              _p(out, "ground_true.ply"))
    write_poses(list(scene.poses), _p(out, "poses_true.txt"))
    write_poses(poses_d, _p(out, "poses.txt"))
    write_mesh_ply(scene.truth_mesh, _p(out, "truth_mesh.ply"))
    _write_csv(_p(out, "visibility.csv"), ["point_index", "view_id"],
               scene.view_pairs.tolist())
    _write_csv(_p(out, "buildings.csv"), ["id", "x0", "y0", "x1", "y1", "height"],
               [[i, *map(_fmt, b)] for i, b in enumerate(scene.buildings)])
    meta = [
        ("seed", seed),
        ("extent_m", _fmt(spec.extent_m)),
        ("gsd_m", _fmt(spec.gsd_m)),
        ("t0_theta_rad", _fmt(drift.t0.theta)),
        ("t0_tx_m", _fmt(drift.t0.t[0])),
        ("t0_ty_m", _fmt(drift.t0.t[1])),
        ("t0_dz_m", _fmt(drift.t0.dz)),
        ("drift_theta_rad_per_m", _fmt(drift.rate_theta)),
        ("drift_lateral_m_per_m", _fmt(drift.rate_lateral)),
        ("trajectory_length_m", _fmt(scene.trajectory.length)),
    ]
    _write_csv(_p(out, "scene.csv"), ["key", "value"], meta)
    viewdir = _p(out, "views")
    os.makedirs(viewdir, exist_ok=True)
    from PIL import Image
    for i, img in enumerate(render_ground_views(scene)):
        Image.fromarray(img).save(os.path.join(viewdir, f"view_{i:04d}.png"))
    return scene


def _write_segments(path, segments):
    rows = []
    for seg in segments:
        for x, y in seg.points2d:
            rows.append([seg.id, seg.source, seg.n_points, _fmt(x), _fmt(y)])
    _write_csv(path, ["segment_id", "source", "n_points", "x", "y"], rows)


def _read_segments(path):
    segs = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            sid = int(row["segment_id"])
            entry = segs.setdefault(sid, {"source": row["source"],
                                          "n": int(row["n_points"]), "pts": []})
            entry["pts"].append((float(row["x"]), float(row["y"])))
    out = []
    for sid in sorted(segs):
        e = segs[sid]
        out.append(bnd.BoundarySegment(sid, np.array(e["pts"]), None, e["source"],
                                       n_points=e["n"]))
    return out


def stage_extract(cfg: RunConfig, out: str):
    overview = read_ply(_need(out, "overview.ply"))
    ortho = read_grid(_need(out, "ortho.hgt"))
    heights = rasterize_max(overview.points, ortho)
    dsm_obs = HeightGrid(ortho.origin_x, ortho.origin_y, ortho.gsd,
                         {"height": heights.astype(np.float32)})
    write_grid(dsm_obs, _p(out, "dsm.hgt"))
    mask = bnd.tophat_mask(dsm_obs, cfg.se_radius_m, cfg.hmin_m)
    mask = bnd.remove_vegetation(mask, bnd.ndvi(ortho), cfg.ndvi_max)
    write_grid(HeightGrid(mask.origin_x, mask.origin_y, mask.gsd,
                          {"mask": mask.mask.astype(np.float32)}),
               _p(out, "mask.hgt"))
    over_segs = bnd.mask_boundary(mask, cfg.min_cells)
    if not over_segs:
        raise InputError("no overhead building segments found")
    seeds = np.vstack([s.points2d for s in over_segs])
    dmap = rl.distance_transform(seeds, ortho.gsd, cfg.dmap_margin_m)
    write_grid(dmap.grid, _p(out, "dmap.hgt"))

    ground = read_ply(_need(out, "ground.ply"))
    poses = read_poses(_need(out, "poses.txt"))
    sensors = np.array([p.center for p in poses])
    ground_n = bnd.estimate_normals(ground, cfg.normal_k, sensor_positions=sensors)
    vertical = bnd.estimate_vertical(ground_n)
    ground_segs = bnd.ground_segments(ground_n, vertical, cfg.ground_cell_m,
                                      cfg.min_pts)
    if not ground_segs:
        raise InputError("no ground building segments found")
    _write_segments(_p(out, "segments_overhead.csv"), over_segs)
    _write_segments(_p(out, "segments_ground.csv"), ground_segs)
    return over_segs, ground_segs, dmap


def _read_dmap(out) -> rl.DistanceMap:
    grid = read_grid(_need(out, "dmap.hgt"))
    return rl.DistanceMap(grid, float(np.nanmax(grid.band("dist"))))


def stage_register(cfg: RunConfig, out: str):
    over_segs = _read_segments(_need(out, "segments_overhead.csv"))
    ground_segs = _read_segments(_need(out, "segments_ground.csv"))
    dmap = _read_dmap(out)
    ground = read_ply(_need(out, "ground.ply"))
    poses = read_poses(_need(out, "poses.txt"))
    dsm_obs = read_grid(_need(out, "dsm.hgt"))
    centers = np.array([p.center for p in poses])
    traj_len = float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())

    hyps = []
    for src in ground_segs:
        for dst in over_segs:
            hyps.extend(rl.match_pair(dst, src, dmap, cfg.scale_s,
                                      cfg.rotation_step_deg, cfg.group_c,
                                      cfg.n_eval))
    kept = rl.filter_hypotheses(hyps, ground_segs, dmap, traj_len, cfg.err_max_m)
    if not kept:
        raise rg.RegistrationError("all hypotheses filtered out")
    graph = rg.build_graph(ground_segs, cfg.k_adj)
    h_count = sum(seg.n_points or len(seg.points2d) for seg in ground_segs)
    params = rg.EnergyParams(cfg.d_th_m, math.radians(cfg.theta_th_deg),
                             cfg.t_th_m, max(1, round(h_count / 100)),
                             cfg.k_adj, cfg.p_large_cap)
    labeling = rg.minimize_energy(graph, ground_segs, kept, dmap, params)

    # vertical alignment on the 2D-transformed cloud
    resolved0 = rg.resolve_transform(labeling, ground_segs, kept, 0.0)
    moved = rg.apply_piecewise(ground, resolved0)
    dz = rg.vertical_align(moved, dsm_obs)
    resolved = rg.resolve_transform(labeling, ground_segs, kept, dz)
    registered = rg.apply_piecewise(ground, resolved)
    poses_reg = rg.apply_to_poses(poses, resolved.dominant)

    write_ply(registered, _p(out, "ground_registered.ply"))
    write_poses(poses_reg, _p(out, "poses_registered.txt"))
    rows = []
    for nid in sorted(resolved.per_segment):
        T = resolved.per_segment[nid]
        li = labeling.assignment[nid]
        rows.append([nid, _fmt(T.s), _fmt(T.theta), _fmt(T.t[0]), _fmt(T.t[1]),
                     _fmt(T.dz), _fmt(kept[li].score), li])
    d = resolved.dominant
    rows.append([-1, _fmt(d.s), _fmt(d.theta), _fmt(d.t[0]), _fmt(d.t[1]),
                 _fmt(d.dz), "", ""])
    _write_csv(_p(out, "transforms.csv"),
               ["segment_id", "s", "theta_rad", "tx", "ty", "dz", "score", "label"],
               rows)
    with open(_p(out, "registration_report.txt"), "w") as fh:
        fh.write(rg.registration_report(resolved, labeling, kept, dz,
                                        labeling.energy))
    return resolved, labeling


def stage_mesh(cfg: RunConfig, out: str, seed: int = 0):
    overview = read_ply(_need(out, "overview.ply"))
    ground = read_ply(_need(out, "ground_registered.ply"))
    ortho = read_grid(_need(out, "ortho.hgt"))
    poses = read_poses(_need(out, "poses_registered.txt"))
    pairs = []
    with open(_need(out, "visibility.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append((int(row["point_index"]), int(row["view_id"])))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    fused = rg.fuse_clouds(overview, ground, cfg.dedup_radius_m)
    write_ply(fused, _p(out, "fused.ply"))
    n_ground = len(ground)
    capped = cap_points(fused, cfg.mesh_point_cap, seed=seed)
    if len(capped) != len(fused):
        raise InputError("mesh point cap exceeded; desk-scale scenes should fit")
    tet = delaunay3(fused.points)
    centers = {p.frame_id: np.asarray(p.center) for p in poses}
    persp, _ = perspective_rays(fused, pairs, centers, alpha=cfg.alpha_ground)
    georef = ParallelCamera(ortho.origin_x, ortho.origin_y, ortho.gsd,
                            ortho.width, ortho.height)
    # nadir visibility: the orthophoto sees the per-cell highest top surface
    # of the fused model (dedup removed the in-swath satellite points, ground
    # points replace them); wall points are excluded since a vertical ray
    # "behind" a facade top would drop full-space evidence into open air
    sensors = np.array([p.center for p in poses])
    gn = bnd.estimate_normals(ground, cfg.normal_k, sensor_positions=sensors)
    nadir = np.ones(len(fused), dtype=bool)
    nadir[:n_ground] = np.abs(gn.normals[:, 2]) > math.cos(math.radians(45.0))
    bundles = [persp,
               ortho_rays(PointCloud(fused.points[nadir]), georef,
                          cfg.ortho_margin_m, alpha=cfg.lambda_ortho)]
    rays = concat_rays(bundles)
    # soft-visibility scale follows the local sampling density at each target
    # (ground and satellite data differ by an order of magnitude)
    tree = cKDTree(fused.points)
    spacing = tree.query(rays.targets, k=2)[0][:, 1]
    floor = 0.1 * median_nn_spacing(fused.points)
    sigma = cfg.sigma_factor * np.maximum(spacing, floor)
    graph = accumulate(tet, rays, sigma)
    prior_arcs, prior_caps = facet_prior(tet, cfg.mesh_beta)
    free, cut_value = mincut(graph, prior_arcs, prior_caps)
    mesh = extract_surface(tet, free)
    write_mesh_ply(mesh, _p(out, "mesh.ply"))
    stats = mesh_stats(mesh)
    with open(_p(out, "mesh_stats.txt"), "w") as fh:
        fh.write(f"vertices {stats.n_vertices}\nedges {stats.n_edges}\n"
                 f"faces {stats.n_faces}\neuler {stats.euler}\n"
                 f"boundary_edges {stats.boundary_edges}\n"
                 f"nonmanifold_edges {stats.nonmanifold_edges}\n"
                 f"components {stats.components}\n"
                 f"manifold_fraction {stats.manifold_fraction:.6f}\n"
                 f"cut_value {cut_value:.6f}\n"
                 f"rays_walked {graph.walked}\nrays_dropped {graph.dropped}\n")
    return mesh, stats


def stage_texture(cfg: RunConfig, out: str):
    from PIL import Image

    mesh = read_mesh_ply(_need(out, "mesh.ply"))
    ortho = read_grid(_need(out, "ortho.hgt"))
    poses = read_poses(_need(out, "poses_registered.txt"))
    viewdir = _need(out, "views")
    images, cams = [], []
    for p in poses:
        path = os.path.join(viewdir, f"view_{p.frame_id:04d}.png")
        if not os.path.exists(path):
            raise InputError(f"missing rendered view {path}")
        img = np.asarray(Image.open(path).convert("RGB"))
        images.append(img)
        cams.append(p.to_camera(img.shape[1], img.shape[0]))
    views = ViewSet(tuple(images), tuple(cams), ortho,
                    ParallelCamera(ortho.origin_x, ortho.origin_y, ortho.gsd,
                                   ortho.width, ortho.height))
    cand = face_visibility(mesh, views)
    labeling = view_labeling(mesh, cand, views, cfg.lambda_smooth, cfg.ortho_bias)
    corrections = color_adjust(mesh, labeling, views, cfg.mu_color)
    bundle = bake(mesh, labeling, corrections, views, cfg.atlas_max)
    write_obj_bundle(bundle, _p(out, "model"))
    _write_csv(_p(out, "face_labels.csv"), ["face", "view"],
               list(enumerate(labeling.labels.tolist())))
    return labeling


def _read_scene_meta(out):
    meta = {}
    with open(_need(out, "scene.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            meta[row["key"]] = float(row["value"])
    return meta


def _analytic_perimeter_cells(buildings, grid: HeightGrid) -> np.ndarray:
    """Cells whose center lies within one gsd of a footprint edge (outline band)."""
    n_r, n_c = grid.height, grid.width
    xs = grid.origin_x + np.arange(n_c) * grid.gsd
    ys = grid.origin_y - np.arange(n_r) * grid.gsd
    X, Y = np.meshgrid(xs, ys)
    band = np.zeros((n_r, n_c), dtype=bool)
    g = grid.gsd
    for b in buildings:
        inside = (X >= b[0]) & (X <= b[2]) & (Y >= b[1]) & (Y <= b[3])
        near_edge = ((np.abs(X - b[0]) <= g) | (np.abs(X - b[2]) <= g)
                     | (np.abs(Y - b[1]) <= g) | (np.abs(Y - b[3]) <= g))
        band |= inside & near_edge
    return band


def boundary_iou(segments, buildings, grid: HeightGrid) -> float:
    got = np.zeros((grid.height, grid.width), dtype=bool)
    for seg in segments:
        r, c, ok = grid.cell_of(seg.points2d)
        got[r[ok], c[ok]] = True
    want = _analytic_perimeter_cells(buildings, grid)
    union = (got | want).sum()
    return float((got & want).sum() / union) if union else 1.0


def stage_eval(cfg: RunConfig, out: str, seed: int) -> EvalReport:
    rep = EvalReport()
    truth = read_grid(_need(out, "truth_dsm.hgt"))
    rep.add("dsm_self_rmse", eval_dsm(truth.band("height").astype(float), truth),
            "m", "eval")
    overview = read_ply(_need(out, "overview.ply"))
    sat_rmse = eval_dsm(overview, truth)
    rep.add("dsm_satellite_rmse", sat_rmse, "m", "eval")
    if os.path.exists(_p(out, "fused.ply")):
        fused = read_ply(_p(out, "fused.ply"))
        rep.add("dsm_combined_rmse", eval_dsm(fused, truth), "m", "eval")
    if os.path.exists(_p(out, "ground_registered.ply")):
        reg = read_ply(_p(out, "ground_registered.ply"))
        true_cloud = read_ply(_need(out, "ground_true.ply"))
        rep.add("registration_rmse", eval_registration(reg, true_cloud.points),
                "m", "eval")
        distorted = read_ply(_need(out, "ground.ply"))
        t_icp, _ = icp_baseline(distorted, overview)
        icp_cloud = apply_transform(distorted, t_icp)
        rep.add("icp_baseline_rmse",
                eval_registration(icp_cloud, true_cloud.points), "m", "eval")
        meta = _read_scene_meta(out)
        t0 = Transform2D5(1.0, meta["t0_theta_rad"],
                          (meta["t0_tx_m"], meta["t0_ty_m"]), meta["t0_dz_m"])
        want = t0.inverse()
        rows = list(csv.DictReader(open(_p(out, "transforms.csv"), newline="")))
        dom = [r for r in rows if int(r["segment_id"]) == -1][0]
        from .geom import angle_diff
        rep.add("dominant_theta_err_deg",
                math.degrees(angle_diff(float(dom["theta_rad"]), want.theta)),
                "deg", "eval")
        rep.add("dominant_t_err_m",
                math.hypot(float(dom["tx"]) - want.t[0], float(dom["ty"]) - want.t[1]),
                "m", "eval")
        rep.add("dominant_dz_err_m", abs(float(dom["dz"]) - want.dz), "m", "eval")
    if os.path.exists(_p(out, "mask.hgt")) and os.path.exists(_p(out, "buildings.csv")):
        mgrid = read_grid(_p(out, "mask.hgt"))
        mask = bnd.BinaryMask(mgrid.origin_x, mgrid.origin_y, mgrid.gsd,
                              mgrid.band("mask") > 0.5)
        segs = bnd.mask_boundary(mask, cfg.min_cells)
        buildings = []
        with open(_p(out, "buildings.csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                buildings.append([float(row[k]) for k in ("x0", "y0", "x1", "y1",
                                                          "height")])
        rep.add("boundary_iou", boundary_iou(segs, buildings, mgrid), "", "eval")
    if os.path.exists(_p(out, "mesh.ply")):
        mesh = read_mesh_ply(_p(out, "mesh.ply"))
        truth_mesh = read_mesh_ply(_need(out, "truth_mesh.ply"))
        rep.add("mesh_hausdorff_sampled", hausdorff_mesh(mesh, truth_mesh, n=2000),
                "m", "eval")
    with open(_p(out, "report.csv"), "w") as fh:
        fh.write(rep.csv(seed))
    with open(_p(out, "report.txt"), "w") as fh:
        fh.write(rep.text())
    return rep


def run_pipeline(cfg: RunConfig, seed: int, out: str) -> EvalReport:
    timings = []
    stages = [
        ("gen", lambda: stage_gen(cfg, seed, out)),
        ("extract", lambda: stage_extract(cfg, out)),
        ("register", lambda: stage_register(cfg, out)),
        ("mesh", lambda: stage_mesh(cfg, out, seed)),
        ("texture", lambda: stage_texture(cfg, out)),
        ("eval", lambda: stage_eval(cfg, out, seed)),
    ]
    rep = None
    for name, fn in stages:
        t0 = time.perf_counter()
        result = fn()
        timings.append((name, time.perf_counter() - t0))
        if name == "eval":
            rep = result
    rep.runtimes = timings
    with open(_p(out, "timings.txt"), "w") as fh:
        for name, dt in timings:
            fh.write(f"runtime_s,{dt:.3f},s,{name},{seed}\n")
    return rep
