"""Flat run configuration: every tunable of the pipeline with its default.

The on-disk form is plain ``key = value`` text; unknown keys are rejected
with a nearest-key suggestion, missing keys take the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    # boundary extraction
    se_radius_m: float = 15.0          # top-hat structuring disk radius
    hmin_m: float = 3.0                # top-hat height threshold
    ndvi_max: float = 0.2              # vegetation rejection threshold
    ground_cell_m: float = 0.5         # plan-view occupancy cell for region growing
    min_cells: int = 4                 # smallest overhead component kept
    min_pts: int = 500                 # smallest ground segment kept (points)
    normal_k: int = 12                 # k-NN size for normal estimation
    # local registration
    rotation_step_deg: float = 3.0
    group_c: int = 10                  # destination points per rotation hypothesis
    n_eval: int = 200                  # source subsample cap per scoring pass
    err_max_m: float = 2.0             # hypothesis filter threshold (mean chamfer)
    scale_s: float = 1.0               # fixed scale between the two clouds
    dmap_margin_m: float = 60.0        # distance-map bounding-box inflation
    # global registration
    d_th_m: float = 2.0                # data-term inlier distance
    theta_th_deg: float = 10.0
    t_th_m: float = 100.0
    k_adj: int = 3
    p_large_cap: float = 20.0          # smooth-term cap, in units of h
    dedup_radius_m: float = 0.5        # overview points dropped near ground points
    # meshing
    sigma_factor: float = 2.0          # soft-visibility sigma = factor * median NN spacing
    alpha_ground: float = 1.0
    lambda_ortho: float = 0.5
    mesh_beta: float = 0.2             # constant facet prior (surface compactness)
    mesh_point_cap: int = 2_000_000
    ortho_margin_m: float = 10.0       # ortho ray origin height above the scene
    # texturing
    lambda_smooth: float = 1.0
    ortho_bias: float = 0.25           # <1 strengthens the ortho data term
    mu_color: float = 0.1
    atlas_max: int = 8192
    # synthetic scene used by the CLI (desk scale)
    scene_extent_m: float = 90.0
    scene_buildings: int = 3
    scene_gsd_m: float = 0.5
    scene_ground_spacing_m: float = 0.25
    scene_noise_overhead_m: float = 0.3
    scene_noise_ground_m: float = 0.02
    scene_footprint_min_m: float = 10.0
    scene_footprint_max_m: float = 18.0
    scene_height_min_m: float = 5.0
    scene_height_max_m: float = 11.0
    scene_vegetation: int = 2
    scene_t0_theta_deg: float = 30.0
    scene_t0_tx_m: float = 100.0
    scene_t0_ty_m: float = -50.0
    scene_t0_dz_m: float = 1.7
    scene_drift_theta_rad_per_m: float = 0.0
    scene_drift_lateral_m_per_m: float = 0.0


# closed numeric ranges each tunable must lie in
_RANGES = {
    "se_radius_m": (1e-6, 500.0),
    "hmin_m": (0.0, 500.0),
    "ndvi_max": (-1.0, float("inf")),
    "ground_cell_m": (1e-6, 50.0),
    "min_cells": (1, 10**9),
    "min_pts": (1, 10**12),
    "normal_k": (3, 4096),
    "rotation_step_deg": (1e-6, 120.0),
    "group_c": (1, 10**6),
    "n_eval": (4, 10**7),
    "err_max_m": (0.0, float("inf")),
    "scale_s": (1e-9, 1e9),
    "dmap_margin_m": (0.0, 1e6),
    "d_th_m": (1e-9, 1e6),
    "theta_th_deg": (1e-9, 180.0),
    "t_th_m": (1e-9, 1e9),
    "k_adj": (1, 10**6),
    "p_large_cap": (1e-9, 1e9),
    "dedup_radius_m": (0.0, 1e6),
    "sigma_factor": (1e-9, 1e6),
    "alpha_ground": (1e-9, 1e6),
    "lambda_ortho": (0.0, 1e6),
    "mesh_beta": (0.0, 1e6),
    "mesh_point_cap": (100, 10**9),
    "ortho_margin_m": (0.0, 1e6),
    "lambda_smooth": (0.0, 1e9),
    "ortho_bias": (1e-9, 1e9),
    "mu_color": (0.0, 1e9),
    "atlas_max": (16, 65536),
    "scene_extent_m": (10.0, 1e5),
    "scene_buildings": (0, 10**4),
    "scene_gsd_m": (1e-3, 100.0),
    "scene_ground_spacing_m": (1e-3, 100.0),
    "scene_noise_overhead_m": (0.0, 100.0),
    "scene_noise_ground_m": (0.0, 100.0),
    "scene_footprint_min_m": (1.0, 1e4),
    "scene_footprint_max_m": (1.0, 1e4),
    "scene_height_min_m": (0.5, 1e4),
    "scene_height_max_m": (0.5, 1e4),
    "scene_vegetation": (0, 10**4),
    "scene_t0_theta_deg": (-360.0, 360.0),
    "scene_t0_tx_m": (-1e6, 1e6),
    "scene_t0_ty_m": (-1e6, 1e6),
    "scene_t0_dz_m": (-1e4, 1e4),
    "scene_drift_theta_rad_per_m": (-1.0, 1.0),
    "scene_drift_lateral_m_per_m": (-10.0, 10.0),
}


def validate_config(cfg: RunConfig) -> RunConfig:
    for f in dataclasses.fields(cfg):
        lo, hi = _RANGES[f.name]
        v = getattr(cfg, f.name)
        if not (lo <= v <= hi):
            raise ConfigError(f"config key {f.name} = {v!r} outside allowed range [{lo}, {hi}]")
    return cfg


def read_config(path) -> RunConfig:
    """Parse ``key = value`` lines; unknown keys rejected, missing keys default."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8", errors="replace")
    for lineno, line in enumerate(text.split("\n"), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            close = difflib.get_close_matches(key, fields, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}{hint}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        except ValueError:
            raise ConfigError(f"{path}: line {lineno}: key {key!r} needs a {ftype}, got {raw!r}")
    return validate_config(RunConfig(**values))


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "wb") as fh:
        for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
            v = getattr(cfg, f.name)
            s = str(v) if isinstance(v, int) else f"{v:.17g}"
            fh.write(f"{f.name} = {s}\n".encode())
