"""Cross-view point-cloud registration, fusion meshing and texturing."""

from .config import RunConfig, read_config, write_config
from .geom import (HeightGrid, ParallelCamera, PerspectiveCamera, PointCloud,
                   Transform2D5, TriMesh, angle_diff, apply_transform, point3,
                   project_perspective, rotation2)

__version__ = "0.1.0"
