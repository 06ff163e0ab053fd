"""Dense occupancy evaluation, 0.5-level isosurfacing, and per-vertex
colorization of extracted meshes."""

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .geometry import TriangleMesh


class ExtractionError(ValueError):
    pass


@dataclass
class ScalarGrid:
    values: np.ndarray        # (R, R, R) in [0, 1]
    world_bounds: np.ndarray  # (2, 3)

    def __post_init__(self):
        r = self.values.shape[0]
        if self.values.ndim != 3 or self.values.shape != (r, r, r):
            raise ExtractionError("grid must be cubic")
        if r < 16:
            raise ExtractionError("grid resolution must be at least 16")
        if not np.all(np.isfinite(self.values)):
            raise ExtractionError("non-finite grid values")
        self.world_bounds = np.asarray(self.world_bounds,
                                       np.float64).reshape(2, 3)

    @property
    def resolution(self):
        return self.values.shape[0]

    def voxel_size(self):
        lo, hi = self.world_bounds
        return (hi - lo) / (self.resolution - 1)


def grid_points(bounds, resolution):
    lo, hi = np.asarray(bounds, np.float64).reshape(2, 3)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def eval_grid(predictor, bounds, resolution, chunk=65536):
    """Evaluate a point->value predictor on every node of a cubic lattice.

    Evaluation order is fixed (row-major, chunked), so results are
    deterministic and independent of chunk size for pure predictors.
    """
    pts = grid_points(bounds, resolution)
    values = np.empty(len(pts), np.float32)
    for start in range(0, len(pts), chunk):
        values[start:start + chunk] = np.asarray(
            predictor(pts[start:start + chunk]), np.float32).reshape(-1)
    return ScalarGrid(values.reshape(resolution, resolution, resolution),
                      np.asarray(bounds, np.float64).reshape(2, 3))


def marching_cubes(grid, iso=0.5):
    """Isosurface of the 0.5 level set as a triangle mesh in world
    coordinates, oriented outward (normals point toward lower values)."""
    values = np.asarray(grid.values, np.float64)
    if values.min() >= iso or values.max() <= iso:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _, _ = measure.marching_cubes(values, level=iso)
    lo, _ = grid.world_bounds
    world = lo + verts * grid.voxel_size()
    # the library's winding leaves normals pointing into the high-value
    # (inside) region for occupancy grids; flip for outward orientation
    faces = faces[:, ::-1]
    return TriangleMesh(world, faces.astype(np.int64))


def colorize(mesh, color_predictor, chunk=65536):
    """Attach per-vertex rgb predictions to a mesh (values clamped to [0, 1])."""
    out = mesh.copy()
    if len(mesh.vertices) == 0:
        out.colors = np.zeros((0, 3), np.float32)
        return out
    colors = np.empty((len(mesh.vertices), 3), np.float32)
    pts = np.asarray(mesh.vertices, np.float64)
    for start in range(0, len(pts), chunk):
        colors[start:start + chunk] = np.asarray(
            color_predictor(pts[start:start + chunk]), np.float32)
    out.colors = np.clip(colors, 0.0, 1.0)
    return out
