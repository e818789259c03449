from .shapes import Primitive, ShapeSpec, sdf_eval, sdf_gradient
from .labels import tsdf_label, occupancy_label
from .sampling import (
    SurfaceCloud,
    FieldSamples,
    SurfaceSamplingError,
    sample_surface,
    sample_volume,
    farthest_point_sampling,
)
from .mesh import (
    TriMesh,
    evaluate_on_grid,
    grid_coords,
    marching_cubes,
    sample_mesh_surface,
    mesh_edge_counts,
    euler_characteristic,
    save_ply_mesh,
    load_ply_mesh,
    save_ply_cloud,
    save_obj_mesh,
    save_grid,
    load_grid,
)
from .metrics import chamfer_distance, f_score, normal_consistency

__all__ = [
    "Primitive",
    "ShapeSpec",
    "sdf_eval",
    "sdf_gradient",
    "tsdf_label",
    "occupancy_label",
    "SurfaceCloud",
    "FieldSamples",
    "SurfaceSamplingError",
    "sample_surface",
    "sample_volume",
    "farthest_point_sampling",
    "TriMesh",
    "evaluate_on_grid",
    "grid_coords",
    "marching_cubes",
    "sample_mesh_surface",
    "mesh_edge_counts",
    "euler_characteristic",
    "save_ply_mesh",
    "load_ply_mesh",
    "save_ply_cloud",
    "save_obj_mesh",
    "save_grid",
    "load_grid",
    "chamfer_distance",
    "f_score",
    "normal_consistency",
]
