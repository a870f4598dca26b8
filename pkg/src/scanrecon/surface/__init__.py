"""Normals, reconstruction and mesh export."""

from scanrecon.surface.mesh import TriangleMesh, WatertightReport, check_watertight
from scanrecon.surface.meshio import export_mesh, read_mesh, read_ply, read_stl, write_ply, write_stl
from scanrecon.surface.normals import OrientedCloud, estimate_normals
from scanrecon.surface.reconstruct import (marching_tetrahedra, reconstruct_builtin, reconstruct_external,
                                           render_command)

__all__ = [
    "TriangleMesh", "WatertightReport", "check_watertight", "export_mesh", "read_mesh",
    "read_ply", "read_stl", "write_ply", "write_stl", "OrientedCloud", "estimate_normals",
    "reconstruct_builtin", "reconstruct_external", "marching_tetrahedra", "render_command",
]
