"""Differentiable sparse-voxel scene engine.

Jointly optimizes appearance, density, language-feature and confidence fields
of a 3D scene from posed images plus teacher feature/depth maps, and serves
rendering, open-vocabulary query and mesh extraction from the trained grid.
"""

__version__ = "0.1.0"

from .grid import GridConfig, OctreeAddress, SparseVoxelGrid, VoxelHit, VoxelPayload, voxel_geometry

__all__ = [
    "GridConfig",
    "OctreeAddress",
    "SparseVoxelGrid",
    "VoxelHit",
    "VoxelPayload",
    "voxel_geometry",
    "__version__",
]
