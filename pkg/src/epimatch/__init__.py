"""Descriptor-free multi-view instance matching and reconstruction.

Instance masks from calibrated views are linked by how well their epipolar
bands intersect each other, grouped by symmetric NMF, and each group is
back-projected into a voxel volume.
"""

from .errors import EpimatchError
from .evaluation import chamfer, cluster_count_mae, normalize_error, purity
from .geometry import (
    CameraView,
    FundamentalMatrix,
    Line2D,
    PixelSet,
    fundamental_from_poses,
)
from .matching import (
    EpipolarBand,
    MatchGraph,
    build_graph,
    edge_weight,
    epipolar_band,
    point_baseline_match,
)
from .reconstruction import (
    GridSpec,
    PointCloud,
    VoxelGrid,
    backproject_cluster,
    reconstruct_all,
)
from .refinement import EpipolarMap, Proposal, cluster_aware_nms, refine, ruzicka
from .scene import ClusterAssignment, InstanceMask, SceneManifest, load_scene
from .symnmf import SymnmfOptions, cluster_scene, select_k, symnmf

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "ClusterAssignment",
    "EpimatchError",
    "EpipolarBand",
    "EpipolarMap",
    "FundamentalMatrix",
    "GridSpec",
    "InstanceMask",
    "Line2D",
    "MatchGraph",
    "PixelSet",
    "PointCloud",
    "Proposal",
    "SceneManifest",
    "SymnmfOptions",
    "VoxelGrid",
    "backproject_cluster",
    "build_graph",
    "chamfer",
    "cluster_aware_nms",
    "cluster_count_mae",
    "cluster_scene",
    "edge_weight",
    "epipolar_band",
    "fundamental_from_poses",
    "load_scene",
    "normalize_error",
    "point_baseline_match",
    "purity",
    "reconstruct_all",
    "refine",
    "ruzicka",
    "select_k",
    "symnmf",
]
