"""Instance-wise volumetric reconstruction by silhouette back-projection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGrid, EmptyCluster
from .geometry import projection_matrix
from .scene import ClusterAssignment, InstanceMask, SceneManifest

logger = logging.getLogger(__name__)

DEFAULT_DIMS = (128, 128, 128)
OCCUPANCY_THRESHOLD = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid; voxel ``(i, j, k)`` is centered at
    ``origin + voxel_size * (i + 0.5, j + 0.5, k + 0.5)``."""

    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int] = DEFAULT_DIMS

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise DegenerateGrid("origin and dims must have three entries")
        if not self.voxel_size > 0 or min(self.dims) <= 0:
            raise DegenerateGrid(f"invalid grid: voxel_size={self.voxel_size}, dims={self.dims}")
        if not np.all(np.isfinite(self.origin)):
            raise DegenerateGrid("grid origin must be finite")

    @classmethod
    def bounding(cls, lo, hi, dims=DEFAULT_DIMS) -> "GridSpec":
        """Cubic-voxel grid of ``dims`` covering the box ``[lo, hi]``, centered on it."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.asarray(dims)
        size = float(np.max((hi - lo) / dims))
        center = (lo + hi) / 2.0
        origin = center - size * dims / 2.0
        return cls(tuple(origin), size, tuple(int(d) for d in dims))

    def resized(self, dims) -> "GridSpec":
        """Same box at a different resolution."""
        lo = np.asarray(self.origin)
        return GridSpec.bounding(lo, lo + self.voxel_size * np.asarray(self.dims), dims)

    def centers(self) -> np.ndarray:
        """All voxel centers, ``(nx*ny*nz, 3)``, x fastest."""
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return np.asarray(self.origin) + self.voxel_size * (idx + 0.5)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), d["voxel_size"], tuple(d.get("dims", DEFAULT_DIMS)))


def load_grid(path) -> GridSpec:
    return GridSpec.from_dict(json.loads(Path(path).read_text()))


def save_grid(grid: GridSpec, path) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=1) + "\n")


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Per-voxel vote ratio in ``[0, 1]``; ``values[i, j, k]`` with ``i`` along x."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.spec.dims:
            raise DegenerateGrid(f"values shape {v.shape} does not match dims {self.spec.dims}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("voxel values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


def _voxel_pixels(cam, centers: np.ndarray) -> np.ndarray:
    """Flat pixel index hit by each voxel center, or -1 if behind the camera or
    outside the image."""
    P = projection_matrix(cam)
    x = centers @ P[:, :3].T + P[:, 3]
    z = x[:, 2]
    ok = z > 0
    safe = np.where(ok, z, 1.0)
    u = np.floor(x[:, 0] / safe)
    v = np.floor(x[:, 1] / safe)
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    flat = np.full(len(centers), -1, dtype=np.int64)
    flat[ok] = v[ok].astype(np.int64) * cam.width + u[ok].astype(np.int64)
    return flat


def _vote(members, scene_cameras, spec: GridSpec, pixel_cache=None) -> np.ndarray:
    centers = None
    votes = np.zeros(int(np.prod(spec.dims)))
    for m in members:
        flat = None if pixel_cache is None else pixel_cache.get(m.view_id)
        if flat is None:
            if centers is None:
                centers = spec.centers()
            flat = _voxel_pixels(scene_cameras[m.view_id], centers)
            if pixel_cache is not None:
                pixel_cache[m.view_id] = flat
        mask = m.region.mask.ravel()
        ok = flat >= 0
        votes[ok] += mask[flat[ok]]
    return votes


def _to_grid(spec: GridSpec, flat_values: np.ndarray) -> np.ndarray:
    nx, ny, nz = spec.dims
    return flat_values.reshape(nz, ny, nx).transpose(2, 1, 0)


def backproject_cluster(members, cameras, grid: GridSpec, _pixel_cache=None) -> VoxelGrid:
    """Fraction of ``members`` whose mask contains each voxel's projection.

    Args:
        members: the cluster's :class:`InstanceMask` objects.
        cameras: mapping view_id -> CameraView, or an iterable of cameras.
        grid: voxel grid to evaluate.

    Projections that fall outside the image or behind the camera count as 0
    while the denominator stays the member count.
    """
    members = list(members)
    if not members:
        raise EmptyCluster("cannot back-project an empty cluster")
    cams = cameras if isinstance(cameras, dict) else {c.view_id: c for c in cameras}
    for m in members:
        if m.view_id not in cams:
            raise KeyError(f"no camera for view {m.view_id}")
    votes = _vote(members, cams, grid, _pixel_cache)
    return VoxelGrid(grid, _to_grid(grid, votes / len(members)))


def binarize(grid: VoxelGrid, threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
    """Occupied iff value >= threshold."""
    return grid.values >= threshold


def voxels_to_points(occupancy: np.ndarray, spec: GridSpec) -> PointCloud:
    """One point at each occupied voxel center."""
    idx = np.argwhere(occupancy)
    return PointCloud(np.asarray(spec.origin) + spec.voxel_size * (idx + 0.5))


@dataclass(frozen=True, eq=False)
class ClusterReconstruction:
    grid: VoxelGrid
    cloud: PointCloud
    n_members: int

    @property
    def low_confidence(self) -> bool:
        return self.n_members < 2


def reconstruct_all(
    assignment: ClusterAssignment, scene: SceneManifest, grid: GridSpec, threshold: float = OCCUPANCY_THRESHOLD
) -> dict[int, ClusterReconstruction]:
    """Back-project every cluster independently using only its own members."""
    if len(assignment) != scene.n_nodes:
        raise ValueError("assignment does not match the scene")
    cams = {c.view_id: c for c in scene.cameras}
    cache: dict = {}
    out = {}
    for k in range(assignment.k):
        members = [scene.masks[i] for i in assignment.members(k)]
        vg = backproject_cluster(members, cams, grid, cache)
        cloud = voxels_to_points(binarize(vg, threshold), grid)
        if len(members) < 2:
            logger.warning("cluster %d has a single member; reconstruction is low confidence", k)
        out[k] = ClusterReconstruction(vg, cloud, len(members))
    return out


def union_masks_per_view(scene: SceneManifest) -> list[InstanceMask]:
    """One mask per view holding the union of all its instances (semantic silhouette)."""
    out = []
    for cam in scene.cameras:
        nodes = scene.nodes_in_view(cam.view_id)
        if not nodes:
            continue
        region = scene.masks[nodes[0]].region
        for n in nodes[1:]:
            region = region.union(scene.masks[n].region)
        out.append(InstanceMask(cam.view_id, 1, region))
    return out


# -- serialization ---------------------------------------------------------------------


def write_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with float64 ``x y z`` vertex properties."""
    pts = cloud.points
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "w") as f:
        f.write(header)
        if len(pts):
            np.savetxt(f, pts, fmt="%.17g")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY written by :func:`write_ply` (first three vertex properties)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path} is not a PLY file")
        n = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.split()
            if parts[:1] == ["format"] and parts[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            if parts[:1] == ["end_header"]:
                break
        if not n:
            return PointCloud(np.zeros((0, 3)))
        data = np.loadtxt(f, max_rows=n, ndmin=2)
    return PointCloud(data[:, :3])


def save_voxel_grid(grid: VoxelGrid, raw_path) -> None:
    """Raw little-endian float32 (x fastest) plus a ``.json`` sidecar."""
    raw_path = Path(raw_path)
    grid.values.astype("<f4").ravel(order="F").tofile(raw_path)
    meta = grid.spec.to_dict() | {"order": "x-fastest", "dtype": "float32-le"}
    raw_path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_voxel_grid(raw_path) -> VoxelGrid:
    raw_path = Path(raw_path)
    meta = json.loads(raw_path.with_suffix(".json").read_text())
    spec = GridSpec.from_dict(meta)
    flat = np.fromfile(raw_path, dtype="<f4").astype(np.float64)
    return VoxelGrid(spec, flat.reshape(spec.dims, order="F"))
