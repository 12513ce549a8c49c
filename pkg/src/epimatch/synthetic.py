"""Analytic ground-truth scenes: spheres seen by an elevated ring of cameras.

Sphere silhouettes are exact conics, so every mask, correspondence and surface
point is known in closed form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import PlacementFailure
from .geometry import CameraView, PixelSet
from .reconstruction import GridSpec, PointCloud, save_grid, write_ply
from .scene import (
    ClusterAssignment,
    InstanceMask,
    SceneManifest,
    save_assignment,
    save_scene,
)

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
PLACEMENT_BUDGET = 10_000
RESTART_AFTER = 200


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    scene: SceneManifest
    gt: ClusterAssignment
    gt_clouds: list
    grid: GridSpec
    scale: float
    centers: np.ndarray
    radii: np.ndarray


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``
    (x right, y down, z forward)."""
    c = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    return R, -R @ c


def camera_ring(
    n_views: int,
    image_size: int,
    distance: float = 4.0,
    elevation_deg: float = 45.0,
    fit_radius: float = 1.8,
    fill: float = 0.9,
) -> list[CameraView]:
    """Equiangular ring of cameras looking at the origin.

    The focal length is chosen so that a ball of ``fit_radius`` around the origin
    fills ``fill`` of the half-width. With the default elevation every epipole
    lies outside the image.
    """
    half_angle = np.arcsin(fit_radius / distance)
    f = fill * (image_size / 2.0) / np.tan(half_angle)
    K = np.array([[f, 0.0, image_size / 2.0], [0.0, f, image_size / 2.0], [0.0, 0.0, 1.0]])
    el = np.deg2rad(elevation_deg)
    cams = []
    for v in range(n_views):
        az = 2.0 * np.pi * v / n_views
        c = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R, t = look_at(c)
        cams.append(CameraView(v, K, R, t, image_size, image_size))
    return cams


def sphere_conic(cam: CameraView, center, radius: float) -> np.ndarray:
    """Symmetric 3x3 ``Q`` with ``p~^T Q p~ >= 0`` exactly on the sphere's image."""
    Sc = cam.R @ np.asarray(center, dtype=np.float64) + cam.t
    Kinv = np.linalg.inv(cam.K)
    M = np.outer(Sc, Sc) - (Sc @ Sc - radius**2) * np.eye(3)
    return Kinv.T @ M @ Kinv


def conic_area(Q: np.ndarray) -> float:
    """Area of the ellipse ``{p : p~^T Q p~ >= 0}`` (Q with negative-definite 2x2 block)."""
    M = -Q
    A = M[:2, :2]
    return float(np.pi * (-np.linalg.det(M)) / np.linalg.det(A) ** 1.5)


def render_sphere(cam: CameraView, center, radius: float) -> np.ndarray:
    """Pixels whose center ray hits the sphere (exact conic test)."""
    Sc = cam.R @ np.asarray(center, dtype=np.float64) + cam.t
    Q = sphere_conic(cam, center, radius)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    p = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs, dtype=np.float64)], axis=-1)
    val = np.einsum("hwi,ij,hwj->hw", p, Q, p)
    d = p @ np.linalg.inv(cam.K).T
    return (val >= 0) & (d @ Sc > 0)


def fibonacci_sphere(center, radius: float, n: int = 2048) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = GOLDEN_ANGLE * np.arange(n)
    unit = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return np.asarray(center, dtype=np.float64) + radius * unit


def _angular_radius(cam_center, center, radius):
    d = np.linalg.norm(center - cam_center, axis=-1)
    return np.arcsin(np.clip(radius / d, 0.0, 1.0))


def _place_spheres(rng, n_objects, cams, radius_range, box, margin_px):
    centers_cam = np.array([c.center for c in cams])
    f = cams[0].K[0, 0]
    margin = margin_px / f
    limit = np.arctan((cams[0].width / 2.0 - margin_px) / f)
    fwd = np.array([c.R[2] for c in cams])
    centers, radii = [], []
    attempts = stuck = 0
    while len(centers) < n_objects:
        attempts += 1
        stuck += 1
        if attempts > PLACEMENT_BUDGET:
            raise PlacementFailure(
                f"could not place {n_objects} spheres within {PLACEMENT_BUDGET} attempts"
            )
        if stuck > RESTART_AFTER:
            # early spheres can block the remaining space; start over
            centers, radii = [], []
            stuck = 0
        c = rng.uniform(-1.0, 1.0, size=3) * box
        r = rng.uniform(*radius_range)
        dirs = c - centers_cam
        dist = np.linalg.norm(dirs, axis=1)
        if np.any(dist <= r * 1.5):
            continue
        dirs /= dist[:, None]
        ang_r = np.arcsin(r / dist)
        # silhouette inside the image (conservative: inside the inscribed cone)
        off_axis = np.arccos(np.clip(np.einsum("ij,ij->i", dirs, fwd), -1.0, 1.0))
        if np.any(off_axis + ang_r > limit):
            continue
        ok = True
        for c2, r2 in zip(centers, radii):
            d2 = c2 - centers_cam
            n2 = np.linalg.norm(d2, axis=1)
            cosang = np.einsum("ij,ij->i", dirs, d2 / n2[:, None])
            sep = np.arccos(np.clip(cosang, -1.0, 1.0))
            if np.any(sep <= ang_r + np.arcsin(r2 / n2) + margin):
                ok = False
                break
        if ok:
            centers.append(c)
            radii.append(r)
            stuck = 0
    return np.array(centers), np.array(radii)


def generate(
    n_objects: int,
    n_views: int,
    image_size: int = 256,
    radius_range=(0.075, 0.13),
    seed: int = 0,
    box=(1.0, 1.0, 0.8),
    grid_dims=(128, 128, 128),
    margin_px: float = 2.0,
    cloud_points: int = 2048,
) -> SyntheticScene:
    """Spheres in a box, each fully visible with a disjoint silhouette in every view.

    Sphere ``m`` appears as instance ``m + 1`` in every view and has ground-truth
    cluster ``m``.

    Raises:
        PlacementFailure: if the spheres cannot be placed within the attempt budget.
    """
    if n_objects < 1 or n_views < 2:
        raise ValueError("need at least one object and two views")
    rng = np.random.default_rng([int(seed), 0x5CE9E])
    cams = camera_ring(n_views, image_size)
    centers, radii = _place_spheres(rng, n_objects, cams, radius_range, np.asarray(box), margin_px)
    return scene_from_spheres(cams, centers, radii, grid_dims, cloud_points)


def scene_from_spheres(cameras, centers, radii, grid_dims=(128, 128, 128), cloud_points: int = 2048) -> SyntheticScene:
    """Render given spheres in ``cameras``; sphere ``m`` becomes instance ``m + 1``.

    Spheres whose silhouette is empty in a view are left out of that view. No
    overlap check is made.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64)
    masks = []
    for cam in cameras:
        for m, (c, r) in enumerate(zip(centers, radii)):
            bitmap = render_sphere(cam, c, r)
            if bitmap.any():
                masks.append(InstanceMask(cam.view_id, m + 1, PixelSet(bitmap)))
    scene = SceneManifest(tuple(cameras), tuple(masks))
    gt = ClusterAssignment.from_labels([m.instance_index - 1 for m in scene.masks])
    clouds = [PointCloud(fibonacci_sphere(c, r, cloud_points)) for c, r in zip(centers, radii)]
    pad = 0.5 * radii.max()
    grid = GridSpec.bounding((centers - radii[:, None]).min(0) - pad, (centers + radii[:, None]).max(0) + pad, grid_dims)
    return SyntheticScene(scene, gt, clouds, grid, float(2.0 * radii.mean()), centers, radii)


def gt_for_scene(scene: SceneManifest) -> ClusterAssignment:
    """Ground truth for any subset of a generated scene (instance ``m`` is sphere ``m - 1``)."""
    return ClusterAssignment.from_labels([m.instance_index - 1 for m in scene.masks])


def occlusion_variant(scene: SceneManifest, drop_rate: float, corruption: int, seed: int) -> SceneManifest:
    """Randomly drop masks and erode or dilate the survivors.

    Each (view, instance) mask is dropped with probability ``drop_rate``; an
    instance left with fewer than two views gets dropped views restored at
    random until it has two. Every surviving mask is then eroded or dilated
    (coin flip) by ``corruption`` pixels; an erosion that would empty a mask is
    skipped.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError("drop_rate must lie in [0, 1]")
    rng = np.random.default_rng([int(seed), 0x0CC1])
    masks = list(scene.masks)
    keep = rng.random(len(masks)) >= drop_rate
    by_instance: dict[int, list[int]] = {}
    for i, m in enumerate(masks):
        by_instance.setdefault(m.instance_index, []).append(i)
    for inst in sorted(by_instance):
        idx = by_instance[inst]
        need = min(2, len(idx)) - int(keep[idx].sum())
        if need > 0:
            dropped = [i for i in idx if not keep[i]]
            for i in rng.choice(dropped, size=need, replace=False):
                keep[i] = True
    dilate = rng.random(len(masks)) < 0.5
    out = []
    for i, m in enumerate(masks):
        if not keep[i]:
            continue
        bitmap = m.region.mask
        if corruption > 0:
            op = ndimage.binary_dilation if dilate[i] else ndimage.binary_erosion
            changed = op(bitmap, iterations=int(corruption))
            if changed.any():
                bitmap = changed
            else:
                logger.info("erosion would empty mask %s; kept as is", m.key)
        out.append(InstanceMask(m.view_id, m.instance_index, PixelSet(bitmap), m.score))
    return scene.with_masks(out)


def write_synthetic(synth: SyntheticScene, out_dir) -> None:
    """Write the scene plus ground truth in the standard on-disk layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(synth.scene, out / "cameras.json", out / "masks")
    save_assignment(synth.gt, synth.scene, out / "gt_assignment.json")
    for k, cloud in enumerate(synth.gt_clouds):
        write_ply(cloud, out / f"gt_cloud_{k}.ply")
    save_grid(synth.grid, out / "grid.json")
    (out / "scale.json").write_text(json.dumps({"scale": synth.scale}) + "\n")
