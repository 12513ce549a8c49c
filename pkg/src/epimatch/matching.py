"""Descriptor-free region matching with epipolar bands.

Each instance region is sampled, every sample is mapped to an epipolar line in
the other views, and the resulting band is scored against the target view's
regions by an area term times a line term. The symmetric match graph built from
these scores feeds the clustering stage.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import AllDegenerate, DegenerateLine, EmptyRegion
from .geometry import (
    CameraView,
    FundamentalMatrix,
    Line2D,
    PixelSet,
    center_distance,
    epipolar_line,
    epipolar_lines,
    fundamental_from_poses,
    raster_lines,
)
from .scene import SceneManifest

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 200
DEFAULT_THICKNESS = 2.0
# slack on the bounding-box prefilter; the exact per-pixel test decides membership
_BBOX_SLACK = 1e-6


def sample_region_points(region: PixelSet, n: int, seed) -> np.ndarray:
    """Pixel centers drawn uniformly with replacement from ``region``.

    If the region has at most ``n`` pixels every pixel is returned once, in
    row-major order. ``seed`` may be an int or a sequence of ints.

    Returns:
        ``(m, 2)`` array of ``(x, y)`` pixel-center coordinates.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    xs, ys = region.coords
    if xs.size == 0:
        raise EmptyRegion("cannot sample an empty region")
    if xs.size <= n:
        pick = np.arange(xs.size)
    else:
        pick = np.random.default_rng(seed).integers(0, xs.size, size=n)
    return np.column_stack([xs[pick] + 0.5, ys[pick] + 0.5])


@dataclass(frozen=True, eq=False)
class EpipolarBand:
    """Pencil of thick epipolar lines of one region drawn in a target view."""

    source_node: int | None
    target_view: int
    lines: np.ndarray  # (S, 3), each row normalized
    thickness: float
    coverage: PixelSet

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def line_objects(self) -> list[Line2D]:
        return [Line2D(*map(float, row)) for row in self.lines]


def band_lines(region: PixelSet, F: FundamentalMatrix, n_samples: int, seed) -> np.ndarray:
    """Sample ``region`` and return the non-degenerate epipolar lines, ``(S, 3)``."""
    pts = sample_region_points(region, n_samples, seed)
    lines, valid = epipolar_lines(F, pts)
    if not valid.any():
        raise AllDegenerate(f"all samples map to the epipole of view {F.source_view}")
    return lines[valid]


def coverage_bitmap(lines: np.ndarray, thickness: float, width: int, height: int) -> np.ndarray:
    _, xs, ys = raster_lines(lines, thickness, width, height)
    out = np.zeros((height, width), dtype=bool)
    out[ys, xs] = True
    return out


def epipolar_band(
    region: PixelSet,
    F: FundamentalMatrix,
    target: CameraView,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed=0,
    source_node: int | None = None,
) -> EpipolarBand:
    """Band of ``region`` (in ``F.source_view``) drawn in the ``target`` image."""
    if target.view_id != F.target_view:
        raise ValueError("target camera does not match F.target_view")
    lines = band_lines(region, F, n_samples, seed)
    lines.setflags(write=False)
    cov = coverage_bitmap(lines, thickness, target.width, target.height)
    return EpipolarBand(source_node, target.view_id, lines, float(thickness), PixelSet(cov))


def _line_pixel_hits(lines: np.ndarray, xs: np.ndarray, ys: np.ndarray, half: float) -> np.ndarray:
    """Boolean ``(S, P)`` matrix: pixel ``p`` lies on the thick raster of line ``s``."""
    return center_distance(lines[:, 0:1], lines[:, 1:2], lines[:, 2:3], xs[None, :], ys[None, :]) <= half


def _bbox_candidates(lines: np.ndarray, bbox, half: float) -> np.ndarray:
    """Lines that can come within ``half`` of a pixel center inside ``bbox``."""
    x0, y0, x1, y1 = bbox
    cx = np.array([x0, x1, x0, x1], dtype=np.float64) + 0.5
    cy = np.array([y0, y0, y1, y1], dtype=np.float64) + 0.5
    d = lines[:, 0:1] * cx + lines[:, 1:2] * cy + lines[:, 2:3]
    lim = half + _BBOX_SLACK
    return (d.min(axis=1) <= lim) & (d.max(axis=1) >= -lim)


def _region_counts(lines: np.ndarray, region: PixelSet, half: float, bbox=None) -> tuple[int, int]:
    """``(#pixels of region covered by any line, #lines touching region)``."""
    if bbox is None:
        bbox = region.bbox()
    cand = _bbox_candidates(lines, bbox, half)
    if not cand.any():
        return 0, 0
    xs, ys = region.coords
    hits = _line_pixel_hits(lines[cand], xs, ys, half)
    return int(hits.any(axis=0).sum()), int(hits.any(axis=1).sum())


def edge_weight(band: EpipolarBand, region: PixelSet) -> float:
    """Area fraction of ``region`` under the band times the fraction of band
    lines that touch ``region``. A line touches the region when its thick
    raster shares at least one pixel with it."""
    if region.count == 0:
        raise EmptyRegion("target region is empty")
    if band.n_lines == 0:
        raise AllDegenerate("band has no lines")
    covered = int(np.count_nonzero(band.coverage.mask & region.mask))
    _, touching = _region_counts(band.lines, region, band.thickness / 2.0)
    return (covered / region.count) * (touching / band.n_lines)


@dataclass(frozen=True, eq=False)
class MatchGraph:
    """Symmetric, nonnegative instance affinity matrix over all scene nodes."""

    W: np.ndarray
    scene: SceneManifest

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        n = self.scene.n_nodes
        if W.shape != (n, n):
            raise ValueError(f"W must be {n}x{n}")
        if not np.array_equal(W, W.T):
            raise ValueError("W must be exactly symmetric")
        if np.any(np.diag(W) != 0) or W.min(initial=0.0) < 0 or W.max(initial=0.0) > 1:
            raise ValueError("W must have a zero diagonal and entries in [0, 1]")
        views = self.scene.node_views()
        if np.any(W[views[:, None] == views[None, :]] != 0):
            raise ValueError("intra-view weights must be zero")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def n(self) -> int:
        return self.W.shape[0]


def _symmetrize(directed: np.ndarray) -> np.ndarray:
    W = (directed + directed.T) / 2.0
    np.fill_diagonal(W, 0.0)
    return W


def _pair_fundamentals(scene: SceneManifest) -> dict[tuple[int, int], FundamentalMatrix]:
    out = {}
    for ci in scene.cameras:
        for cj in scene.cameras:
            if ci.view_id == cj.view_id:
                continue
            F = fundamental_from_poses(ci, cj)
            out[(ci.view_id, cj.view_id)] = F
            e = F.target_epipole()
            if abs(e[2]) > 1e-12:
                ex, ey = e[0] / e[2], e[1] / e[2]
                if 0 <= ex < cj.width and 0 <= ey < cj.height:
                    logger.warning(
                        "epipole of view %d lies inside view %d at (%.1f, %.1f); bands become wedges",
                        ci.view_id, cj.view_id, ex, ey,
                    )
    return out


def node_seed(seed: int, view_id: int, instance_index: int) -> list[int]:
    """Per-node sampling seed; independent of node order and scheduling."""
    return [int(seed), int(view_id), int(instance_index)]


def directed_weights(
    scene: SceneManifest,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed: int = 0,
    threads: int | None = None,
) -> np.ndarray:
    """Matrix ``D[a, b]`` of band-to-region weights from node ``a`` into node ``b``.

    Same-view entries are zero. Only the target regions' pixels are tested, which
    yields the same counts as rasterizing the full band.
    """
    n = scene.n_nodes
    D = np.zeros((n, n))
    if n == 0:
        return D
    F = _pair_fundamentals(scene)
    half = thickness / 2.0
    by_view = {v: scene.nodes_in_view(v) for v in scene.view_ids}
    bboxes = [m.region.bbox() for m in scene.masks]

    def row(a: int) -> np.ndarray:
        src = scene.masks[a]
        out = np.zeros(n)
        pts = sample_region_points(src.region, n_samples, node_seed(seed, *src.key))
        for v, targets in by_view.items():
            if v == src.view_id or not targets:
                continue
            lines, valid = epipolar_lines(F[(src.view_id, v)], pts)
            lines = lines[valid]
            if len(lines) == 0:
                logger.warning("node %s: every sample degenerates in view %d; weights set to 0", src.key, v)
                continue
            for b in targets:
                region = scene.masks[b].region
                covered, touching = _region_counts(lines, region, half, bboxes[b])
                if covered:
                    out[b] = (covered / region.count) * (touching / len(lines))
        return out

    workers = threads or os.cpu_count() or 1
    if workers == 1:
        rows = [row(a) for a in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, range(n)))
    for a, r in enumerate(rows):
        D[a] = r
    return D


def build_graph(
    scene: SceneManifest,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed: int = 0,
    threads: int | None = None,
) -> MatchGraph:
    """Match graph whose weight is the mean of the two directed band weights."""
    if len(scene.cameras) < 2:
        raise ValueError("matching needs at least two views")
    D = directed_weights(scene, n_samples, thickness, seed, threads)
    return MatchGraph(_symmetrize(D), scene)


def point_baseline_match(scene: SceneManifest) -> MatchGraph:
    """Centroid baseline: each instance links, per other view, to the instance
    whose centroid is closest to the epipolar line of its own centroid."""
    if len(scene.cameras) < 2:
        raise ValueError("matching needs at least two views")
    n = scene.n_nodes
    D = np.zeros((n, n))
    F = _pair_fundamentals(scene)
    cents = np.array([m.region.centroid() for m in scene.masks]).reshape(-1, 2)
    by_view = {v: np.array(scene.nodes_in_view(v), dtype=np.int64) for v in scene.view_ids}
    for a, m in enumerate(scene.masks):
        for v, targets in by_view.items():
            if v == m.view_id or targets.size == 0:
                continue
            try:
                line = epipolar_line(F[(m.view_id, v)], cents[a])
            except DegenerateLine:
                logger.warning("centroid of %s is an epipole; skipped for view %d", m.key, v)
                continue
            d = line.distance(cents[targets, 0], cents[targets, 1])
            D[a, targets[int(np.argmin(d))]] = 1.0
    return MatchGraph(_symmetrize(D), scene)


# -- debug dumps --------------------------------------------------------------------


def save_weights_csv(graph: MatchGraph, path) -> None:
    np.savetxt(path, graph.W, delimiter=",", fmt="%.17g")


def save_band_overlay(band: EpipolarBand, regions, path) -> None:
    """RGB overlay: band coverage in red, target regions in green."""
    h, w = band.coverage.mask.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[band.coverage.mask, 0] = 255
    for r in regions:
        img[r.mask, 1] = 255
    Image.fromarray(img).save(path)
