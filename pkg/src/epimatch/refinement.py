"""Multi-view refinement of overlapping region proposals.

Instance clusters are projected into each view as epipolar maps, every
proposal takes the cluster whose map it resembles most (Ruzicka similarity),
and non-maximum suppression only compares proposals that share a cluster.
Matching and suppression alternate for a fixed number of rounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, EmptyCluster
from .geometry import CameraView, PixelSet, fundamental_from_poses
from .matching import (
    DEFAULT_SAMPLES,
    DEFAULT_THICKNESS,
    band_lines,
    build_graph,
    coverage_bitmap,
    node_seed,
)
from .scene import ClusterAssignment, InstanceMask, SceneManifest
from .symnmf import SymnmfOptions, cluster_scene

logger = logging.getLogger(__name__)

NMS_INIT_THRESHOLD = 0.7
NMS_THRESHOLD = 0.3
DEFAULT_ROUNDS = 2


@dataclass(frozen=True, eq=False)
class EpipolarMap:
    view_id: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("epipolar map values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class Proposal:
    view_id: int
    mask: PixelSet
    score: float
    cluster_id: int | None = None

    def __post_init__(self):
        if self.mask.count == 0:
            raise ValueError("proposal mask is empty")

    def with_cluster(self, cluster_id: int | None) -> "Proposal":
        return replace(self, cluster_id=cluster_id)

    @classmethod
    def from_instance(cls, m: InstanceMask) -> "Proposal":
        return cls(m.view_id, m.region, 1.0 if m.score is None else float(m.score))


class BandCache:
    """Band coverage bitmaps of scene nodes, keyed by (node key, target view)."""

    def __init__(self, cameras, n_samples=DEFAULT_SAMPLES, thickness=DEFAULT_THICKNESS, seed=0):
        self.cameras = cameras if isinstance(cameras, dict) else {c.view_id: c for c in cameras}
        self.n_samples = n_samples
        self.thickness = thickness
        self.seed = seed
        self._F = {}
        self._cov = {}

    def coverage(self, member: InstanceMask, target_view: int) -> np.ndarray:
        key = (member.key, target_view)
        cov = self._cov.get(key)
        if cov is None:
            pair = (member.view_id, target_view)
            if pair not in self._F:
                self._F[pair] = fundamental_from_poses(self.cameras[member.view_id], self.cameras[target_view])
            lines = band_lines(member.region, self._F[pair], self.n_samples, node_seed(self.seed, *member.key))
            tgt = self.cameras[target_view]
            cov = coverage_bitmap(lines, self.thickness, tgt.width, tgt.height)
            self._cov[key] = cov
        return cov


def epipolar_map(
    cluster_members,
    target: CameraView,
    cameras,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed: int = 0,
    include_target_members: bool = False,
    cache: BandCache | None = None,
) -> EpipolarMap:
    """Per-pixel fraction of cluster members whose band covers the pixel.

    Members that live in the target view are left out (and out of the
    denominator) unless ``include_target_members`` is set; a member's own
    region there would otherwise confirm itself. If no member contributes, the
    map is all zeros.

    Raises:
        EmptyCluster: if ``cluster_members`` is empty.
    """
    members = list(cluster_members)
    if not members:
        raise EmptyCluster("cluster has no members")
    if cache is None:
        cache = BandCache(cameras, n_samples, thickness, seed)
    acc = np.zeros((target.height, target.width))
    used = 0
    for m in members:
        if m.view_id == target.view_id:
            if include_target_members:
                acc += m.region.mask
                used += 1
            continue
        acc += cache.coverage(m, target.view_id)
        used += 1
    if used:
        acc /= used
    return EpipolarMap(target.view_id, acc)


def ruzicka(a, b) -> float:
    """Sum of elementwise minima over sum of maxima; 0 when both maps are all zero."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"map shapes differ: {a.shape} vs {b.shape}")
    den = float(np.maximum(a, b).sum())
    if den == 0.0:
        return 0.0
    return float(np.minimum(a, b).sum()) / den


def mask_iou(a: PixelSet, b: PixelSet) -> float:
    inter = np.count_nonzero(a.mask & b.mask)
    union = np.count_nonzero(a.mask | b.mask)
    return inter / union if union else 0.0


def _clusters(assignment: ClusterAssignment, scene: SceneManifest) -> list[list[InstanceMask]]:
    return [[scene.masks[i] for i in assignment.members(c)] for c in range(assignment.k)]


def reassign_cluster_ids(
    proposals,
    assignment: ClusterAssignment,
    scene: SceneManifest,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed: int = 0,
    cache: BandCache | None = None,
) -> list[Proposal]:
    """Give each proposal the cluster whose epipolar map in its view is most
    similar to it (lowest id on ties). Proposals with zero similarity to every
    map come back unmatched (``cluster_id=None``)."""
    clusters = _clusters(assignment, scene)
    cache = cache or BandCache(scene.cameras, n_samples, thickness, seed)
    maps: dict[tuple[int, int], EpipolarMap] = {}
    debug = logger.isEnabledFor(logging.DEBUG)
    out = []
    for p in proposals:
        cam = scene.camera(p.view_id)
        binary = p.mask.mask.astype(np.float64)
        sims = np.zeros(len(clusters))
        for c, members in enumerate(clusters):
            key = (p.view_id, c)
            if key not in maps:
                maps[key] = epipolar_map(members, cam, scene.cameras, cache=cache)
            sims[c] = ruzicka(maps[key], binary)
            if debug:
                alt = epipolar_map(members, cam, scene.cameras, include_target_members=True, cache=cache)
                logger.debug(
                    "view %d cluster %d: similarity %.4f (target-view members excluded) vs %.4f (included)",
                    p.view_id, c, sims[c], ruzicka(alt, binary),
                )
        if len(sims) == 0 or sims.max() == 0.0:
            out.append(p.with_cluster(None))
        else:
            out.append(p.with_cluster(int(np.argmax(sims))))
    return out


def _greedy_nms(props: list[Proposal], idx: list[int], iou_threshold: float) -> list[int]:
    order = sorted(idx, key=lambda i: -props[i].score)  # stable: input order breaks score ties
    kept: list[int] = []
    for i in order:
        if all(mask_iou(props[i].mask, props[j].mask) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def standard_nms(proposals, iou_threshold: float) -> list[Proposal]:
    """Greedy score-ordered mask NMS within each view; input order is preserved."""
    props = list(proposals)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(props):
        groups.setdefault(p.view_id, []).append(i)
    keep = set()
    for idx in groups.values():
        keep.update(_greedy_nms(props, idx, iou_threshold))
    return [p for i, p in enumerate(props) if i in keep]


def cluster_aware_nms(proposals, iou_threshold: float = NMS_THRESHOLD) -> list[Proposal]:
    """Greedy mask NMS run separately for every (view, cluster id) group.

    Proposals of different clusters never suppress each other; unmatched
    proposals form one extra group per view. Input order is preserved.
    """
    props = list(proposals)
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(props):
        groups.setdefault((p.view_id, p.cluster_id), []).append(i)
    keep = set()
    for idx in groups.values():
        keep.update(_greedy_nms(props, idx, iou_threshold))
    return [p for i, p in enumerate(props) if i in keep]


def proposals_to_scene(cameras, proposals) -> SceneManifest:
    """Scene whose masks are ``proposals``, numbered 1.. within each view in list order."""
    counters: dict[int, int] = {}
    masks = []
    for p in proposals:
        counters[p.view_id] = counters.get(p.view_id, 0) + 1
        masks.append(InstanceMask(p.view_id, counters[p.view_id], p.mask, p.score))
    return SceneManifest(tuple(cameras), tuple(masks))


@dataclass(frozen=True, eq=False)
class RefineResult:
    scene: SceneManifest
    assignment: ClusterAssignment
    proposals: list  # kept proposals, aligned with scene.masks


def _final_assignment(kept: list[Proposal]) -> ClusterAssignment:
    ids = [p.cluster_id for p in kept]
    next_id = max((i for i in ids if i is not None), default=-1) + 1
    labels = []
    for i in ids:
        if i is None:
            labels.append(next_id)
            next_id += 1
        else:
            labels.append(i)
    return ClusterAssignment.from_labels(labels)


def refine(
    cameras,
    proposals,
    rounds: int = DEFAULT_ROUNDS,
    nms_init: float = NMS_INIT_THRESHOLD,
    nms: float = NMS_THRESHOLD,
    n_samples: int = DEFAULT_SAMPLES,
    thickness: float = DEFAULT_THICKNESS,
    seed: int = 0,
    opts: SymnmfOptions | None = None,
    k: int | None = None,
    threads: int | None = 1,
) -> RefineResult:
    """Alternate region matching and cluster-aware NMS over a proposal pool.

    The pool is the input after per-view NMS at ``nms_init``; the starting
    instance set is the pool after plain NMS at ``nms``. Each round clusters
    the current instances, reassigns cluster ids to the whole pool and keeps
    the cluster-aware NMS survivors.

    Returns:
        The final instances as a scene, their cluster assignment (unmatched
        proposals become singleton clusters) and the kept proposals.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    cameras = tuple(getattr(cameras, "cameras", cameras))
    props = [p if isinstance(p, Proposal) else Proposal.from_instance(p) for p in proposals]
    pool = [p.with_cluster(None) for p in standard_nms(props, nms_init)]
    kept = standard_nms(pool, nms)
    opts = opts or SymnmfOptions(seed=seed)
    cache = BandCache(cameras, n_samples, thickness, seed)
    for r in range(rounds):
        current = proposals_to_scene(cameras, kept)
        graph = build_graph(current, n_samples, thickness, seed, threads)
        clustering = cluster_scene(graph, opts, k=k, threads=threads)
        # band cache keys use instance indices, which are renumbered every round
        cache = BandCache(cameras, n_samples, thickness, seed)
        pool = reassign_cluster_ids(pool, clustering.assignment, current, n_samples, thickness, seed, cache)
        kept = cluster_aware_nms(pool, nms)
        logger.info("refine round %d: %d clusters, %d of %d proposals kept", r, clustering.assignment.k, len(kept), len(pool))
    final_scene = proposals_to_scene(cameras, kept)
    return RefineResult(final_scene, _final_assignment(kept), kept)
