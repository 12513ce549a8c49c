"""Matching purity, cluster-count error and bidirectional Chamfer distance."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, NodeMismatch


def purity(est, gt) -> float:
    """Fraction of nodes whose estimated cluster's majority ground-truth label
    equals their own.

    Singleton clusters always score 1, so report :func:`cluster_count_mae`
    alongside.

    Args:
        est, gt: :class:`~epimatch.scene.ClusterAssignment` objects or label
            arrays over the same nodes.
    """
    e = np.asarray(getattr(est, "labels", est), dtype=np.int64)
    g = np.asarray(getattr(gt, "labels", gt), dtype=np.int64)
    if e.shape != g.shape:
        raise NodeMismatch(f"estimated and ground-truth labels cover {e.size} vs {g.size} nodes")
    if e.size == 0:
        raise NodeMismatch("no nodes to evaluate")
    _, e = np.unique(e, return_inverse=True)
    _, g = np.unique(g, return_inverse=True)
    table = np.zeros((e.max() + 1, g.max() + 1), dtype=np.int64)
    np.add.at(table, (e, g), 1)
    return float(table.max(axis=1).sum() / e.size)


def purity_by_key(est: dict, gt: dict) -> float:
    """:func:`purity` over two ``{(view_id, instance_index): cluster_id}`` maps."""
    if set(est) != set(gt):
        raise NodeMismatch("estimated and ground-truth files list different nodes")
    keys = sorted(est)
    return purity([est[k] for k in keys], [gt[k] for k in keys])


def cluster_count_mae(est_counts, gt_counts) -> float:
    est = np.asarray(est_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if est.shape != gt.shape or est.size == 0:
        raise ValueError("need two non-empty lists of equal length")
    return float(np.mean(np.abs(est - gt)))


def _points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)


def chamfer(I, T) -> float:
    """Mean of the two mean nearest-neighbor distances between point sets.

    Raises:
        EmptyCloud: if either cloud has no points.
    """
    a, b = _points(I), _points(T)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def normalize_error(d: float, scale: float) -> float:
    if not scale > 0:
        raise ValueError("normalization scale must be positive")
    return d / scale
