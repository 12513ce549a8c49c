"""Graph clustering by symmetric nonnegative matrix factorization, W ~ H H^T.

The cluster of a node is the column holding the largest entry of its row of
H. The number of clusters is chosen as the one whose clusters have the most
even sizes.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AsymmetricInput, InvalidK
from .scene import ClusterAssignment

logger = logging.getLogger(__name__)

EPS = 1e-12
DAMPING = 0.5
# halvings of the damping factor tried when a step would raise the objective
_MAX_BACKTRACK = 8


@dataclass(frozen=True)
class SymnmfOptions:
    max_iters: int = 300
    rel_tol: float = 1e-5
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 1 or not self.rel_tol > 0:
            raise ValueError("need max_iters >= 1, restarts >= 1 and rel_tol > 0")


@dataclass(frozen=True, eq=False)
class SymnmfResult:
    H: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    restart: int = 0


def _check_input(W: np.ndarray, k: int) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("W must be square")
    n = W.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} outside [1, {n}]")
    if n and np.abs(W - W.T).max() > 1e-9:
        raise AsymmetricInput("W is not symmetric")
    if n and W.min() < 0:
        raise ValueError("W must be nonnegative")
    if not np.all(np.isfinite(W)):
        raise ValueError("W must be finite")
    return W


def initial_factor(W: np.ndarray, k: int, seed: int, restart: int, node_keys=None) -> np.ndarray:
    """Random start with entries in ``(0, 2 sqrt(mean(W) / k)]``.

    Row ``r`` is row ``node_keys[r]`` of a table drawn from a generator keyed on
    ``(seed, k, restart)``, so permuting nodes together with their keys permutes
    the start identically.
    """
    n = W.shape[0]
    keys = np.arange(n) if node_keys is None else np.asarray(node_keys, dtype=np.int64)
    rng = np.random.default_rng([int(seed), int(k), int(restart)])
    table = 1.0 - rng.random((n, k))
    return 2.0 * np.sqrt(W.mean() / k) * table[keys]


def _objective(Wsq: float, H: np.ndarray, WH: np.ndarray, HtH: np.ndarray) -> float:
    # ||W - HH^T||^2 = ||W||^2 - 2 tr(H^T W H) + ||H^T H||^2
    return max(Wsq - 2.0 * float(np.sum(H * WH)) + float(np.sum(HtH * HtH)), 0.0)


def _run(W: np.ndarray, H: np.ndarray, opts: SymnmfOptions, restart: int, keep_trace: bool) -> SymnmfResult:
    Wsq = float(np.sum(W * W))
    WH = W @ H
    HtH = H.T @ H
    obj = _objective(Wsq, H, WH, HtH)
    trace = [obj]
    converged = False
    it = 0
    while it < opts.max_iters:
        if obj == 0.0:
            converged = True
            break
        ratio = WH / np.maximum(H @ HtH, EPS)
        beta = DAMPING
        for _ in range(_MAX_BACKTRACK + 1):
            H_new = H * ((1.0 - beta) + beta * ratio)
            WH_new = W @ H_new
            HtH_new = H_new.T @ H_new
            obj_new = _objective(Wsq, H_new, WH_new, HtH_new)
            if obj_new <= obj:
                break
            beta /= 2.0
        else:
            # no descent along the damped direction: treat as a stationary point
            converged = True
            break
        it += 1
        rel = (obj - obj_new) / obj
        H, WH, HtH, obj = H_new, WH_new, HtH_new, obj_new
        trace.append(obj)
        if rel < opts.rel_tol:
            converged = True
            break
    return SymnmfResult(H, obj, it, converged, trace if keep_trace else [], restart)


def symnmf(
    W,
    k: int,
    opts: SymnmfOptions = SymnmfOptions(),
    node_keys=None,
    keep_trace: bool = False,
    threads: int | None = 1,
) -> SymnmfResult:
    """Best of ``opts.restarts`` damped multiplicative-update runs.

    Each run iterates ``H <- H * (1/2 + 1/2 (W H) / (H H^T H))`` until the
    relative decrease of ``||W - H H^T||_F^2`` drops below ``opts.rel_tol`` or
    ``opts.max_iters`` is reached. A step that would raise the objective is
    retried with a halved damping factor, so every recorded trace is
    non-increasing.

    Raises:
        InvalidK: if ``k`` is outside ``[1, n]``.
        AsymmetricInput: if ``max |W - W^T| > 1e-9``.
    """
    W = _check_input(W, k)
    n = W.shape[0]
    if not np.any(W > 0):
        return SymnmfResult(np.zeros((n, k)), 0.0, 0, True, [0.0] if keep_trace else [])

    def one(r: int) -> SymnmfResult:
        return _run(W, initial_factor(W, k, opts.seed, r, node_keys), opts, r, keep_trace)

    workers = threads or os.cpu_count() or 1
    if workers == 1 or opts.restarts == 1:
        results = [one(r) for r in range(opts.restarts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(opts.restarts)))
    # strict < keeps the lowest restart index on ties
    best = results[0]
    for res in results[1:]:
        if res.objective < best.objective:
            best = res
    return best


def argmax_labels(H: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column."""
    H = np.asarray(H)
    if H.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(H, axis=1).astype(np.int64)


def assign_clusters(H) -> ClusterAssignment:
    """Cluster id of each node from the largest entry of its row, with empty
    clusters compacted away. All-zero rows land in column 0."""
    H = np.asarray(H)
    zero_rows = np.flatnonzero(~np.any(H > 0, axis=1)) if H.size else np.zeros(0, dtype=np.int64)
    if zero_rows.size:
        logger.warning("%d node(s) have an all-zero row in H; assigned to column 0", zero_rows.size)
    return ClusterAssignment.from_labels(argmax_labels(H))


def size_std(labels: np.ndarray, k: int) -> float:
    """Population standard deviation of the sizes of exactly ``k`` clusters."""
    return float(np.std(np.bincount(labels, minlength=k)))


@dataclass(frozen=True, eq=False)
class KSelection:
    k_opt: int
    assignment: ClusterAssignment
    result: SymnmfResult
    size_std: float
    table: list  # per tried k: {"k", "objective", "size_std", "sizes"}
    stopped_early: bool = False


def select_k(
    W,
    k_range,
    opts: SymnmfOptions = SymnmfOptions(),
    node_keys=None,
    threads: int | None = 1,
) -> KSelection:
    """Pick the number of clusters whose cluster sizes have the smallest spread.

    ``k_range`` is scanned in increasing order; ties keep the smaller ``k``. The
    scan stops at the first ``k`` with zero spread since no later ``k`` can beat it.
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    W = np.asarray(W, dtype=np.float64)
    best = None
    table = []
    stopped = False
    for k in ks:
        res = symnmf(W, k, opts, node_keys=node_keys, threads=threads)
        labels = argmax_labels(res.H)
        std = size_std(labels, k)
        sizes = np.bincount(labels, minlength=k)
        table.append({"k": k, "objective": res.objective, "size_std": std, "sizes": sizes.tolist()})
        if best is None or std < best[1]:
            best = (k, std, res)
        if std == 0.0 and k != ks[-1]:
            stopped = True
            break
    k_opt, std, res = best
    return KSelection(k_opt, assign_clusters(res.H), res, std, table, stopped)


def default_k_range(max_per_view: int, n_nodes: int) -> range:
    """From the largest per-view instance count up to ``min(n, 3 * that + 8)``."""
    lo = max(1, max_per_view)
    hi = min(n_nodes, 3 * lo + 8)
    return range(lo, max(lo, hi) + 1)


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    assignment: ClusterAssignment
    k_opt: int
    objective: float
    size_std: float
    table: list

    def diagnostics(self) -> dict:
        return {
            "k_opt": self.k_opt,
            "n_clusters": self.assignment.k,
            "objective": self.objective,
            "size_std": self.size_std,
            "per_k": self.table,
        }


def cluster_scene(
    graph,
    opts: SymnmfOptions = SymnmfOptions(),
    k: int | None = None,
    k_range=None,
    threads: int | None = 1,
) -> ClusteringResult:
    """Cluster a :class:`~epimatch.matching.MatchGraph`.

    Args:
        graph: the match graph.
        opts: solver options.
        k: fixed number of clusters (skips the search), or None for automatic.
        k_range: candidate cluster counts for the automatic search; defaults to
            :func:`default_k_range`.

    A graph without any positive weight carries no evidence, so every node
    becomes its own cluster.
    """
    n = graph.n
    if n == 0:
        return ClusteringResult(ClusterAssignment(np.zeros(0, dtype=np.int64)), 0, 0.0, 0.0, [])
    if not np.any(graph.W > 0):
        logger.info("match graph has no edges; every node is its own cluster")
        return ClusteringResult(ClusterAssignment(np.arange(n)), n, 0.0, 0.0, [])
    if k is not None:
        ks = [int(k)]
    elif k_range is not None:
        ks = list(k_range)
    else:
        ks = list(default_k_range(graph.scene.max_instances_per_view(), n))
    sel = select_k(graph.W, ks, opts, node_keys=np.arange(n), threads=threads)
    return ClusteringResult(sel.assignment, sel.k_opt, sel.result.objective, sel.size_std, sel.table)
