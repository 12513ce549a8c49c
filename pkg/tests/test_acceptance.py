"""End-to-end acceptance gate; each test reports one pass/fail line."""

import filecmp
import time
from itertools import combinations

import numpy as np
import pytest
from conftest import brute_raster, random_camera, record
from nms_oracle import brute_force_nms
from test_refinement import occlusion_fixture

from epimatch.cli import main
from epimatch.evaluation import chamfer, purity
from epimatch.geometry import (
    PixelSet,
    epipolar_residual,
    fundamental_from_poses,
    project,
    projection_matrix,
    save_cameras,
)
from epimatch.matching import (
    band_lines,
    build_graph,
    directed_weights,
    node_seed,
    point_baseline_match,
)
from epimatch.reconstruction import binarize, reconstruct_all
from epimatch.refinement import Proposal, cluster_aware_nms, ruzicka
from epimatch.scene import InstanceMask, SceneManifest, save_proposals
from epimatch.symnmf import SymnmfOptions, assign_clusters, cluster_scene, symnmf
from epimatch.synthetic import (
    camera_ring,
    generate,
    gt_for_scene,
    occlusion_variant,
    scene_from_spheres,
)

pytestmark = pytest.mark.slow


def _match(scene, seed=0, threads=1):
    return cluster_scene(build_graph(scene, seed=seed, threads=threads), SymnmfOptions(seed=seed), threads=threads)


def test_01_clean_purity():
    worst, slowest, failures = 1.0, 0.0, []
    for n_obj in (4, 8, 16):
        for n_views in (3, 5, 10, 20):
            synth = generate(n_obj, n_views, seed=0)
            t0 = time.perf_counter()
            res = _match(synth.scene)
            elapsed = time.perf_counter() - t0
            s = purity(res.assignment, synth.gt)
            e_k = abs(res.assignment.k - n_obj)
            worst, slowest = min(worst, s), max(slowest, elapsed)
            if s < 0.99 or e_k != 0 or elapsed > 120:
                failures.append((n_obj, n_views, s, e_k, elapsed))
    ok = record(1, "clean-scene purity", not failures, f"min s_match {worst:.3f}, max runtime {slowest:.1f}s, failures {failures}")
    assert ok


def test_02_occlusion_degradation():
    rows, ordered, low = [], 0, []
    for seed in range(5):
        synth = generate(8, 10, seed=seed)
        scene = occlusion_variant(synth.scene, 0.3, 2, seed=seed)
        gt = gt_for_scene(scene)
        ours = purity(_match(scene, seed=seed).assignment, gt)
        base = purity(cluster_scene(point_baseline_match(scene), SymnmfOptions(seed=seed)).assignment, gt)
        rows.append(f"{ours:.3f}/{base:.3f}")
        ordered += ours >= base
        if ours < 0.80:
            low.append(seed)
    ok = record(2, "occlusion robustness", not low and ordered >= 4, f"s_match ours/point per seed {rows}; ordering held {ordered}/5")
    assert ok


def _blob(rng, size):
    ys, xs = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(size * 0.2, size * 0.8, 2)
        r = rng.uniform(1.5, size / 5)
        m |= (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    return m


def test_03_edge_weight_oracle():
    rng = np.random.default_rng(2024)
    worst, pairs = 0.0, 0
    for _ in range(20):
        size = int(rng.integers(20, 49))
        cams = (random_camera(rng, 0, size), random_camera(rng, 1, size))
        masks = [InstanceMask(v, i + 1, PixelSet(_blob(rng, size))) for v in (0, 1) for i in range(2)]
        scene = SceneManifest(cams, tuple(masks))
        thickness = float(rng.uniform(1.0, 3.0))
        D = directed_weights(scene, 200, thickness, seed=7, threads=1)
        for a, src in enumerate(scene.masks):
            F = fundamental_from_poses(cams[src.view_id], cams[1 - src.view_id])
            lines = band_lines(src.region, F, 200, node_seed(7, *src.key))
            rasters = [brute_raster(l, thickness, size, size) for l in lines]
            union = np.logical_or.reduce(rasters)
            for b in scene.nodes_in_view(1 - src.view_id):
                region = scene.masks[b].region.mask
                covered = np.count_nonzero(union & region)
                touching = sum(bool(np.any(r & region)) for r in rasters)
                expected = covered / region.sum() * touching / len(lines)
                worst = max(worst, abs(D[a, b] - expected))
                pairs += 1
    ok = record(3, "edge weight vs raster oracle", worst <= 1e-12, f"{pairs} weights over 20 fixtures, max |diff| {worst:.1e}")
    assert ok


def test_04_symnmf_soundness():
    rng = np.random.default_rng(99)
    bad_trace = negative = 0
    for i in range(100):
        n = int(rng.integers(2, 31))
        A = rng.random((n, n))
        W = (A + A.T) / 2
        res = symnmf(W, int(rng.integers(1, min(n, 8) + 1)), SymnmfOptions(seed=i), keep_trace=True)
        bad_trace += bool(np.any(np.diff(res.trace) > 0))
        negative += bool(res.H.min() < 0)
    recovered = exact = 0
    for i in range(100):
        # two blocks of random weights whose sizes differ by at most a factor of 2
        s1 = int(rng.integers(2, 11))
        s2 = int(rng.integers(max(2, -(-s1 // 2)), min(2 * s1, 30 - s1) + 1))
        recovered += _recovers_blocks(rng, s1, s2, i, constant=False)
        exact += _recovers_blocks(rng, 3, 3, i, constant=True)
    # informational: strongly unbalanced blocks trap the multiplicative update
    stress = [_recovers_blocks(rng, s1, s1 * r, 1000 + s1 * r, constant=False) for s1 in (2, 3) for r in (3, 4, 5)]
    ok = bad_trace == 0 and negative == 0 and recovered >= 99 and exact >= 99
    detail = (
        f"increasing traces {bad_trace}/100, negative H {negative}/100, "
        f"balanced blocks recovered {recovered}/100, 3+3 fixture {exact}/100 "
        f"(not gated: size ratio 3-5 recovered {sum(stress)}/{len(stress)})"
    )
    record(4, "SymNMF soundness", ok, detail)
    assert ok


def _recovers_blocks(rng, s1, s2, seed, constant):
    n = s1 + s2
    gt = np.repeat([0, 1], [s1, s2])
    same = gt[:, None] == gt[None, :]
    W = np.zeros((n, n))
    if constant:
        W[same] = 0.9
    else:
        vals = rng.uniform(0.3, 1.0, (n, n))
        W[same] = ((vals + vals.T) / 2)[same]
    np.fill_diagonal(W, 0.0)
    perm = rng.permutation(n)
    labels = assign_clusters(symnmf(W[np.ix_(perm, perm)], 2, SymnmfOptions(restarts=10, seed=int(seed))).H)
    return labels.k == 2 and purity(labels, gt[perm]) == 1.0


def test_05_ruzicka_is_iou():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 40, 2)
        a = rng.random((h, w)) < rng.random()
        b = rng.random((h, w)) < rng.random()
        sa = set(zip(*np.nonzero(a)))
        sb = set(zip(*np.nonzero(b)))
        iou = len(sa & sb) / len(sa | sb) if sa | sb else 0.0
        worst = max(worst, abs(ruzicka(a.astype(float), b.astype(float)) - iou))
    ok = record(5, "Ruzicka equals IoU on binary maps", worst <= 1e-12, f"1000 pairs, max |diff| {worst:.1e}")
    assert ok


def test_06_cluster_aware_nms():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 10))
        masks, scores = [], []
        for _ in range(n):
            x0, y0 = rng.integers(0, 12, 2)
            w, h = rng.integers(2, 9, 2)
            m = np.zeros((16, 16), dtype=bool)
            m[y0 : y0 + h, x0 : x0 + w] = True
            masks.append(m)
            scores.append(float(rng.choice([0.3, 0.5, 0.7, 0.9])))
        props = [Proposal(0, PixelSet(m), s, 1) for m, s in zip(masks, scores)]
        kept = cluster_aware_nms(props, 0.3)
        expected = [p for i, p in enumerate(props) if i in brute_force_nms(masks, scores, 0.3)]
        mismatches += kept != expected
    dropped = 0
    for _ in range(50):
        x0, y0 = rng.integers(0, 8, 2)
        base = np.zeros((16, 16), dtype=bool)
        base[y0 : y0 + 8, x0 : x0 + 8] = True
        shifted = np.roll(base, 1, axis=1)
        props = [Proposal(0, PixelSet(base), 0.9, 0), Proposal(0, PixelSet(shifted), 0.8, 1), Proposal(0, PixelSet(base), 0.7, 2)]
        dropped += len(props) - len(cluster_aware_nms(props, 0.3))
    ok = mismatches == 0 and dropped == 0
    record(6, "cluster-aware NMS", ok, f"oracle mismatches {mismatches}/200, cross-cluster proposals dropped {dropped}")
    assert ok


def test_07_single_sphere_hull():
    t0 = time.perf_counter()
    synth = generate(1, 20, seed=0)
    rec = reconstruct_all(synth.gt, synth.scene, synth.grid)[0]
    elapsed = time.perf_counter() - t0
    grid = synth.grid
    nx, ny, nz = grid.dims
    inside = (np.linalg.norm(grid.centers() - synth.centers[0], axis=1) < synth.radii[0]).reshape(nz, ny, nx).transpose(2, 1, 0)
    contained = binarize(rec.grid)[inside].mean()
    norm = chamfer(rec.cloud, synth.gt_clouds[0]) / synth.scale
    ok = contained >= 0.99 and norm <= 0.10 and elapsed <= 60
    record(7, "single-sphere reconstruction", ok, f"interior contained {contained:.4f}, normalized chamfer {norm:.3f}, {elapsed:.1f}s")
    assert ok


def _pipeline_chamfer(synth):
    res = _match(synth.scene)
    recs = reconstruct_all(res.assignment, synth.scene, synth.grid)
    dists = []
    gt = synth.gt.labels
    for g in range(synth.gt.k):
        k = np.bincount(res.assignment.labels[gt == g]).argmax()
        dists.append(chamfer(recs[k].cloud, synth.gt_clouds[g]))
    return float(np.mean(dists)) / synth.scale


def test_08_few_view_trend():
    ref = generate(8, 20, seed=0)
    errors = {}
    for v in (3, 5, 10, 20):
        synth = scene_from_spheres(camera_ring(v, 256), ref.centers, ref.radii)
        errors[v] = _pipeline_chamfer(synth)
    ok = errors[3] <= 2 * errors[20]
    detail = ", ".join(f"{v} views {e:.3f}" for v, e in errors.items())
    record(8, "few-view robustness", ok, f"normalized chamfer {detail}; ratio 3/20 = {errors[3] / errors[20]:.2f}")
    assert ok


def test_09_epipolar_residuals():
    cams = camera_ring(20, 256)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        i, j = rng.choice(20, 2, replace=False)
        X = rng.uniform(-1, 1, 3) * (1, 1, 0.8)
        F = fundamental_from_poses(cams[i], cams[j])
        pi = project(projection_matrix(cams[i]), X)
        pj = project(projection_matrix(cams[j]), X)
        worst = max(worst, float(np.abs(epipolar_residual(F, pi, pj)).max()))
    ok = record(9, "epipolar residuals", worst < 1e-6, f"1000 pairs, max normalized residual {worst:.1e}")
    assert ok


def _run_pipeline(root, threads):
    t = ["--threads", str(threads), "--seed", "11"]
    s = root / "scene"
    steps = [
        ["synth", "--objects", "5", "--views", "4", "--drop-rate", "0.2", "--corruption", "1", "--grid-dims", "40", "--out", str(s)],
        ["match", "--scene", str(s)] + t,
        ["reconstruct", "--scene", str(s), "--out", str(root / "rec")] + t,
        ["evaluate", "--scene", str(s), "--clouds", str(root / "rec"), "--out", str(root / "report.json")] + t,
    ]
    for step in steps:
        assert main(step) == 0
    cams, props = occlusion_fixture()
    p = root / "proposals"
    p.mkdir()
    save_cameras(cams, p / "cameras.json")
    save_proposals([InstanceMask(q.view_id, i + 1, q.mask, q.score) for i, q in enumerate(props)], p)
    assert main(["refine", "--scene", str(p), "--out", str(root / "refined")] + t) == 0


def _tree_diff(a, b):
    cmp = filecmp.dircmp(a, b)
    diffs = list(cmp.left_only + cmp.right_only)
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    diffs += mismatch + errors
    for sub in cmp.common_dirs:
        diffs += _tree_diff(a / sub, b / sub)
    return diffs


def test_10_determinism(tmp_path):
    runs = {}
    for name, threads in (("t1_a", 1), ("t1_b", 1), ("t8_a", 8), ("t8_b", 8)):
        (tmp_path / name).mkdir()
        _run_pipeline(tmp_path / name, threads)
        runs[name] = tmp_path / name
    diffs = []
    for a, b in combinations(runs, 2):
        diffs += [f"{a} vs {b}: {d}" for d in _tree_diff(runs[a], runs[b])]
    n_files = sum(1 for p in runs["t1_a"].rglob("*") if p.is_file())
    ok = record(10, "determinism", not diffs, f"{n_files} output files compared across 2 runs x threads {{1, 8}}; differences {diffs[:3]}")
    assert ok
