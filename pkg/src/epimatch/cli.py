"""Command-line driver: ``epimatch {synth,match,refine,reconstruct,evaluate}``.

Every flag can also come from ``--config FILE`` (TOML or JSON), either at top
level or under a table named after the subcommand; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from . import synthetic
from .errors import EpimatchError, MissingView
from .evaluation import chamfer, normalize_error, purity_by_key
from .geometry import load_cameras
from .matching import (
    DEFAULT_SAMPLES,
    DEFAULT_THICKNESS,
    build_graph,
    point_baseline_match,
    save_weights_csv,
)
from .reconstruction import (
    load_grid,
    read_ply,
    reconstruct_all,
    save_voxel_grid,
    write_ply,
)
from .refinement import NMS_INIT_THRESHOLD, NMS_THRESHOLD, Proposal, refine
from .scene import (
    load_assignment,
    load_proposals,
    load_scene,
    read_assignment_records,
    save_assignment,
    save_proposals,
    save_scene,
)
from .symnmf import SymnmfOptions, cluster_scene

logger = logging.getLogger("epimatch")


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _parse_k(value: str):
    if value == "auto":
        return None
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("--k must be 'auto' or a positive integer")
    return k


def _scene_paths(args):
    root = Path(args.scene)
    cameras = Path(args.cameras) if args.cameras else root / "cameras.json"
    masks = Path(args.masks) if args.masks else root / "masks"
    return cameras, masks


def _opts(args) -> SymnmfOptions:
    return SymnmfOptions(max_iters=args.max_iters, rel_tol=args.rel_tol, restarts=args.restarts, seed=args.seed)


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> None:
    synth = synthetic.generate(
        args.objects, args.views, image_size=args.size, seed=args.seed, grid_dims=(args.grid_dims,) * 3
    )
    if args.drop_rate > 0 or args.corruption > 0:
        scene = synthetic.occlusion_variant(synth.scene, args.drop_rate, args.corruption, args.seed)
        synth = replace(synth, scene=scene, gt=synthetic.gt_for_scene(scene))
    synthetic.write_synthetic(synth, args.out)
    logger.info("wrote %d objects x %d views to %s", args.objects, args.views, args.out)


def cmd_match(args) -> None:
    cam_file, mask_dir = _scene_paths(args)
    scene = load_scene(cam_file, mask_dir)
    if args.baseline == "point":
        graph = point_baseline_match(scene)
    else:
        graph = build_graph(scene, args.samples, args.thickness, args.seed, args.threads)
    result = cluster_scene(graph, _opts(args), k=args.k, threads=args.threads)
    out = Path(args.out) if args.out else Path(args.scene) / "assignment.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_assignment(result.assignment, scene, out)
    diag = Path(args.diagnostics) if args.diagnostics else out.with_name(out.stem + "_diagnostics.json")
    diag.write_text(json.dumps(result.diagnostics(), indent=1) + "\n")
    if args.weights_csv:
        save_weights_csv(graph, args.weights_csv)
    logger.info("%d nodes -> %d clusters; wrote %s", scene.n_nodes, result.assignment.k, out)


def cmd_refine(args) -> None:
    cam_file = Path(args.cameras) if args.cameras else Path(args.scene) / "cameras.json"
    if not cam_file.exists():
        raise MissingView(f"camera file not found: {cam_file}")
    cameras = load_cameras(cam_file)
    proposals = [Proposal.from_instance(m) for m in load_proposals(args.proposals or args.scene)]
    result = refine(
        cameras,
        proposals,
        rounds=args.rounds,
        nms_init=args.nms_init,
        nms=args.nms,
        n_samples=args.samples,
        thickness=args.thickness,
        seed=args.seed,
        opts=_opts(args),
        k=args.k,
        threads=args.threads,
    )
    out = Path(args.out)
    save_scene(result.scene, out / "cameras.json", out / "masks")
    save_assignment(result.assignment, result.scene, out / "assignment.json")
    save_proposals(result.scene.masks, out, [int(c) for c in result.assignment.labels])
    logger.info("kept %d of %d proposals in %d clusters", len(result.proposals), len(proposals), result.assignment.k)


def cmd_reconstruct(args) -> None:
    cam_file, mask_dir = _scene_paths(args)
    scene = load_scene(cam_file, mask_dir)
    assignment = load_assignment(args.assignment or Path(args.scene) / "assignment.json", scene)
    grid = load_grid(args.grid or Path(args.scene) / "grid.json")
    if args.grid_dims:
        grid = grid.resized((args.grid_dims,) * 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, rec in reconstruct_all(assignment, scene, grid, args.threshold).items():
        save_voxel_grid(rec.grid, out / f"cluster_{k}.raw")
        write_ply(rec.cloud, out / f"cluster_{k}.ply")
    logger.info("reconstructed %d clusters into %s", assignment.k, out)


def evaluate_files(est_path, gt_path, clouds_dir=None, gt_clouds_dir=None, scale=None) -> dict:
    """Metrics report for an assignment (and optionally reconstructions) against
    ground-truth files.

    Each ground-truth object is compared with the estimated cluster holding most
    of its instances; ``chamfer`` is the mean over objects.
    """
    est = read_assignment_records(est_path)
    gt = read_assignment_records(gt_path)
    report = {
        "s_match": purity_by_key(est, gt),
        "e_k_abs": float(abs(len(set(est.values())) - len(set(gt.values())))),
        "chamfer": None,
        "chamfer_normalized": None,
    }
    if clouds_dir is not None:
        dists = []
        for g in sorted(set(gt.values())):
            votes = Counter(est[key] for key, label in sorted(gt.items()) if label == g)
            k = min(c for c, n in votes.items() if n == max(votes.values()))
            est_cloud = read_ply(Path(clouds_dir) / f"cluster_{k}.ply")
            gt_cloud = read_ply(Path(gt_clouds_dir) / f"gt_cloud_{g}.ply")
            dists.append(chamfer(est_cloud, gt_cloud))
        report["chamfer"] = sum(dists) / len(dists)
        if scale is not None:
            report["chamfer_normalized"] = normalize_error(report["chamfer"], scale)
    return report


def cmd_evaluate(args) -> None:
    root = Path(args.scene) if args.scene else None
    gt_path = args.gt or (root / "gt_assignment.json" if root else None)
    est_path = args.assignment or (root / "assignment.json" if root else None)
    if gt_path is None or est_path is None:
        raise ValueError("need --scene or both --assignment and --gt")
    scale = args.scale
    gt_clouds = args.gt_clouds or root
    if scale is None and gt_clouds is not None and (Path(gt_clouds) / "scale.json").exists():
        scale = json.loads((Path(gt_clouds) / "scale.json").read_text())["scale"]
    report = evaluate_files(est_path, gt_path, args.clouds, gt_clouds, scale)
    text = json.dumps(report, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parser ------------------------------------------------------------------------------


def _add_common(p) -> None:
    p.add_argument("--config", help="TOML or JSON file with flag values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_scene(p) -> None:
    p.add_argument("--scene", default=".", help="scene directory (cameras.json, masks/)")
    p.add_argument("--cameras", help="camera file (default: SCENE/cameras.json)")
    p.add_argument("--masks", help="label image directory (default: SCENE/masks)")


def _add_matching(p) -> None:
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="points sampled per region")
    p.add_argument("--thickness", type=float, default=DEFAULT_THICKNESS, help="epipolar line thickness in pixels")
    p.add_argument("--k", type=_parse_k, default=None, help="'auto' or a fixed cluster count")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--rel-tol", type=float, default=1e-5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epimatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sphere scene with ground truth")
    _add_common(p)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--size", type=int, default=256, help="image width and height")
    p.add_argument("--grid-dims", type=int, default=128)
    p.add_argument("--drop-rate", type=float, default=0.0, help="mask drop probability")
    p.add_argument("--corruption", type=int, default=0, help="erode/dilate radius in pixels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="match instances across views and cluster them")
    _add_common(p)
    _add_scene(p)
    _add_matching(p)
    p.add_argument("--baseline", choices=["none", "point"], default="none", help="use the centroid baseline")
    p.add_argument("--out", help="assignment JSON (default: SCENE/assignment.json)")
    p.add_argument("--diagnostics", help="diagnostics JSON (default: next to --out)")
    p.add_argument("--weights-csv", help="also dump the match graph weights")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("refine", help="refine overlapping proposals with cluster-aware NMS")
    _add_common(p)
    p.add_argument("--scene", default=".", help="directory with cameras.json")
    p.add_argument("--cameras")
    p.add_argument("--proposals", help="directory with proposals.json (default: SCENE)")
    _add_matching(p)
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--nms-init", type=float, default=NMS_INIT_THRESHOLD)
    p.add_argument("--nms", type=float, default=NMS_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("reconstruct", help="back-project every cluster into a voxel grid")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--assignment", help="default: SCENE/assignment.json")
    p.add_argument("--grid", help="grid JSON (default: SCENE/grid.json)")
    p.add_argument("--grid-dims", type=int, default=None, help="override grid resolution")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="purity, cluster-count error and Chamfer distance")
    _add_common(p)
    p.add_argument("--scene", help="directory with assignment.json and gt files")
    p.add_argument("--assignment")
    p.add_argument("--gt")
    p.add_argument("--clouds", help="reconstruction directory with cluster_<k>.ply")
    p.add_argument("--gt-clouds", help="directory with gt_cloud_<k>.ply (default: SCENE)")
    p.add_argument("--scale", type=float, default=None, help="normalization length (default: scale.json)")
    p.add_argument("--out", help="report path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = _load_config(args.config)
    section = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    section.update(cfg.get(args.command, {}))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    values = {}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValueError(f"unknown config key for {args.command}: {key}")
        if dest == "k" and value is not None:
            value = _parse_k(str(value))
        values[dest] = value
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        args.func(args)
    except (EpimatchError, OSError, ValueError) as exc:
        print(f"epimatch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
