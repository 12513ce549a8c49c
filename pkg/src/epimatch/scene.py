"""Scene data model and on-disk formats.

Formats:

* cameras: JSON array of ``{view_id, width, height, K[9], R[9], t[3]}``
* instance masks: one 16-bit label PNG ``view_<id>.png`` per view, 0 = background,
  value ``m >= 1`` = instance ``m``
* overlapping proposals: ``proposals.json`` (``[{view_id, file, score}]``) next to
  8-bit binary PNGs under ``proposals/<view_id>/<r>.png``
* cluster assignment: JSON ``[{view_id, instance_index, cluster_id}]`` sorted by node id
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyLabelImage, MissingView, NodeMismatch
from .geometry import CameraView, PixelSet, load_cameras, save_cameras

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Region of instance ``instance_index`` in view ``view_id``."""

    view_id: int
    instance_index: int
    region: PixelSet
    score: float | None = None

    def __post_init__(self):
        if self.region.count == 0:
            raise ValueError(f"instance ({self.view_id}, {self.instance_index}) has an empty region")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    @property
    def key(self) -> tuple[int, int]:
        return (self.view_id, self.instance_index)


@dataclass(frozen=True, eq=False)
class SceneManifest:
    """Cameras plus every instance mask; node ids follow ``(view_id, instance_index)`` order."""

    cameras: tuple
    masks: tuple
    _cam_by_view: dict = field(init=False, repr=False)
    _node_by_key: dict = field(init=False, repr=False)

    def __post_init__(self):
        cams = tuple(sorted(self.cameras, key=lambda c: c.view_id))
        by_view = {c.view_id: c for c in cams}
        if len(by_view) != len(cams):
            raise ValueError("duplicate camera view ids")
        masks = tuple(sorted(self.masks, key=lambda m: m.key))
        keys = [m.key for m in masks]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (view_id, instance_index) pairs")
        for m in masks:
            cam = by_view.get(m.view_id)
            if cam is None:
                raise MissingView(f"mask references unknown view {m.view_id}")
            if (m.region.width, m.region.height) != (cam.width, cam.height):
                raise ValueError(f"mask {m.key} does not match the image size of view {m.view_id}")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "_cam_by_view", by_view)
        object.__setattr__(self, "_node_by_key", {k: i for i, k in enumerate(keys)})

    @property
    def n_nodes(self) -> int:
        return len(self.masks)

    @property
    def view_ids(self) -> list[int]:
        return [c.view_id for c in self.cameras]

    def camera(self, view_id: int) -> CameraView:
        return self._cam_by_view[view_id]

    def node_id(self, view_id: int, instance_index: int) -> int:
        return self._node_by_key[(view_id, instance_index)]

    def node_key(self, node: int) -> tuple[int, int]:
        return self.masks[node].key

    def node_views(self) -> np.ndarray:
        return np.array([m.view_id for m in self.masks], dtype=np.int64)

    def nodes_in_view(self, view_id: int) -> list[int]:
        return [i for i, m in enumerate(self.masks) if m.view_id == view_id]

    def max_instances_per_view(self) -> int:
        if not self.masks:
            return 0
        _, counts = np.unique(self.node_views(), return_counts=True)
        return int(counts.max())

    def with_masks(self, masks) -> "SceneManifest":
        return SceneManifest(self.cameras, tuple(masks))


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Cluster id per node; ids are contiguous in ``[0, k)``."""

    labels: np.ndarray
    k: int = field(init=False)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        labels.setflags(write=False)
        k = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or len(np.unique(labels)) != k):
            raise ValueError("cluster ids must be contiguous from 0")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "k", k)

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        """Build an assignment from arbitrary integer labels, compacting the ids.

        Ids keep their relative order, so the smallest raw id becomes 0.
        """
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.size == 0:
            return cls(labels)
        _, inverse = np.unique(labels, return_inverse=True)
        return cls(inverse.reshape(-1))

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusterAssignment):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    __hash__ = None

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


# -- label images ---------------------------------------------------------------------


def read_label_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise EmptyLabelImage(f"cannot read label image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise EmptyLabelImage(f"{path}: label image must be single channel")
    return arr.astype(np.int64)


def write_label_image(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def masks_from_label_image(view_id: int, labels: np.ndarray) -> list[InstanceMask]:
    out = []
    for m in np.unique(labels):
        if m == 0:
            continue
        out.append(InstanceMask(view_id, int(m), PixelSet(labels == m)))
    return out


def label_image_for_view(scene: SceneManifest, view_id: int, order=None) -> np.ndarray:
    """Paint the masks of one view into a label image.

    Masks are painted in ``order`` (default: node order); later masks win where
    regions overlap.
    """
    cam = scene.camera(view_id)
    out = np.zeros((cam.height, cam.width), dtype=np.int64)
    nodes = scene.nodes_in_view(view_id) if order is None else order
    for n in nodes:
        m = scene.masks[n]
        out[m.region.mask] = m.instance_index
    return out


def load_scene(camera_file, mask_dir) -> SceneManifest:
    """Read cameras and per-view label images into a :class:`SceneManifest`.

    Raises:
        MissingView: if the camera file or a view's label image does not exist.
        EmptyLabelImage: if a label image is unreadable or has the wrong size.
    """
    camera_file = Path(camera_file)
    if not camera_file.exists():
        raise MissingView(f"camera file not found: {camera_file}")
    cameras = load_cameras(camera_file)
    masks = []
    for cam in cameras:
        path = Path(mask_dir) / f"view_{cam.view_id}.png"
        if not path.exists():
            raise MissingView(f"no label image for view {cam.view_id}: {path}")
        labels = read_label_image(path)
        if labels.shape != (cam.height, cam.width):
            raise EmptyLabelImage(
                f"{path}: shape {labels.shape} does not match camera {cam.width}x{cam.height}"
            )
        masks.extend(masks_from_label_image(cam.view_id, labels))
    return SceneManifest(tuple(cameras), tuple(masks))


def save_scene(scene: SceneManifest, camera_file, mask_dir) -> None:
    """Write cameras and label images. Overlapping masks cannot be represented;
    later nodes overwrite earlier ones."""
    Path(camera_file).parent.mkdir(parents=True, exist_ok=True)
    save_cameras(scene.cameras, camera_file)
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for cam in scene.cameras:
        write_label_image(label_image_for_view(scene, cam.view_id), mask_dir / f"view_{cam.view_id}.png")


# -- assignments -------------------------------------------------------------------------


def assignment_records(assignment: ClusterAssignment, scene: SceneManifest) -> list[dict]:
    if len(assignment) != scene.n_nodes:
        raise NodeMismatch(f"assignment has {len(assignment)} labels for {scene.n_nodes} nodes")
    return [
        {"view_id": m.view_id, "instance_index": m.instance_index, "cluster_id": int(c)}
        for m, c in zip(scene.masks, assignment.labels)
    ]


def dump_assignment_json(records: list[dict]) -> str:
    if not records:
        return "[]\n"
    body = ",\n".join(
        f'  {{"view_id": {r["view_id"]}, "instance_index": {r["instance_index"]}, '
        f'"cluster_id": {r["cluster_id"]}}}'
        for r in records
    )
    return "[\n" + body + "\n]\n"


def save_assignment(assignment: ClusterAssignment, scene: SceneManifest, path) -> None:
    Path(path).write_text(dump_assignment_json(assignment_records(assignment, scene)))


def read_assignment_records(path) -> dict[tuple[int, int], int]:
    with open(path) as f:
        data = json.load(f)
    out = {}
    for r in data:
        key = (int(r["view_id"]), int(r["instance_index"]))
        if key in out:
            raise ValueError(f"duplicate node {key} in {path}")
        out[key] = int(r["cluster_id"])
    return out


def load_assignment(path, scene: SceneManifest) -> ClusterAssignment:
    """Inverse of :func:`save_assignment` for the same scene.

    Raises:
        NodeMismatch: if the file's nodes differ from the scene's.
    """
    records = read_assignment_records(path)
    keys = [m.key for m in scene.masks]
    if set(records) != set(keys):
        raise NodeMismatch(f"{path} does not cover exactly the scene's nodes")
    return ClusterAssignment.from_labels([records[k] for k in keys])


# -- proposals -----------------------------------------------------------------------------


def load_proposals(root) -> list[InstanceMask]:
    """Read ``proposals.json`` and the binary PNGs it references.

    Proposals are returned in manifest order with ``instance_index`` equal to
    their rank within the view (1-based). Extra keys such as ``cluster_id`` are
    ignored.
    """
    root = Path(root)
    manifest = root / "proposals.json"
    if not manifest.exists():
        raise MissingView(f"proposal manifest not found: {manifest}")
    entries = json.loads(manifest.read_text())
    counters: dict[int, int] = {}
    out = []
    for e in entries:
        view_id = int(e["view_id"])
        path = root / e["file"]
        try:
            with Image.open(path) as im:
                bitmap = np.array(im.convert("L")) > 0
        except FileNotFoundError as exc:
            raise MissingView(f"proposal image missing: {path}") from exc
        counters[view_id] = counters.get(view_id, 0) + 1
        out.append(InstanceMask(view_id, counters[view_id], PixelSet(bitmap), float(e["score"])))
    return out


def save_proposals(proposals, root, cluster_ids=None) -> None:
    """Write proposals in the manifest + binary PNG layout.

    ``cluster_ids`` (one entry per proposal, ``None`` for unmatched) is stored as
    an extra manifest key when given.
    """
    root = Path(root)
    entries = []
    counters: dict[int, int] = {}
    for i, p in enumerate(proposals):
        r = counters.get(p.view_id, 0)
        counters[p.view_id] = r + 1
        rel = Path("proposals") / str(p.view_id) / f"{r}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(p.region.mask.astype(np.uint8) * 255).save(root / rel)
        entry = {"view_id": p.view_id, "file": rel.as_posix(), "score": float(p.score if p.score is not None else 1.0)}
        if cluster_ids is not None:
            entry["cluster_id"] = None if cluster_ids[i] is None else int(cluster_ids[i])
        entries.append(entry)
    root.mkdir(parents=True, exist_ok=True)
    (root / "proposals.json").write_text(json.dumps(entries, indent=1) + "\n")
