import json

import numpy as np
import pytest
from PIL import Image

from epimatch.errors import EmptyLabelImage, MissingView, NodeMismatch
from epimatch.geometry import PixelSet, save_cameras
from epimatch.scene import (
    ClusterAssignment,
    InstanceMask,
    SceneManifest,
    load_assignment,
    load_proposals,
    load_scene,
    masks_from_label_image,
    read_label_image,
    save_assignment,
    save_proposals,
    save_scene,
    write_label_image,
)
from epimatch.synthetic import camera_ring

GOLDEN = (
    "[\n"
    '  {"view_id": 0, "instance_index": 1, "cluster_id": 0},\n'
    '  {"view_id": 0, "instance_index": 2, "cluster_id": 1},\n'
    '  {"view_id": 1, "instance_index": 1, "cluster_id": 1}\n'
    "]\n"
)


def _box(w, h, x0, y0, x1, y1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return PixelSet(m)


def _three_node_scene():
    cams = camera_ring(2, 16)
    masks = [
        InstanceMask(1, 1, _box(16, 16, 2, 2, 5, 5)),
        InstanceMask(0, 2, _box(16, 16, 8, 8, 12, 12)),
        InstanceMask(0, 1, _box(16, 16, 1, 1, 3, 3)),
    ]
    return SceneManifest(tuple(cams), tuple(masks))


def test_node_order_is_sorted():
    scene = _three_node_scene()
    assert [m.key for m in scene.masks] == [(0, 1), (0, 2), (1, 1)]
    assert scene.node_id(1, 1) == 2 and scene.node_key(1) == (0, 2)
    assert scene.max_instances_per_view() == 2


def test_golden_assignment_bytes(tmp_path):
    scene = _three_node_scene()
    save_assignment(ClusterAssignment([0, 1, 1]), scene, tmp_path / "a.json")
    assert (tmp_path / "a.json").read_text() == GOLDEN


def test_assignment_round_trip(tmp_path, small_scene):
    scene = small_scene.scene
    rng = np.random.default_rng(0)
    a = ClusterAssignment.from_labels(rng.integers(0, 5, scene.n_nodes))
    save_assignment(a, scene, tmp_path / "a.json")
    assert load_assignment(tmp_path / "a.json", scene) == a


def test_empty_assignment(tmp_path):
    scene = SceneManifest(tuple(camera_ring(2, 16)), ())
    save_assignment(ClusterAssignment(np.zeros(0, dtype=int)), scene, tmp_path / "a.json")
    assert json.loads((tmp_path / "a.json").read_text()) == []


def test_assignment_node_mismatch(tmp_path):
    scene = _three_node_scene()
    with pytest.raises(NodeMismatch):
        save_assignment(ClusterAssignment([0, 1]), scene, tmp_path / "a.json")


def test_assignment_compaction():
    a = ClusterAssignment.from_labels([5, 2, 5, 9])
    assert a.labels.tolist() == [1, 0, 1, 2] and a.k == 3
    with pytest.raises(ValueError):
        ClusterAssignment([0, 2])


def test_label_image_round_trip(tmp_path):
    labels = np.zeros((20, 30), dtype=np.uint16)
    labels[2:5, 3:9] = 1
    labels[10:12, 10:20] = 300
    write_label_image(labels, tmp_path / "v.png")
    assert np.array_equal(read_label_image(tmp_path / "v.png"), labels)


def test_masks_from_labels():
    labels = np.zeros((8, 8), dtype=np.uint16)
    assert masks_from_label_image(0, labels) == []
    labels[0, 0] = 1
    labels[4:6, 4:6] = 2
    masks = masks_from_label_image(3, labels)
    assert [(m.view_id, m.instance_index, m.region.count) for m in masks] == [(3, 1, 1), (3, 2, 4)]


def test_scene_round_trip(tmp_path, small_scene):
    scene = small_scene.scene
    save_scene(scene, tmp_path / "cameras.json", tmp_path / "masks")
    back = load_scene(tmp_path / "cameras.json", tmp_path / "masks")
    assert back.n_nodes == scene.n_nodes == 4 * 5
    for a, b in zip(scene.masks, back.masks):
        assert a.key == b.key and a.region == b.region


def test_missing_view(tmp_path):
    cams = camera_ring(2, 16)
    with pytest.raises(MissingView):
        load_scene(tmp_path / "cameras.json", tmp_path / "masks")
    save_cameras(cams, tmp_path / "cameras.json")
    (tmp_path / "masks").mkdir()
    write_label_image(np.zeros((16, 16), dtype=np.uint16), tmp_path / "masks" / "view_0.png")
    with pytest.raises(MissingView):
        load_scene(tmp_path / "cameras.json", tmp_path / "masks")


def test_bad_label_image(tmp_path):
    cams = camera_ring(2, 16)
    save_cameras(cams, tmp_path / "cameras.json")
    (tmp_path / "masks").mkdir()
    for v in range(2):
        (tmp_path / "masks" / f"view_{v}.png").write_bytes(b"not a png")
    with pytest.raises(EmptyLabelImage):
        load_scene(tmp_path / "cameras.json", tmp_path / "masks")
    for v in range(2):
        write_label_image(np.zeros((8, 8), dtype=np.uint16), tmp_path / "masks" / f"view_{v}.png")
    with pytest.raises(EmptyLabelImage):
        load_scene(tmp_path / "cameras.json", tmp_path / "masks")


def test_empty_view_is_allowed(tmp_path):
    cams = camera_ring(2, 16)
    save_cameras(cams, tmp_path / "cameras.json")
    (tmp_path / "masks").mkdir()
    labels = np.zeros((16, 16), dtype=np.uint16)
    write_label_image(labels, tmp_path / "masks" / "view_0.png")
    labels[3:6, 3:6] = 1
    labels[9:10, 9:12] = 2
    write_label_image(labels, tmp_path / "masks" / "view_1.png")
    scene = load_scene(tmp_path / "cameras.json", tmp_path / "masks")
    assert [m.key for m in scene.masks] == [(1, 1), (1, 2)]


def test_proposals_round_trip(tmp_path):
    props = [
        InstanceMask(0, 1, _box(16, 16, 0, 0, 8, 8), 0.9),
        InstanceMask(0, 2, _box(16, 16, 2, 2, 9, 9), 0.5),
        InstanceMask(1, 1, _box(16, 16, 4, 4, 6, 6), 0.7),
    ]
    save_proposals(props, tmp_path, cluster_ids=[0, None, 0])
    back = load_proposals(tmp_path)
    assert [(p.view_id, p.instance_index, p.score) for p in back] == [(0, 1, 0.9), (0, 2, 0.5), (1, 1, 0.7)]
    assert all(a.region == b.region for a, b in zip(props, back))
    manifest = json.loads((tmp_path / "proposals.json").read_text())
    assert manifest[0]["file"] == "proposals/0/0.png" and manifest[1]["cluster_id"] is None
    with Image.open(tmp_path / "proposals" / "0" / "1.png") as im:
        assert im.mode == "L"


def test_mask_validation():
    with pytest.raises(ValueError):
        InstanceMask(0, 1, PixelSet.empty(4, 4))
    cams = camera_ring(2, 16)
    with pytest.raises(MissingView):
        SceneManifest(tuple(cams), (InstanceMask(5, 1, _box(16, 16, 0, 0, 2, 2)),))
    with pytest.raises(ValueError):
        SceneManifest(tuple(cams), (InstanceMask(0, 1, _box(8, 8, 0, 0, 2, 2)),))
