import numpy as np
import pytest

from spatialsynth import decompose as dc
from spatialsynth.decompose import Detection, LayeredClip, Masklet
from spatialsynth.media import VideoClip


def _box(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), bool)
    m[y0:y1, x0:x1] = True
    return m


def test_static_objects_keep_identity():
    a, b = _box(16, 16, 2, 6, 2, 6), _box(16, 16, 8, 12, 9, 14)
    frames = [[Detection(7, "object", b), Detection(3, "object", a)] for _ in range(4)]
    tracks = dc.track_instances(frames)
    assert len(tracks) == 2
    assert [t.track_id for t in tracks] == [1, 2]
    # issued in order of centroid x
    assert np.array_equal(tracks[0].mask[0], a) and np.array_equal(tracks[1].mask[0], b)
    assert all(np.array_equal(t.mask[3], t.mask[0]) for t in tracks)


def test_swap_without_overlap_retires_both():
    # a square and a bar trade places; each new mask overlaps the other's old one (IoU 0.2)
    sq0, bar0 = _box(16, 16, 4, 8, 1, 5), _box(16, 16, 0, 16, 10, 12)
    sq1, bar1 = _box(16, 16, 4, 8, 10, 14), _box(16, 16, 0, 16, 2, 4)
    frames = [[Detection(1, "object", sq0), Detection(2, "object", bar0)],
              [Detection(1, "object", sq1), Detection(2, "object", bar1)]]
    tracks = dc.track_instances(frames)
    assert len(tracks) == 4
    assert [(t.first, t.last) for t in tracks] == [(0, 0), (0, 0), (1, 1), (1, 1)]


def test_disappearing_object_retired():
    a = _box(16, 16, 4, 8, 1, 5)
    frames = [[Detection(1, "object", a)], [], [Detection(1, "object", a)]]
    tracks = dc.track_instances(frames)
    assert len(tracks) == 2 and tracks[0].last == 0 and tracks[1].first == 2


def test_tie_goes_to_lower_centroid_x():
    prev = _box(16, 16, 0, 4, 4, 12)
    left, right = _box(16, 16, 0, 4, 0, 8), _box(16, 16, 0, 4, 8, 16)
    frames = [[Detection(1, "object", prev)], [Detection(5, "object", right), Detection(6, "object", left)]]
    tracks = dc.track_instances(frames)
    assert np.array_equal(tracks[0].mask[1], left)


def _layered(depth_values, masks, classes):
    n = 2
    h, w = masks[0].shape
    depth = np.full((n, h, w), 9.0)
    dets = []
    for t in range(n):
        row = []
        for i, (m, c, d) in enumerate(zip(masks, classes, depth_values)):
            depth[t][m] = d
            row.append(Detection(i, c, m))
        dets.append(row)
    frames = np.random.default_rng(0).integers(0, 256, (n, h, w, 3), dtype=np.uint8)
    return LayeredClip(VideoClip(frames), depth, dets)


def test_layer_rule_by_mean_depth():
    h = _box(12, 12, 2, 10, 4, 8)
    a = _box(12, 12, 0, 3, 0, 3)
    b = _box(12, 12, 9, 12, 9, 12)
    layers = dc.assign_layers(_layered([5.0, 3.0, 7.0], [h, a, b], ["human", "object", "object"]))
    roles = {layers.mean_depth[k]: v for k, v in layers.roles.items()}
    assert roles == {5.0: "human", 3.0: "occlusion", 7.0: "scene"}
    assert np.array_equal(layers.human.mask[0], h)
    assert np.array_equal(layers.occlusion.mask[0], a)
    dc.check_partition(*layers.masklets())


def test_equal_depth_goes_to_scene():
    h = _box(12, 12, 2, 10, 4, 8)
    a = _box(12, 12, 0, 3, 0, 3)
    layers = dc.assign_layers(_layered([5.0, 5.0], [h, a], ["human", "object"]))
    assert not layers.occlusion.mask.any()


def test_no_other_instances():
    h = _box(12, 12, 2, 10, 4, 8)
    layers = dc.assign_layers(_layered([5.0], [h], ["human"]))
    assert not layers.occlusion.mask.any()
    assert np.array_equal(layers.scene.mask, ~layers.human.mask)


def test_overlap_resolved_by_nearer_depth():
    h = _box(12, 12, 2, 10, 4, 8)
    a = _box(12, 12, 5, 8, 2, 10)  # occluder straddling the human
    clip = _layered([5.0, 3.0], [h, a], ["human", "object"])
    layers = dc.assign_layers(clip)
    assert np.array_equal(layers.occlusion.mask[0], a)
    assert np.array_equal(layers.human.mask[0], h & ~a)
    assert layers.mean_depth[layers.human_track] == 5.0


def test_no_human_is_error():
    a = _box(12, 12, 0, 3, 0, 3)
    with pytest.raises(dc.DecomposeError):
        dc.assign_layers(_layered([3.0], [a], ["object"]))


def test_extract_components():
    v = np.array([[[[1], [2]], [[3], [4]]]], dtype=np.uint8)
    m = np.array([[[1, 0], [0, 1]]], bool)
    hu, oc, sc = dc.extract_components(v, Masklet(m, "human"), Masklet(np.zeros_like(m), "occlusion"),
                                       Masklet(~m, "scene"))
    assert hu[0, :, :, 0].tolist() == [[1, 0], [0, 4]]
    assert not oc.any()
    assert np.array_equal(hu + oc + sc, v)
    full, = dc.extract_components(v, Masklet(np.ones_like(m), "human"), Masklet(m, "scene"),
                                  Masklet(m, "scene"))[:1]
    assert np.array_equal(full, v)
    with pytest.raises(dc.DecomposeError):
        dc.extract_components(v, Masklet(np.ones((1, 3, 2), bool), "human"), Masklet(m, "scene"), Masklet(m, "scene"))


def test_recover_scene_no_holes_identity():
    v = np.random.default_rng(1).integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    out = dc.recover_scene(v, Masklet(np.ones((3, 8, 8), bool), "scene"))
    assert np.array_equal(out, v)
    assert np.array_equal(dc.recover_scene(out, Masklet(np.ones((3, 8, 8), bool), "scene")), out)


def test_recover_scene_constant():
    v = np.full((2, 16, 16, 3), 77, np.uint8)
    known = np.ones((2, 16, 16), bool)
    known[:, 3:11, 5:9] = False
    v[~known] = 0
    out = dc.recover_scene(v, Masklet(known, "scene"))
    assert np.all(out == 77)
    fv = v.astype(np.float64) / 255
    np.testing.assert_array_equal(dc.recover_scene(fv, Masklet(known, "scene")), np.full(fv.shape, 77 / 255))


def test_recover_scene_gradient_hole():
    h, w = 32, 32
    grad = np.tile(np.linspace(20, 230, w), (h, 1))
    v = np.repeat(grad[None, ..., None], 3, axis=-1)
    known = np.ones((1, h, w), bool)
    known[0, 14:18, 14:18] = False
    out = dc.recover_scene(np.where(known[..., None], v, 0), Masklet(known, "scene"))
    hole = ~known[0]
    rel = np.abs(out[0][hole] - v[0][hole]) / v[0][hole]
    assert rel.max() < 0.10


def test_recover_scene_empty_frame_uses_clip_mean():
    v = np.zeros((2, 4, 4, 3), np.uint8)
    v[0] = (10, 20, 30)
    known = np.zeros((2, 4, 4), bool)
    known[0] = True
    out = dc.recover_scene(v, Masklet(known, "scene"))
    assert np.all(out[1] == (10, 20, 30))


def test_file_formats_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = Masklet(rng.random((3, 5, 7)) > 0.5, "occlusion")
    dc.save_masklet(tmp_path / "m.bin", m)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw.startswith(b"SSMASK 1 occlusion 3 5 7\n") and len(raw) == 25 + 3 * 5
    back = dc.load_masklet(tmp_path / "m.bin")
    assert back.role == "occlusion" and np.array_equal(back.mask, m.mask)
    d = rng.uniform(0.5, 9, (2, 5, 7))
    dc.save_depth(tmp_path / "d.bin", d)
    np.testing.assert_array_equal(dc.load_depth(tmp_path / "d.bin"), d.astype(np.float32))
    dets = [[Detection(4, "human", m.mask[0]), Detection(9, "object", m.mask[1])], []]
    dc.save_detections(tmp_path / "i.bin", dets, (5, 7))
    back = dc.load_detections(tmp_path / "i.bin")
    assert [(d.label, d.cls) for d in back[0]] == [(4, "human"), (9, "object")] and back[1] == []
    assert np.array_equal(back[0][1].mask, m.mask[1])
