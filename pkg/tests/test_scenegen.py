import hashlib

import numpy as np
import pytest
from scipy.stats import chisquare

from spatialsynth import bodymodel as bm
from spatialsynth import decompose as dc
from spatialsynth import scenegen as sg
from spatialsynth.decompose import LayeredClip


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_static_empty_scene_frames_identical():
    spec = sg.SceneSpec(seed=1, num_frames=4, pose_source="static")
    clip, gt = sg.render_clip(spec)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)
    layers = dc.assign_layers(LayeredClip(clip, gt.depth, gt.detections))
    assert not layers.occlusion.mask.any()


def test_occluder_drawn_over_character():
    occ = sg.ObjectSpec("disc", "occlusion", [1.0, 0.0, 0.0], z=-2.3, size=0.15, length=0.0, angle=0.0,
                        start=[-0.4, 1.1], velocity=[0.1, 0.0])
    spec = sg.SceneSpec(seed=2, num_frames=6, objects=[occ])
    clip, gt = sg.render_clip(spec)
    hits = 0
    for t in range(6):
        masks = {gt.label_to_gt[t][d.label]: d.mask for d in gt.detections[t]}
        both = masks[0] & masks[1]
        hits += both.sum()
        assert np.all(clip.frames[t][both] == (255, 0, 0))
        assert np.all(gt.depth[t][both] == pytest.approx(1.0, abs=0.05))
    assert hits > 0


def test_same_seed_bit_identical():
    a = sg.render_clip(sg.sample_spec(11))
    b = sg.render_clip(sg.sample_spec(11))
    assert np.array_equal(a[0].frames, b[0].frames)
    assert np.array_equal(a[1].depth, b[1].depth)
    assert np.array_equal(a[1].role_map, b[1].role_map)


def test_character_outside_view_is_error():
    spec = sg.SceneSpec(seed=3, num_frames=2, root=[40.0, 0.0])
    with pytest.raises(sg.SceneError):
        sg.render_clip(spec)


def test_corpus_single_and_reproducible(tmp_path):
    entries = sg.generate_corpus(1, tmp_path / "one", master_seed=5, num_frames=3)
    assert len(entries) == 1
    header, back = sg.read_manifest(tmp_path / "one" / "manifest.txt")
    assert header["master_seed"] == "5" and back[0].name == entries[0].name
    d = tmp_path / "one" / entries[0].name
    for f in ("depth.bin", "instances.bin", "poses.txt", "cameras.txt", "meta.json", "canonical_0000.png",
              "gt_human.bin", "human_amodal.bin", "frames/frame_0002.png"):
        assert (d / f).exists(), f
    sg.generate_corpus(3, tmp_path / "a", master_seed=9, num_frames=3)
    sg.generate_corpus(3, tmp_path / "b", master_seed=9, num_frames=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_layer_histogram_matches_sampler():
    dist = sg.SceneDistribution()
    seeds, _ = sg.corpus_seeds(2024, 200)
    counts = np.zeros(len(dist.object_counts))
    roles = {"occlusion": 0, "scene": 0}
    for s in seeds:
        spec = sg.sample_spec(s, dist=dist)
        counts[len(spec.objects)] += 1
        for o in spec.objects:
            roles[o.role] += 1
    total = sum(roles.values())
    p = dist.role_probabilities()
    assert chisquare([roles["occlusion"], roles["scene"]],
                     [total * p["occlusion"], total * p["scene"]]).pvalue > 0.01
    assert chisquare(counts, np.array(dist.object_counts) * 200).pvalue > 0.01


@pytest.fixture(scope="module")
def clips():
    return [sg.render_clip(sg.sample_spec(s, 64, 64, 16)) for s in range(300, 312)]


def test_ground_truth_self_consistent(clips):
    for clip, gt in clips:
        layers = dc.assign_layers(LayeredClip(clip, gt.depth, gt.detections))
        assert np.array_equal(layers.human.mask, gt.role_map == 0)
        assert np.array_equal(layers.occlusion.mask, gt.role_map == 1)
        assert np.array_equal(layers.scene.mask, gt.role_map == 2)


def test_tracking_recovers_identities(clips):
    for clip, gt in clips:
        tracks = dc.track_instances(gt.detections)
        assert len(tracks) == len(gt.roles)
        for tr in tracks:
            ids = set()
            for t in range(clip.num_frames):
                for d in gt.detections[t]:
                    if np.array_equal(d.mask, tr.mask[t]) and d.mask.any():
                        ids.add(gt.label_to_gt[t][d.label])
            assert len(ids) == 1


def test_depth_valid_and_matches_mesh(clips):
    rig0 = bm.default_rig()
    for (clip, gt), s in zip(clips[:4], range(300, 304)):
        assert np.all(gt.depth > 0)
        spec = sg.sample_spec(s, 64, 64, 16)
        rig = rig0.with_shape(spec.shape_scale)
        for t in (0, 7):
            cam = gt.cameras[t]
            verts = bm.pose_vertices(rig, gt.poses[t])
            uv, z, _ = cam.project(verts)
            fr, _, _ = bm.render_mesh(rig, verts, cam)
            human = gt.role_map[t] == 0
            ys, xs = np.nonzero(human)
            for y, x in list(zip(ys, xs))[::17]:
                tri = rig.faces[fr.tri_id[y, x]]
                a = np.vstack([uv[tri].T, np.ones(3)])
                bary = np.linalg.solve(a, [x + 0.5, y + 0.5, 1.0])
                assert abs(bary @ z[tri] - gt.depth[t, y, x]) < 1e-3


def test_clip_files_roundtrip(tmp_path):
    spec = sg.sample_spec(77, num_frames=4)
    clip, gt = sg.render_clip(spec)
    d = sg.write_clip(tmp_path / "c", spec, clip, gt)
    lc = dc.FileProvider().load(d)
    assert np.array_equal(lc.source.frames, clip.frames)
    np.testing.assert_array_equal(lc.depth, gt.depth.astype(np.float32))
    back = sg.SceneSpec.from_dict(sg.read_meta(d)["spec"])
    assert back.to_json() == spec.to_json()
    clip2, _ = sg.render_clip(back)
    assert np.array_equal(clip2.frames, clip.frames)
