import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from spatialsynth import bodymodel as bm
from spatialsynth.bodymodel import BodyRig, Camera, PoseParams, RigError
from spatialsynth.metrics import psnr


@pytest.fixture(scope="module")
def rig():
    return bm.default_rig()


def _chain_rig(child=(0.0, 1.0, 0.0)):
    verts = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.5, 0.5, 0.0]])
    return BodyRig(verts, np.array([[0, 1, 2]], dtype=np.int32), np.array([[0.0, 0, 0], child]),
                   np.array([-1, 0]), np.array([[1.0, 0], [0, 1], [0.5, 0.5]]))


def _random_pose(rng, scale=0.5):
    return PoseParams(rng.normal(0, scale, (16, 3)), rng.normal(0, 1, 3))


def test_default_rig_shape(rig):
    assert rig.num_vertices == 602 and rig.num_joints == 16
    assert np.all(rig.weights >= 0)
    np.testing.assert_allclose(rig.weights.sum(axis=1), 1.0, atol=1e-12)
    assert rig.parents[0] == -1
    assert rig.vertices[:, 1].min() == pytest.approx(0.0, abs=1e-9)


def test_identity_pose_transforms_identity(rig):
    tf = bm.forward_kinematics(rig, PoseParams.identity())
    assert np.array_equal(tf.skinning, np.broadcast_to(np.eye(4), (16, 4, 4)))
    np.testing.assert_array_equal(tf.positions, rig.joints)


def test_root_translation_propagates(rig):
    pose = PoseParams.identity()
    pose.translation[:] = (1.0, 0.0, 0.0)
    tf = bm.forward_kinematics(rig, pose)
    np.testing.assert_allclose(tf.positions, rig.joints + [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(tf.skinning[:, :3, 3], np.tile([1.0, 0, 0], (16, 1)), atol=1e-12)


def test_chain_child_rotates_with_root():
    r = _chain_rig()
    pose = PoseParams(np.array([[0, 0, math.pi / 2], [0, 0, 0]]), np.zeros(3))
    tf = bm.forward_kinematics(r, pose)
    np.testing.assert_allclose(tf.positions[1], [-1.0, 0.0, 0.0], atol=1e-12)
    # child = parent composed with local
    np.testing.assert_allclose(tf.world[1][:3, :3], tf.world[0][:3, :3] @ np.eye(3), atol=1e-12)


def test_joint_count_mismatch(rig):
    with pytest.raises(RigError):
        bm.forward_kinematics(rig, PoseParams.identity(15))


def test_identity_skin_exact(rig):
    assert np.array_equal(bm.pose_vertices(rig, PoseParams.identity()), rig.vertices)


def test_single_joint_rotation():
    r = BodyRig(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2]], dtype=np.int32),
                np.zeros((1, 3)), np.array([-1]), np.ones((3, 1)))
    v = bm.pose_vertices(r, PoseParams(np.array([[0, 0, math.pi / 2]]), np.zeros(3)))
    np.testing.assert_allclose(v[0], [0, 1, 0], atol=1e-12)


def test_lbs_collapse():
    r = BodyRig(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2]], dtype=np.int32),
                np.zeros((2, 3)), np.array([-1, 0]), np.full((3, 2), 0.5))
    v = bm.pose_vertices(r, PoseParams(np.array([[0, 0, 0], [0, 0, math.pi]]), np.zeros(3)))
    np.testing.assert_allclose(v[0], [0, 0, 0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_invariance(seed):
    rig = bm.default_rig()
    rng = np.random.default_rng(seed)
    pose = _random_pose(rng)
    pose.rotations[0] = 0.0
    pose.translation[:] = 0.0
    base = bm.pose_vertices(rig, pose)
    aa = rng.normal(0, 1.5, 3)
    t = rng.normal(0, 2, 3)
    moved = pose.copy()
    moved.rotations[0] = aa
    moved.translation[:] = t
    rot = bm.rodrigues(aa)
    j0 = rig.joints[0]
    expect = (base - j0) @ rot.T + j0 + t
    assert np.abs(bm.pose_vertices(rig, moved) - expect).max() <= 1e-5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_skinned_vertex_in_convex_hull(seed):
    rig = bm.default_rig()
    rng = np.random.default_rng(seed)
    tf = bm.forward_kinematics(rig, _random_pose(rng, 0.8))
    posed = bm.skin(rig, tf)
    for i in rng.choice(rig.num_vertices, 12, replace=False):
        js = np.nonzero(rig.weights[i])[0]
        pts = np.einsum("jab,b->ja", tf.skinning[js, :3, :3], rig.vertices[i]) + tf.skinning[js, :3, 3]
        # feasibility LP: lambda >= 0, sum lambda = 1, pts^T lambda = posed
        a_eq = np.vstack([pts.T, np.ones(len(js))])
        b_eq = np.append(posed[i], 1.0)
        res = linprog(np.zeros(len(js)), A_eq=a_eq, b_eq=b_eq, bounds=[(0, None)] * len(js))
        assert res.status == 0


def test_project_examples():
    cam = Camera(100, 100, 32, 32, 64, 64)
    uv, d, ok = cam.project(np.array([[0.0, 0, 3], [0.1, 0, 1], [1, 1, 0], [0, 0, -1]]))
    np.testing.assert_allclose(uv[0], [32, 32])
    assert d[0] == 3
    np.testing.assert_allclose(uv[1], [42, 32])
    assert d[1] == 1
    assert ok.tolist() == [True, True, False, False]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_unproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at(rng.normal(0, 3, 3) + [0, 0, -6], rng.normal(0, 0.5, 3), 120, 110, 96, 80)
    pts = rng.normal(0, 1, (50, 3))
    uv, d, ok = cam.project(pts)
    back = cam.unproject(uv[ok], d[ok])
    assert np.abs(back - pts[ok]).max() < 1e-5


def test_a_pose_arms_down(rig):
    v = bm.pose_vertices(rig, bm.a_pose())
    tf = bm.forward_kinematics(rig, bm.a_pose())
    lw, rw = tf.positions[bm.JOINT_NAMES.index("l_wrist")], tf.positions[bm.JOINT_NAMES.index("r_wrist")]
    assert lw[1] < 1.42 and rw[1] < 1.42 and lw[0] < 0 < rw[0]
    assert abs(lw[1] - rw[1]) < 1e-12
    assert np.all(np.isfinite(v))


def _colors(rig, seed=0):
    rng = np.random.default_rng(seed)
    pal = rng.uniform(0.1, 0.9, (len(bm.PART_NAMES), 3))
    return pal[rig.vertex_parts]


def _render_colored(rig, pose, cam, colors):
    v = bm.pose_vertices(rig, pose)
    fr, _, _ = bm.render_mesh(rig, v, cam)
    from spatialsynth.raster import interpolate
    return interpolate(fr, rig.faces, colors), fr.coverage


def test_canonicalize_identity_repose(rig):
    cam = bm.canonical_camera(64, 64)
    colors = _colors(rig)
    frame, cov = _render_colored(rig, bm.a_pose(), cam, colors)
    out = bm.canonicalize(rig, bm.a_pose(), frame, cam, mask=cov, canonical=cam)
    on = out[..., 3] > 0
    assert on.sum() > 0.5 * cov.sum()
    assert np.abs(out[..., :3][on] - frame[on]).mean() < 2 / 255


def test_canonicalize_matches_direct_render(rig):
    rng = np.random.default_rng(5)
    pose = PoseParams(rng.normal(0, 0.25, (16, 3)), np.array([0.0, 0, 0.2]))
    pose.rotations[0] = (0, 0.4, 0)
    cam = Camera.look_at((0.3, 1.0, -3.0), (0, 0.9, 0), 140, 140, 128, 128)
    colors = _colors(rig, 1)
    frame, cov = _render_colored(rig, pose, cam, colors)
    out = bm.canonicalize(rig, pose, frame, cam, mask=cov)
    ref, _ = _render_colored(rig, bm.a_pose(), bm.canonical_camera(), colors)
    on = out[..., 3] > 0
    assert on.sum() > 100
    assert psnr(out[..., :3][on], ref[on]) > 30


def test_canonicalize_occluded_vertices_transparent(rig):
    # viewed from behind: the front of the body carries no evidence
    cam = Camera.look_at((0, 0.9, 3.0), (0, 0.9, 0), 96, 96, 64, 64)
    colors, observed = bm.transfer_vertex_colors(rig, bm.a_pose(), np.ones((64, 64, 3)), cam)
    verts = rig.vertices
    torso = (rig.vertex_parts == 2) & (np.abs(verts[:, 0]) < 0.05) & (verts[:, 1] > 1.0) & (verts[:, 1] < 1.3)
    front = torso & (verts[:, 2] < -0.05)
    back = torso & (verts[:, 2] > 0.05)
    assert front.any() and back.any()
    assert not observed[front].any()
    assert observed[back].all()
    out = bm.render_canonical(rig, colors, observed)  # front view
    assert out[20:30, 28:36, 3].max() == 0


def test_canonicalize_empty_mask(rig):
    cam = bm.canonical_camera()
    out = bm.canonicalize(rig, bm.a_pose(), np.ones((64, 64, 3)), cam, mask=np.zeros((64, 64), bool))
    assert out.shape == (64, 64, 4) and not out.any()


def test_shape_scale(rig):
    tall = rig.with_shape((1.0, 1.1, 1.0))
    np.testing.assert_allclose(tall.vertices[:, 1], rig.vertices[:, 1] * 1.1)
    np.testing.assert_allclose(tall.with_shape((1, 1, 1)).vertices, rig.vertices, atol=1e-12)


def test_rig_file_roundtrip(rig, tmp_path):
    sidecar = bm.save_rig(rig, tmp_path / "body.obj")
    assert sidecar.name == "body.rig.json"
    back = bm.load_rig(tmp_path / "body.obj")
    np.testing.assert_allclose(back.vertices, rig.vertices, atol=1e-8)
    np.testing.assert_array_equal(back.faces, rig.faces)
    np.testing.assert_array_equal(back.weights, rig.weights)
    bm.save_rig_binary(rig, tmp_path / "body.bin")
    b2 = bm.load_rig_binary(tmp_path / "body.bin")
    np.testing.assert_array_equal(b2.vertices, rig.vertices)
    np.testing.assert_array_equal(b2.weights, rig.weights)


def test_bad_rig_rejected():
    r = _chain_rig()
    r.weights = r.weights * 0.5
    with pytest.raises(RigError):
        r.validate()


def test_pose_and_camera_files(tmp_path):
    rng = np.random.default_rng(2)
    poses = [_random_pose(rng) for _ in range(3)]
    bm.save_poses(tmp_path / "p.txt", poses)
    back = bm.load_poses(tmp_path / "p.txt")
    for a, b in zip(poses, back):
        assert np.array_equal(a.rotations, b.rotations) and np.array_equal(a.translation, b.translation)
    cams = [Camera.look_at((0, 1, -3), (0, 1, 0), 100, 100, 64, 48), Camera(50, 60, 10, 12, 20, 24)]
    bm.save_cameras(tmp_path / "c.txt", cams)
    for a, b in zip(cams, bm.load_cameras(tmp_path / "c.txt")):
        assert a.to_row() == b.to_row()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_axis_angle_inverts_rodrigues(vec):
    v = np.array(vec)
    r = bm.rodrigues(v)
    np.testing.assert_allclose(bm.rodrigues(bm.axis_angle(r)), r, atol=1e-9)
