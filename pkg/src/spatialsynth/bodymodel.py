"""Articulated low-poly body: rig, forward kinematics, skinning, cameras.

The default rig is a procedurally generated humanoid (602 vertices, 16
joints) built from capsule-like tubes, one per body segment, in a T-pose with
y up and the character facing -z.  Any rig with the same fields can be loaded
from disk (see :func:`save_rig` / :func:`load_rig`).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .raster import Fragments, interpolate, rasterize

JOINT_NAMES = (
    "pelvis", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)
REST_JOINTS = np.array([
    [0.00, 0.95, 0.0], [0.00, 1.22, 0.0], [0.00, 1.48, 0.0], [0.00, 1.58, 0.0],
    [-0.16, 1.42, 0.0], [-0.45, 1.42, 0.0], [-0.70, 1.42, 0.0],
    [0.16, 1.42, 0.0], [0.45, 1.42, 0.0], [0.70, 1.42, 0.0],
    [-0.10, 0.95, 0.0], [-0.10, 0.50, 0.0], [-0.10, 0.08, 0.0],
    [0.10, 0.95, 0.0], [0.10, 0.50, 0.0], [0.10, 0.08, 0.0],
])
PART_NAMES = ("skin", "hair", "shirt", "pants", "shoes")

# tube: start, end, radius (x, z) at start and end, rings, segments,
# skinning control points [(s, {joint: weight})], part control [(s_min, part)]
_TUBES = (
    ((0, 0.86, 0), (0, 1.52, 0), (0.16, 0.11), (0.17, 0.10), 11, 12,
     [(0.0, {0: 1}), (0.25, {0: 1}), (0.55, {1: 1}), (1.0, {1: 1})], [(0.0, 2)]),
    ((0, 1.46, 0), (0, 1.80, 0), (0.06, 0.06), (0.10, 0.10), 5, 10,
     [(0.0, {2: 1}), (0.3, {3: 1}), (1.0, {3: 1})], [(0.0, 0), (0.7, 1)]),
    ((-0.13, 1.42, 0), (-0.45, 1.42, 0), (0.055, 0.055), (0.045, 0.045), 6, 8,
     [(0.0, {1: 0.5, 4: 0.5}), (0.2, {4: 1}), (0.85, {4: 1}), (1.0, {4: 0.5, 5: 0.5})], [(0.0, 2)]),
    ((-0.45, 1.42, 0), (-0.80, 1.42, 0), (0.045, 0.045), (0.035, 0.035), 6, 8,
     [(0.0, {4: 0.5, 5: 0.5}), (0.15, {5: 1}), (0.65, {5: 1}), (0.75, {6: 1}), (1.0, {6: 1})], [(0.0, 0)]),
    ((0.13, 1.42, 0), (0.45, 1.42, 0), (0.055, 0.055), (0.045, 0.045), 6, 8,
     [(0.0, {1: 0.5, 7: 0.5}), (0.2, {7: 1}), (0.85, {7: 1}), (1.0, {7: 0.5, 8: 0.5})], [(0.0, 2)]),
    ((0.45, 1.42, 0), (0.80, 1.42, 0), (0.045, 0.045), (0.035, 0.035), 6, 8,
     [(0.0, {7: 0.5, 8: 0.5}), (0.15, {8: 1}), (0.65, {8: 1}), (0.75, {9: 1}), (1.0, {9: 1})], [(0.0, 0)]),
    ((-0.10, 0.98, 0), (-0.10, 0.50, 0), (0.08, 0.08), (0.06, 0.06), 7, 8,
     [(0.0, {0: 0.5, 10: 0.5}), (0.15, {10: 1}), (0.85, {10: 1}), (1.0, {10: 0.5, 11: 0.5})], [(0.0, 3)]),
    ((-0.10, 0.50, 0), (-0.10, 0.00, 0), (0.06, 0.06), (0.05, 0.05), 6, 8,
     [(0.0, {10: 0.5, 11: 0.5}), (0.15, {11: 1}), (0.8, {11: 1}), (0.88, {12: 1}), (1.0, {12: 1})],
     [(0.0, 3), (0.8, 4)]),
    ((0.10, 0.98, 0), (0.10, 0.50, 0), (0.08, 0.08), (0.06, 0.06), 7, 8,
     [(0.0, {0: 0.5, 13: 0.5}), (0.15, {13: 1}), (0.85, {13: 1}), (1.0, {13: 0.5, 14: 0.5})], [(0.0, 3)]),
    ((0.10, 0.50, 0), (0.10, 0.00, 0), (0.06, 0.06), (0.05, 0.05), 6, 8,
     [(0.0, {13: 0.5, 14: 0.5}), (0.15, {14: 1}), (0.8, {14: 1}), (0.88, {15: 1}), (1.0, {15: 1})],
     [(0.0, 3), (0.8, 4)]),
)


class RigError(ValueError):
    pass


@dataclass
class BodyRig:
    vertices: np.ndarray  # (V, 3) rest pose, meters
    faces: np.ndarray  # (F, 3) int32
    joints: np.ndarray  # (J, 3) rest positions
    parents: np.ndarray  # (J,) parent index, -1 for the root
    weights: np.ndarray  # (V, J) convex skinning weights
    shape_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    joint_names: tuple = ()
    vertex_parts: np.ndarray | None = None  # (V,) index into PART_NAMES

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    def validate(self) -> "BodyRig":
        v, j = self.num_vertices, self.num_joints
        if self.vertices.shape != (v, 3) or self.joints.shape != (j, 3):
            raise RigError("vertices and joints must be (N, 3)")
        if self.weights.shape != (v, j):
            raise RigError(f"weights must be ({v}, {j}), got {self.weights.shape}")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-6):
            raise RigError("skin weight rows must be non-negative and sum to 1")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or self.faces.min() < 0 or self.faces.max() >= v:
            raise RigError("faces must index valid vertices")
        parents = np.asarray(self.parents)
        if parents.shape != (j,) or parents[0] != -1 or np.any(parents[1:] < 0):
            raise RigError("parent array must be rooted at joint 0")
        if np.any(parents[1:] >= np.arange(1, j)):
            raise RigError("parents must precede their children")
        return self

    def with_shape(self, scale) -> "BodyRig":
        """Rig scaled per axis about the origin (simplified shape parameter)."""
        scale = np.asarray(scale, dtype=np.float64).reshape(3)
        rel = scale / self.shape_scale
        return replace(self, vertices=self.vertices * rel, joints=self.joints * rel, shape_scale=scale.copy())


@dataclass
class PoseParams:
    rotations: np.ndarray  # (J, 3) axis-angle, radians
    translation: np.ndarray  # (3,) root translation, meters

    @classmethod
    def identity(cls, num_joints: int = 16) -> "PoseParams":
        return cls(np.zeros((num_joints, 3)), np.zeros(3))

    def copy(self) -> "PoseParams":
        return PoseParams(self.rotations.copy(), self.translation.copy())


@dataclass
class JointTransforms:
    world: np.ndarray  # (J, 4, 4) joint frames in world space
    skinning: np.ndarray  # (J, 4, 4) rest-relative transforms (identity at rest)

    @property
    def positions(self) -> np.ndarray:
        return self.world[:, :3, 3]


def a_pose(num_joints: int = 16) -> PoseParams:
    """Shoulders abducted 45 degrees, every other rotation zero."""
    pose = PoseParams.identity(num_joints)
    pose.rotations[JOINT_NAMES.index("l_shoulder")] = (0.0, 0.0, math.pi / 4)
    pose.rotations[JOINT_NAMES.index("r_shoulder")] = (0.0, 0.0, -math.pi / 4)
    return pose


def rodrigues(axis_angle) -> np.ndarray:
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = math.sqrt(float(r @ r))
    if theta == 0.0:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def axis_angle(rot) -> np.ndarray:
    """Inverse of :func:`rodrigues` (angle in [0, pi])."""
    r = np.asarray(rot, dtype=np.float64)
    cos = min(max((np.trace(r) - 1.0) / 2.0, -1.0), 1.0)
    theta = math.acos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if math.pi - theta > 1e-6:
        return v * (theta / (2.0 * math.sin(theta)))
    # near pi: axis from the symmetric part
    k = int(np.argmax(np.diag(r)))
    axis = (r[:, k] + np.eye(3)[k]) / math.sqrt(2.0 * (1.0 + r[k, k]))
    if axis @ v < 0:
        axis = -axis
    return axis * theta


def _rigid(rot, trans) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


# ------------------------------------------------------------------ rig build

def _lerp_controls(controls, s, num_joints):
    w = np.zeros(num_joints)
    ss = [c[0] for c in controls]
    s = min(max(s, 0.0), 1.0)
    k = int(np.searchsorted(ss, s, side="right")) - 1
    k = min(max(k, 0), len(controls) - 1)
    if k == len(controls) - 1:
        for j, v in controls[k][1].items():
            w[j] += v
        return w
    s0, s1 = ss[k], ss[k + 1]
    t = 0.0 if s1 == s0 else (s - s0) / (s1 - s0)
    for j, v in controls[k][1].items():
        w[j] += (1 - t) * v
    for j, v in controls[k + 1][1].items():
        w[j] += t * v
    return w


def default_rig() -> BodyRig:
    """The procedural desk-scale humanoid (V=602, J=16)."""
    verts, faces, weights, parts = [], [], [], []
    nj = len(JOINT_NAMES)
    for start, end, r0, r1, rings, segs, controls, part_ctrl in _TUBES:
        p0 = np.array(start, dtype=np.float64)
        p1 = np.array(end, dtype=np.float64)
        axis = p1 - p0
        length = np.linalg.norm(axis)
        a = axis / length
        ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(a, ref)
        u /= np.linalg.norm(u)
        w = np.cross(a, u)
        base = len(verts)

        def part_at(s):
            p = part_ctrl[0][1]
            for smin, pid in part_ctrl:
                if s >= smin:
                    p = pid
            return p

        for k in range(rings):
            s = (k + 0.5) / rings
            round_ = math.sqrt(max(1.0 - (2.0 * s - 1.0) ** 6, 0.05))
            rx = (r0[0] + (r1[0] - r0[0]) * s) * round_
            rz = (r0[1] + (r1[1] - r0[1]) * s) * round_
            c = p0 + axis * s
            for m in range(segs):
                th = 2.0 * math.pi * m / segs
                ex = u if abs(u[0]) >= abs(w[0]) else w
                ez = w if ex is u else u
                verts.append(c + rx * math.cos(th) * ex + rz * math.sin(th) * ez)
                weights.append(_lerp_controls(controls, s, nj))
                parts.append(part_at(s))
        for s, p in ((0.0, p0), (1.0, p1)):
            verts.append(p.copy())
            weights.append(_lerp_controls(controls, s, nj))
            parts.append(part_at(s))
        cap0, cap1 = len(verts) - 2, len(verts) - 1
        for k in range(rings - 1):
            for m in range(segs):
                a0 = base + k * segs + m
                a1 = base + k * segs + (m + 1) % segs
                b0 = a0 + segs
                b1 = a1 + segs
                faces.append((a0, b0, a1))
                faces.append((a1, b0, b1))
        last = base + (rings - 1) * segs
        for m in range(segs):
            faces.append((cap0, base + (m + 1) % segs, base + m))
            faces.append((cap1, last + m, last + (m + 1) % segs))
    wts = np.array(weights)
    wts /= wts.sum(axis=1, keepdims=True)
    return BodyRig(
        vertices=np.array(verts),
        faces=np.array(faces, dtype=np.int32),
        joints=REST_JOINTS.copy(),
        parents=np.array(PARENTS),
        weights=wts,
        joint_names=JOINT_NAMES,
        vertex_parts=np.array(parts, dtype=np.int32),
    ).validate()


# ---------------------------------------------------------------- kinematics

def forward_kinematics(rig: BodyRig, pose: PoseParams) -> JointTransforms:
    """Per-joint world frames and rest-relative skinning transforms.

    Each skinning transform is the parent's composed with a rotation about
    the joint's rest position, so an identity pose yields exact identities.
    """
    rot = np.asarray(pose.rotations, dtype=np.float64)
    if rot.shape != (rig.num_joints, 3):
        raise RigError(f"pose has {rot.shape[0]} joint rotations, rig has {rig.num_joints} joints")
    trans = np.asarray(pose.translation, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
        raise RigError("pose parameters must be finite")
    skinning = np.empty((rig.num_joints, 4, 4))
    for j in range(rig.num_joints):
        r = rodrigues(rot[j])
        local = _rigid(r, rig.joints[j] - r @ rig.joints[j])
        if j == 0:
            local[:3, 3] += trans
            skinning[j] = local
        else:
            skinning[j] = skinning[rig.parents[j]] @ local
    world = skinning.copy()
    world[:, :3, 3] = skinning[:, :3, 3] + np.einsum("jab,jb->ja", skinning[:, :3, :3], rig.joints)
    return JointTransforms(world=world, skinning=skinning)


def skin(rig: BodyRig, transforms: JointTransforms) -> np.ndarray:
    """Linear blend skinning, ``v' = sum_j w_j A_j v`` (written as a displacement)."""
    a = transforms.skinning
    if a.shape != (rig.num_joints, 4, 4):
        raise RigError("transforms do not match the rig")
    v = rig.vertices
    eye = np.eye(3)
    # per joint displacement (R_j - I) v + t_j, blended by the weights
    disp = np.einsum("jab,vb->vja", a[:, :3, :3] - eye, v) + a[None, :, :3, 3]
    return v + np.einsum("vj,vja->va", rig.weights, disp)


def pose_vertices(rig: BodyRig, pose: PoseParams) -> np.ndarray:
    return skin(rig, forward_kinematics(rig, pose))


# -------------------------------------------------------------------- camera

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extents must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, cx=None, cy=None, up=(0.0, 1.0, 0.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points down."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, rot, -rot @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """Pinhole projection of world points.

        Returns ``(uv, depth, valid)``: pixel coordinates (N, 2), camera-space
        depth (N,), and a flag that is False for points at or behind the
        camera plane (their uv is NaN).
        """
        pc = self.to_camera(points)
        z = pc[:, 2]
        valid = z > 0.0
        uv = np.full((pc.shape[0], 2), np.nan)
        zs = z[valid]
        uv[valid, 0] = self.fx * pc[valid, 0] / zs + self.cx
        uv[valid, 1] = self.fy * pc[valid, 1] / zs + self.cy
        return uv, z, valid

    def unproject(self, uv, depth) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        pc = np.stack([(uv[:, 0] - self.cx) * z / self.fx, (uv[:, 1] - self.cy) * z / self.fy, z], axis=1)
        return (pc - self.translation) @ self.rotation

    def pixel_rays(self):
        """World-space ray direction through every pixel center, (H, W, 3), with unit camera-z."""
        i, j = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(i - self.cx) / self.fx, (j - self.cy) / self.fy, np.ones_like(i)], axis=-1)
        return d @ self.rotation

    def translated(self, offset) -> "Camera":
        """Same intrinsics, camera center moved by ``offset`` (world)."""
        return replace(self, translation=self.translation - self.rotation @ np.asarray(offset, dtype=np.float64))

    def to_row(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                *self.rotation.ravel().tolist(), *self.translation.tolist()]

    @classmethod
    def from_row(cls, row) -> "Camera":
        row = [float(x) for x in row]
        return cls(row[0], row[1], row[2], row[3], int(row[4]), int(row[5]),
                   np.array(row[6:15]).reshape(3, 3), np.array(row[15:18]))


def canonical_camera(width: int = 64, height: int = 64) -> Camera:
    """Front view framing the default rig in A-pose."""
    dist = 3.0
    f = 0.5 * height * dist / 1.0
    return Camera.look_at((0.0, 0.9, -dist), (0.0, 0.9, 0.0), f, f, width, height)


def render_mesh(rig: BodyRig, vertices: np.ndarray, camera: Camera) -> tuple[Fragments, np.ndarray, np.ndarray]:
    """Rasterize posed ``vertices`` of ``rig``; returns fragments and the projection."""
    uv, depth, valid = camera.project(vertices)
    frags = rasterize(np.nan_to_num(uv), depth, valid, rig.faces, camera.width, camera.height)
    return frags, uv, valid


# ------------------------------------------------------------ canonicalize

def transfer_vertex_colors(rig: BodyRig, pose: PoseParams, frame, camera: Camera, mask=None):
    """Sample a color for every vertex visible in ``frame``.

    The frame is sampled bilinearly at the vertex's projection, using only
    the taps whose front-most triangle is incident to that vertex (and that
    lie inside ``mask``).  A vertex with no such tap is unobserved: it is
    occluded, off-screen or masked out.  Returns ``(colors (V, C), observed (V,))``.
    """
    frame = np.asarray(frame)
    if frame.shape[:2] != (camera.height, camera.width):
        raise ValueError("frame extents do not match the camera")
    img = frame.astype(np.float64)
    h, w = img.shape[:2]
    verts = pose_vertices(rig, pose)
    frags, uv, valid = render_mesh(rig, verts, camera)
    keep = frags.coverage if mask is None else frags.coverage & np.asarray(mask, dtype=bool)
    idx = np.nonzero(valid)[0]
    x = uv[idx, 0] - 0.5
    y = uv[idx, 1] - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    acc = np.zeros((idx.size,) + img.shape[2:])
    tot = np.zeros(idx.size)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
        tid = frags.tri_id[yc, xc]
        ok = inb & keep[yc, xc]
        ok &= (rig.faces[np.maximum(tid, 0)] == idx[:, None]).any(axis=1)
        wt = np.where(ok, (fx if dx else 1 - fx) * (fy if dy else 1 - fy), 0.0)
        # a tap exactly on the far side of the stencil still counts as evidence
        wt = np.where(ok, np.maximum(wt, 1e-9), 0.0)
        acc += wt.reshape((-1,) + (1,) * (img.ndim - 2)) * img[yc, xc]
        tot += wt
    seen = tot > 0
    colors = np.zeros((rig.num_vertices,) + img.shape[2:])
    observed = np.zeros(rig.num_vertices, dtype=bool)
    colors[idx[seen]] = acc[seen] / tot[seen].reshape((-1,) + (1,) * (img.ndim - 2))
    observed[idx[seen]] = True
    return colors, observed


def render_canonical(rig: BodyRig, colors, observed, camera: Camera | None = None) -> np.ndarray:
    """Render the rig in A-pose with per-vertex colors.

    Pixels whose front triangle has an unobserved vertex are transparent.
    Returns ``(H, W, C + 1)`` with alpha last.
    """
    camera = camera or canonical_camera()
    colors = np.asarray(colors, dtype=np.float64)
    if colors.ndim == 1:
        colors = colors[:, None]
    verts = pose_vertices(rig, a_pose(rig.num_joints))
    frags, _, _ = render_mesh(rig, verts, camera)
    out = np.zeros((camera.height, camera.width, colors.shape[1] + 1))
    cov = frags.coverage
    if not cov.any() or not np.any(observed):
        return out
    full = np.zeros(cov.shape, dtype=bool)
    full[cov] = np.asarray(observed)[rig.faces[frags.tri_id[cov]]].all(axis=1)
    rgb = interpolate(frags, rig.faces, colors)
    out[..., :-1][full] = rgb[full]
    out[..., -1][full] = 1.0
    return out


def canonicalize(rig: BodyRig, pose: PoseParams, frame, camera: Camera, mask=None,
                 canonical: Camera | None = None) -> np.ndarray:
    """Re-render the observed character of ``frame`` in the canonical A-pose.

    Colors are transferred per vertex from the posed frame; regions without
    vertex evidence (self-occluded, masked out, off-screen) stay transparent.
    """
    if mask is not None and not np.any(mask):
        canonical = canonical or canonical_camera()
        depth = frame.shape[2] if np.ndim(frame) == 3 else 1
        return np.zeros((canonical.height, canonical.width, depth + 1))
    colors, observed = transfer_vertex_colors(rig, pose, frame, camera, mask)
    return render_canonical(rig, colors, observed, canonical)


def canonicalize_clip(rig: BodyRig, poses, frames, cameras, masks=None,
                      canonical: Camera | None = None) -> np.ndarray:
    """Multi-frame :func:`canonicalize`: each vertex takes the mean color over
    the frames that observe it, so evidence accumulates across the clip."""
    frames = np.asarray(frames)
    acc = None
    count = np.zeros(rig.num_vertices)
    for t, (pose, cam) in enumerate(zip(poses, cameras)):
        mask = None if masks is None else masks[t]
        if mask is not None and not np.any(mask):
            continue
        colors, observed = transfer_vertex_colors(rig, pose, frames[t], cam, mask)
        if acc is None:
            acc = np.zeros_like(colors)
        acc[observed] += colors[observed]
        count += observed
    if acc is None:
        acc = np.zeros((rig.num_vertices,) + frames.shape[3:])
    seen = count > 0
    acc[seen] /= count[seen].reshape((-1,) + (1,) * (acc.ndim - 1))
    return render_canonical(rig, acc, seen, canonical)


# ---------------------------------------------------------------------- I/O

def save_rig(rig: BodyRig, obj_path) -> Path:
    """Write ``<name>.obj`` (v/f lines, 1-based) and ``<name>.rig.json``.

    The sidecar holds ``joints`` (J x 3), ``parents`` (J), ``joint_names``,
    ``shape_scale`` (3), ``vertex_parts`` (V or null) and sparse
    ``skin_weights`` as ``[vertex, joint, weight]`` triples.
    """
    obj_path = Path(obj_path)
    lines = ["# spatialsynth rig mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in rig.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in rig.faces]
    obj_path.write_text("\n".join(lines) + "\n")
    vi, ji = np.nonzero(rig.weights)
    side = {
        "format": "spatialsynth-rig",
        "version": 1,
        "joint_names": list(rig.joint_names),
        "parents": [int(p) for p in rig.parents],
        "joints": rig.joints.tolist(),
        "shape_scale": np.asarray(rig.shape_scale).tolist(),
        "vertex_parts": None if rig.vertex_parts is None else rig.vertex_parts.tolist(),
        "skin_weights": [[int(v), int(j), float(rig.weights[v, j])] for v, j in zip(vi, ji)],
    }
    sidecar = obj_path.with_suffix(".rig.json")
    sidecar.write_text(json.dumps(side))
    return sidecar


def load_rig(obj_path) -> BodyRig:
    obj_path = Path(obj_path)
    verts, faces = [], []
    for line in obj_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    side = json.loads(obj_path.with_suffix(".rig.json").read_text())
    if side.get("format") != "spatialsynth-rig":
        raise RigError(f"{obj_path}: unknown rig sidecar format")
    joints = np.array(side["joints"], dtype=np.float64)
    weights = np.zeros((len(verts), len(joints)))
    for v, j, w in side["skin_weights"]:
        weights[v, j] = w
    parts = side.get("vertex_parts")
    return BodyRig(
        vertices=np.array(verts), faces=np.array(faces, dtype=np.int32), joints=joints,
        parents=np.array(side["parents"]), weights=weights, shape_scale=np.array(side["shape_scale"]),
        joint_names=tuple(side["joint_names"]),
        vertex_parts=None if parts is None else np.array(parts, dtype=np.int32),
    ).validate()


_BIN_MAGIC = b"SSRIGB1\0"


def save_rig_binary(rig: BodyRig, path) -> None:
    """Little-endian binary rig: magic, u32 V F J, then f64 vertices (V*3),
    i32 faces (F*3), f64 joints (J*3), i32 parents (J), f64 weights (V*J),
    f64 shape_scale (3)."""
    v, f, j = rig.num_vertices, rig.faces.shape[0], rig.num_joints
    blob = [_BIN_MAGIC, struct.pack("<3I", v, f, j),
            rig.vertices.astype("<f8").tobytes(), rig.faces.astype("<i4").tobytes(),
            rig.joints.astype("<f8").tobytes(), np.asarray(rig.parents).astype("<i4").tobytes(),
            rig.weights.astype("<f8").tobytes(), np.asarray(rig.shape_scale).astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(blob))


def load_rig_binary(path) -> BodyRig:
    raw = Path(path).read_bytes()
    if raw[:8] != _BIN_MAGIC:
        raise RigError(f"{path}: not a binary rig")
    v, f, j = struct.unpack_from("<3I", raw, 8)
    pos = 20

    def take(dtype, n):
        nonlocal pos
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
        pos += arr.nbytes
        return arr

    verts = take("<f8", v * 3).reshape(v, 3)
    faces = take("<i4", f * 3).reshape(f, 3)
    joints = take("<f8", j * 3).reshape(j, 3)
    parents = take("<i4", j)
    weights = take("<f8", v * j).reshape(v, j)
    scale = take("<f8", 3)
    return BodyRig(verts.astype(np.float64), faces.astype(np.int32), joints.astype(np.float64),
                   parents.astype(np.int64), weights.astype(np.float64), scale.astype(np.float64)).validate()


def save_poses(path, poses: list[PoseParams]) -> None:
    """Text pose file: header line, then one line per frame with the root
    translation (3 values) followed by J axis-angle triples."""
    j = poses[0].rotations.shape[0]
    lines = [f"# spatialsynth poses v1 frames={len(poses)} joints={j}"]
    for p in poses:
        vals = list(np.asarray(p.translation).ravel()) + list(np.asarray(p.rotations).ravel())
        lines.append(" ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> list[PoseParams]:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    out = []
    for ln in rows:
        vals = np.array([float(x) for x in ln.split()])
        out.append(PoseParams(vals[3:].reshape(-1, 3), vals[:3]))
    return out


def save_cameras(path, cameras: list[Camera]) -> None:
    """Text camera file: one line per frame, ``fx fy cx cy width height R(9, row-major) t(3)``."""
    lines = [f"# spatialsynth cameras v1 frames={len(cameras)}"]
    lines += [" ".join(repr(float(x)) for x in c.to_row()) for c in cameras]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return [Camera.from_row(ln.split()) for ln in rows]
