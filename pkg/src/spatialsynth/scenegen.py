"""Procedural character clips with exact ground truth.

A clip is a textured background plane far behind a skinned, flat-colored
character, with camera-facing discs and rounded bars moving in front of or
behind it.  The camera keeps its orientation and may pan, which gives the
background parallax.  Every render emits frames, depth, amodal instance
detections (frame-local shuffled ids), per-pixel layer labels, the pose and
camera of every frame, and the character's canonical A-pose render.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from .decompose import Detection, Masklet, save_depth, save_detections, save_masklet
from .media import VideoClip, save_frames, to_uint8
from .raster import interpolate

BACKGROUNDS = ("waves", "checker", "stripes", "blobs")
POSE_SOURCES = ("walk", "wave", "dance")
ROLE_IDS = {"human": 0, "occlusion": 1, "scene": 2}

# world layout (meters): camera near z = -3.3 looking down +z
CAMERA_Z = -3.3
BACKGROUND_Z = 5.0
FRONT_Z = (-2.0, -1.0)
BACK_Z = (1.0, 3.5)


class SceneError(ValueError):
    pass


@dataclass
class ObjectSpec:
    kind: str  # "disc" or "bar"
    role: str  # "occlusion" (in front of the character) or "scene"
    color: list
    z: float  # world depth of the object's plane
    size: float  # disc radius / bar half-thickness (m)
    length: float  # bar half-length (m), 0 for discs
    angle: float  # bar orientation (rad)
    start: list  # (x, y) world position at frame 0
    velocity: list  # (x, y) per frame
    spin: float = 0.0  # bar rotation per frame


@dataclass
class SceneSpec:
    seed: int
    width: int = 64
    height: int = 64
    num_frames: int = 16
    background: str = "waves"
    bg_colors: list = field(default_factory=lambda: [[0.4, 0.5, 0.6], [0.7, 0.6, 0.4], [0.3, 0.4, 0.3]])
    bg_params: list = field(default_factory=lambda: [1.0, 0.0, 0.0, 1.0])  # frequencies/phases
    objects: list = field(default_factory=list)
    palette: list = field(default_factory=lambda: [[0.8, 0.6, 0.5], [0.2, 0.15, 0.1], [0.2, 0.4, 0.8],
                                                   [0.25, 0.25, 0.3], [0.1, 0.1, 0.1]])
    shape_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    pose_source: str = "walk"  # walk | wave | dance | static | path to a pose file
    pose_params: list = field(default_factory=lambda: [0.0, 0.5, 0.0, 0.0])  # phase, rate, yaw, drift
    root: list = field(default_factory=lambda: [0.0, 0.0])  # (x, z) world position at frame 0
    camera_pan: list = field(default_factory=lambda: [0.0, 0.0])  # eye (x, y) motion per frame
    camera_x: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in d.get("objects", [])]
        return cls(**d)


@dataclass
class GroundTruth:
    depth: np.ndarray  # (N, H, W)
    detections: list  # per frame list of Detection (shuffled labels)
    label_to_gt: list  # per frame dict det label -> gt id (0 = character)
    roles: dict  # gt id -> role
    role_map: np.ndarray  # (N, H, W) int8: 0 human, 1 occlusion, 2 scene
    human_amodal: np.ndarray  # (N, H, W) bool, the whole character (occluded parts included)
    poses: list
    cameras: list
    colors: np.ndarray  # (V, 3) per-vertex character colors
    canonical: np.ndarray  # (64, 64, 4) RGBA canonical render
    human_layer: np.ndarray  # (N, H, W, 3) unoccluded character over black, float


# ------------------------------------------------------------------ poses

def _rot(axis, angle):
    v = np.zeros(3)
    v["xyz".index(axis)] = angle
    return bm.rodrigues(v)


def procedural_poses(source: str, n: int, params, num_joints: int = 16) -> list[bm.PoseParams]:
    """Walk, wave, dance or static sequences; ``params`` = phase, rate, yaw, drift."""
    phase, rate, yaw, drift = (float(x) for x in params[:4])
    rng = np.random.default_rng(int(abs(phase) * 1e6) % (2**32))  # dance amplitudes
    amp = rng.uniform(0.1, 0.45, (num_joints, 3))
    freq = rng.uniform(0.5, 1.5, (num_joints, 3))
    off = rng.uniform(0, 2 * math.pi, (num_joints, 3))
    j = bm.JOINT_NAMES.index
    poses = []
    for t in range(n):
        ph = phase + rate * t
        rots = [np.eye(3) for _ in range(num_joints)]
        down = 1.25
        rots[j("l_shoulder")] = _rot("z", down)
        rots[j("r_shoulder")] = _rot("z", -down)
        rots[j("l_elbow")] = _rot("y", 0.2)
        rots[j("r_elbow")] = _rot("y", -0.2)
        bob = 0.0
        if source == "walk":
            s = math.sin(ph)
            rots[j("l_hip")] = _rot("x", 0.45 * s)
            rots[j("r_hip")] = _rot("x", -0.45 * s)
            rots[j("l_knee")] = _rot("x", -0.7 * max(0.0, -s))
            rots[j("r_knee")] = _rot("x", -0.7 * max(0.0, s))
            rots[j("l_shoulder")] = _rot("x", -0.4 * s) @ _rot("z", down)
            rots[j("r_shoulder")] = _rot("x", 0.4 * s) @ _rot("z", -down)
            bob = 0.02 * abs(math.cos(ph))
        elif source == "wave":
            rots[j("r_shoulder")] = _rot("z", 0.5)
            rots[j("r_elbow")] = _rot("z", 1.0 + 0.6 * math.sin(2 * ph))
            rots[j("head")] = _rot("y", 0.2 * math.sin(ph))
            rots[j("chest")] = _rot("z", 0.08 * math.sin(ph))
        elif source == "dance":
            for k in range(1, num_joints):
                osc = amp[k] * np.sin(freq[k] * ph + off[k])
                rots[k] = rots[k] @ bm.rodrigues(osc)
        elif source != "static":
            raise SceneError(f"unknown pose source {source!r}")
        rot = np.array([bm.axis_angle(r) for r in rots])
        rot[0] = (0.0, yaw, 0.0)
        poses.append(bm.PoseParams(rot, np.array([drift * t, bob, 0.0])))
    return poses


# -------------------------------------------------------------- background

def background_color(kind: str, colors, params, x, y) -> np.ndarray:
    """Texture color at world plane coordinates ``x, y`` (arrays) -> (..., 3)."""
    c = np.asarray(colors, dtype=np.float64)
    f1, p1, p2, f2 = params
    if kind == "waves":
        a = 0.5 + 0.5 * np.sin(f1 * x + 0.6 * f2 * y + p1)
        b = 0.5 + 0.5 * np.sin(f2 * y - 0.4 * f1 * x + p2)
    elif kind == "checker":
        a = 0.5 + 0.5 * np.tanh(3.0 * np.sin(f1 * x + p1) * np.sin(f1 * y + p2))
        b = 0.5 + 0.5 * np.sin(0.5 * f2 * (x + y))
    elif kind == "stripes":
        a = 0.5 + 0.5 * np.tanh(2.5 * np.sin(f1 * (x * math.cos(p2) + y * math.sin(p2)) + p1))
        b = 0.5 + 0.5 * np.sin(0.5 * f2 * y)
    elif kind == "blobs":
        a = np.zeros_like(x)
        g = np.random.default_rng(int(abs(p1) * 1e6) % (2**32)).uniform(-5, 5, (8, 2))
        for cx, cy in g:
            a = a + np.exp(-((x - cx) ** 2 + (y - 1.0 - cy / 2) ** 2) * f1 * 0.5)
        a = np.clip(a, 0, 1)
        b = 0.5 + 0.5 * np.sin(f2 * x + p2)
    else:
        raise SceneError(f"unknown background family {kind!r}")
    a = a[..., None]
    b = b[..., None]
    return (c[0] * (1 - a) + c[1] * a) * (1 - 0.4 * b) + c[2] * 0.4 * b


# ------------------------------------------------------------------ camera

def clip_camera(spec: SceneSpec, t: int) -> bm.Camera:
    f = 1.15 * spec.width
    eye0 = np.array([spec.camera_x, 1.0, CAMERA_Z])
    cam = bm.Camera.look_at(eye0, (spec.camera_x, 0.9, 0.0), f, f, spec.width, spec.height)
    pan = np.array([spec.camera_pan[0] * t, spec.camera_pan[1] * t, 0.0])
    return cam.translated(pan)


# ------------------------------------------------------------------ shapes

def _object_mask(obj: ObjectSpec, cam: bm.Camera, t: int):
    """Image-space mask and camera depth of a camera-facing primitive."""
    cx = obj.start[0] + obj.velocity[0] * t
    cy = obj.start[1] + obj.velocity[1] * t
    center = np.array([[cx, cy, obj.z]])
    uv, depth, ok = cam.project(center)
    if not ok[0]:
        return np.zeros((cam.height, cam.width), bool), float(depth[0])
    z = float(depth[0])
    scale = cam.fx / z
    px = np.arange(cam.width) + 0.5
    py = np.arange(cam.height) + 0.5
    dx = px[None, :] - uv[0, 0]
    dy = py[:, None] - uv[0, 1]
    r = obj.size * scale
    if obj.kind == "disc":
        return dx * dx + dy * dy <= r * r, z
    ang = obj.angle + obj.spin * t
    # image y points down: world direction (cos, sin) maps to (cos, -sin)
    ux, uy = math.cos(ang), -math.sin(ang)
    half = obj.length * scale
    along = np.clip(dx * ux + dy * uy, -half, half)
    ex = dx - along * ux
    ey = dy - along * uy
    return ex * ex + ey * ey <= r * r, z


def _iou(a, b):
    inter = np.count_nonzero(a & b)
    return inter / max(np.count_nonzero(a | b), 1)


# ----------------------------------------------------------------- render

def render_clip(spec: SceneSpec, rig: bm.BodyRig | None = None):
    """Render a clip; returns ``(VideoClip, GroundTruth)``."""
    base = rig or bm.default_rig()
    rig = base.with_shape(spec.shape_scale)
    n, h, w = spec.num_frames, spec.height, spec.width
    if spec.pose_source in POSE_SOURCES + ("static",):
        poses = procedural_poses(spec.pose_source, n, spec.pose_params, rig.num_joints)
    else:
        poses = bm.load_poses(spec.pose_source)
        if len(poses) < n:
            raise SceneError(f"pose file {spec.pose_source} has {len(poses)} frames, need {n}")
        poses = poses[:n]
    for p in poses:
        p.translation = p.translation + np.array([spec.root[0], 0.0, spec.root[1]])
    palette = np.asarray(spec.palette, dtype=np.float64)
    colors = palette[rig.vertex_parts]
    rng = np.random.default_rng(spec.seed)
    frames = np.zeros((n, h, w, 3))
    depth = np.zeros((n, h, w))
    role_map = np.zeros((n, h, w), np.int8)
    amodal = np.zeros((n, h, w), bool)
    human_layer = np.zeros((n, h, w, 3))
    detections, label_maps, cameras = [], [], []
    roles = {0: "human"}
    for k, obj in enumerate(spec.objects, start=1):
        roles[k] = obj.role
    for t in range(n):
        cam = clip_camera(spec, t)
        cameras.append(cam)
        rays = cam.pixel_rays()
        eye = cam.center
        dist = (BACKGROUND_Z - eye[2]) / rays[..., 2]
        hit = eye + rays * dist[..., None]
        img = background_color(spec.background, spec.bg_colors, spec.bg_params, hit[..., 0], hit[..., 1])
        zbuf = dist.copy()  # rays have unit camera-z, so the ray parameter is the depth
        owner = np.full((h, w), 2, np.int8)
        masks = {}
        # human
        verts = bm.pose_vertices(rig, poses[t])
        frags, _, _ = bm.render_mesh(rig, verts, cam)
        hcov = frags.coverage
        masks[0] = hcov
        hcol = interpolate(frags, rig.faces, colors)
        human_layer[t][hcov] = hcol[hcov]
        win = hcov & (frags.zbuf < zbuf)
        img[win] = hcol[win]
        zbuf[win] = frags.zbuf[win]
        owner[win] = 0
        for k, obj in enumerate(spec.objects, start=1):
            m, z = _object_mask(obj, cam, t)
            masks[k] = m
            win = m & (z < zbuf)
            img[win] = obj.color
            zbuf[win] = z
            owner[win] = ROLE_IDS[obj.role]
        frames[t] = img
        depth[t] = zbuf
        role_map[t] = owner
        amodal[t] = hcov
        # detections with frame-local shuffled labels
        present = [k for k in sorted(masks) if masks[k].any()]
        labels = rng.permutation(len(present)) + 1
        dets, lmap = [], {}
        for k, lab in zip(present, labels):
            dets.append(Detection(int(lab), "human" if k == 0 else "object", masks[k]))
            lmap[int(lab)] = k
        dets.sort(key=lambda d: d.label)
        detections.append(dets)
        label_maps.append(lmap)
    if not amodal.any():
        raise SceneError(f"clip {spec.seed}: character is outside the view in every frame")
    ones = np.ones(rig.num_vertices, bool)
    canonical = bm.render_canonical(rig, colors, ones)
    gt = GroundTruth(depth, detections, label_maps, roles, role_map, amodal, poses, cameras, colors,
                     canonical, human_layer)
    return VideoClip(to_uint8(frames), depth=depth), gt


# ---------------------------------------------------------------- sampling

@dataclass
class SceneDistribution:
    """Sampler settings; probabilities must each sum to 1."""

    object_counts: tuple = (0.15, 0.35, 0.3, 0.2)  # P(0..3 objects)
    p_front: float = 0.4  # P(object is an occluder)
    p_bar: float = 0.4
    backgrounds: tuple = (0.25, 0.25, 0.25, 0.25)
    pose_sources: tuple = (0.4, 0.3, 0.3)
    camera_pan: float = 0.02  # max eye motion per frame (m) at 16 frames

    def role_probabilities(self) -> dict:
        return {"occlusion": self.p_front, "scene": 1.0 - self.p_front}


def _sample_object(rng, role, spec, frames):
    kind = "bar" if rng.random() < 0.4 else "disc"
    z = rng.uniform(*FRONT_Z) if role == "occlusion" else rng.uniform(*BACK_Z)
    depth = z - CAMERA_Z
    # visible half-extent of the view at this depth
    half = 0.5 * spec.width / (1.15 * spec.width) * depth
    size = rng.uniform(0.06, 0.12) * depth
    length = rng.uniform(1.5, 3.0) * size if kind == "bar" else 0.0
    start = [rng.uniform(-0.7, 0.7) * half, 0.9 + rng.uniform(-0.7, 0.7) * half]
    speed = rng.uniform(0.0, 0.25) * size
    ang = rng.uniform(0, 2 * math.pi)
    vel = [speed * math.cos(ang), speed * math.sin(ang)]
    hue = rng.uniform(0.05, 0.95, 3)
    hue[rng.integers(3)] = rng.uniform(0.0, 0.2)  # keep colors saturated
    return ObjectSpec(kind, role, hue.tolist(), float(z), float(size), float(length),
                      float(rng.uniform(0, math.pi)), start, vel, float(rng.uniform(-0.05, 0.05)))


def _trackable(spec: SceneSpec) -> bool:
    """Every object stays in view, changes little between frames and never
    overlaps another track more than it overlaps its own past."""
    masks = []
    for t in range(spec.num_frames):
        cam = clip_camera(spec, t)
        row = []
        for obj in spec.objects:
            m, _ = _object_mask(obj, cam, t)
            if m.sum() < 6:
                return False
            row.append(m)
        masks.append(row)
    k = len(spec.objects)
    for t in range(spec.num_frames):
        for i in range(k):
            for j in range(i + 1, k):
                if _iou(masks[t][i], masks[t][j]) >= 0.25:
                    return False
        if t == 0:
            continue
        for i in range(k):
            if _iou(masks[t - 1][i], masks[t][i]) < 0.5:
                return False
            for j in range(k):
                if i != j and _iou(masks[t - 1][i], masks[t][j]) >= 0.25:
                    return False
    return True


def sample_spec(seed: int, width: int = 64, height: int = 64, num_frames: int = 16,
                dist: SceneDistribution | None = None) -> SceneSpec:
    """Draw a scene from ``dist``; the object count and roles are drawn first
    and never resampled, so their histogram follows ``dist`` exactly."""
    dist = dist or SceneDistribution()
    rng = np.random.default_rng(seed)
    count = int(rng.choice(len(dist.object_counts), p=dist.object_counts))
    roles = ["occlusion" if rng.random() < dist.p_front else "scene" for _ in range(count)]
    bg = BACKGROUNDS[int(rng.choice(len(BACKGROUNDS), p=dist.backgrounds))]
    bg_colors = rng.uniform(0.1, 0.9, (3, 3)).tolist()
    bg_params = [float(rng.uniform(2.0, 5.0)), float(rng.uniform(0, 6.3)), float(rng.uniform(0, 6.3)),
                 float(rng.uniform(2.0, 5.0))]
    skin = rng.uniform(0.45, 0.95) * np.array([1.0, 0.78, 0.62])
    palette = [skin.tolist(), (rng.uniform(0.02, 0.35) * np.array([1.0, 0.8, 0.6])).tolist(),
               rng.uniform(0.05, 0.95, 3).tolist(), rng.uniform(0.05, 0.8, 3).tolist(),
               (rng.uniform(0.02, 0.3, 3)).tolist()]
    source = POSE_SOURCES[int(rng.choice(len(POSE_SOURCES), p=dist.pose_sources))]
    pose_params = [float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0.35, 0.7)),
                   float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.01, 0.01))]
    pan_scale = dist.camera_pan * 16 / max(num_frames, 1)
    spec = SceneSpec(
        seed=int(seed), width=width, height=height, num_frames=num_frames, background=bg,
        bg_colors=bg_colors, bg_params=bg_params, palette=palette,
        shape_scale=[float(rng.uniform(0.9, 1.1)), float(rng.uniform(0.92, 1.08)), 1.0],
        pose_source=source, pose_params=pose_params,
        root=[float(rng.uniform(-0.25, 0.25)), float(rng.uniform(-0.2, 0.2))],
        camera_pan=[float(rng.uniform(-1, 1) * pan_scale), float(rng.uniform(-0.3, 0.3) * pan_scale)],
        camera_x=float(rng.uniform(-0.1, 0.1)),
    )
    for _ in range(200):
        spec.objects = [_sample_object(rng, r, spec, num_frames) for r in roles]
        if _trackable(spec):
            return spec
    # fall back to static objects, still drawn from the same layout
    for _ in range(1000):
        spec.objects = [_sample_object(rng, r, spec, num_frames) for r in roles]
        for o in spec.objects:
            o.velocity = [0.0, 0.0]
            o.spin = 0.0
        if _trackable(spec):
            return spec
    raise SceneError(f"seed {seed}: could not place {count} objects")


# -------------------------------------------------------------------- I/O

def write_clip(directory, spec: SceneSpec, clip: VideoClip, gt: GroundTruth) -> Path:
    """Clip directory layout:

    ``frames/frame_NNNN.png``  RGB frames
    ``depth.bin``              depth planes (decompose depth format)
    ``instances.bin``          detections with shuffled frame-local ids
    ``gt_human.bin`` / ``gt_occlusion.bin`` / ``gt_scene.bin``  layer masklets
    ``human_amodal.bin``       the character's full silhouette (masklet format)
    ``poses.txt`` / ``cameras.txt``  bodymodel text formats
    ``canonical_0000.png``     RGBA canonical render
    ``human_layer/``           unoccluded character frames over black
    ``meta.json``              the scene spec, object roles and detection id maps
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, h, w = gt.depth.shape
    save_frames(d / "frames", clip.frames)
    save_frames(d / "human_layer", gt.human_layer)
    save_depth(d / "depth.bin", gt.depth)
    save_detections(d / "instances.bin", gt.detections, (h, w))
    for role, rid in ROLE_IDS.items():
        save_masklet(d / f"gt_{role}.bin", Masklet(gt.role_map == rid, role))
    save_masklet(d / "human_amodal.bin", Masklet(gt.human_amodal, "human"))
    bm.save_poses(d / "poses.txt", gt.poses)
    bm.save_cameras(d / "cameras.txt", gt.cameras)
    save_frames(d, gt.canonical[None], prefix="canonical")
    meta = {
        "format": "spatialsynth-clip",
        "version": 1,
        "spec": json.loads(spec.to_json()),
        "roles": {str(k): v for k, v in sorted(gt.roles.items())},
        "label_to_gt": [{str(k): v for k, v in sorted(m.items())} for m in gt.label_to_gt],
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def read_meta(directory) -> dict:
    return json.loads((Path(directory) / "meta.json").read_text())


@dataclass
class ManifestEntry:
    index: int
    name: str
    seed: int
    split: str  # "train" or "heldout"


def write_manifest(path, entries: list[ManifestEntry], master_seed: int, extra: dict | None = None) -> None:
    """Line-oriented index: ``# key=value`` header lines, then one
    ``<index> <name> <seed> <split>`` line per clip."""
    head = {"spatialsynth-manifest": 1, "master_seed": master_seed, "count": len(entries)}
    head.update(extra or {})
    lines = [f"# {k}={v}" for k, v in head.items()]
    lines += [f"{e.index} {e.name} {e.seed} {e.split}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    header, entries = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            header[k] = v
        elif line.strip():
            i, name, seed, split = line.split()
            entries.append(ManifestEntry(int(i), name, int(seed), split))
    return header, entries


def corpus_seeds(master_seed: int, count: int, holdout: float = 0.1):
    """Per-clip seeds and held-out flags derived from the master seed."""
    ss = np.random.SeedSequence(master_seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(count)]
    n_hold = int(round(count * holdout))
    if holdout > 0 and count > 1:
        n_hold = max(1, n_hold)
    else:
        n_hold = 0
    held = set(np.random.default_rng(master_seed).permutation(count)[:n_hold].tolist())
    return seeds, held


def generate_corpus(count: int, out_dir, master_seed: int = 0, width: int = 64, height: int = 64,
                    num_frames: int = 16, holdout: float = 0.1, dist: SceneDistribution | None = None,
                    rig: bm.BodyRig | None = None) -> list[ManifestEntry]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds, held = corpus_seeds(master_seed, count, holdout)
    rig = rig or bm.default_rig()
    entries = []
    for i, seed in enumerate(seeds):
        name = f"clip_{i:05d}"
        try:
            spec = sample_spec(seed, width, height, num_frames, dist)
            clip, gt = render_clip(spec, rig)
            write_clip(out / name, spec, clip, gt)
        except (OSError, SceneError) as exc:
            raise SceneError(f"clip {i} (seed {seed}): {exc}") from exc
        entries.append(ManifestEntry(i, name, seed, "heldout" if i in held else "train"))
    write_manifest(out / "manifest.txt", entries, master_seed,
                   {"width": width, "height": height, "frames": num_frames, "holdout": holdout})
    return entries
