"""Depth-ordered layer decomposition of a clip into human, occlusion and scene.

Input per clip: frames, a depth map per frame and per-frame instance
detections (possibly overlapping binary masks with frame-local ids and a
class tag).  Detections are tracked into identity-consistent masklets,
ordered by clip-mean depth relative to the human, and turned into three
masklets that partition every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .media import VideoClip, load_frames

ROLES = ("human", "occlusion", "scene")
IOU_THRESHOLD = 0.3


class DecomposeError(ValueError):
    pass


@dataclass
class Detection:
    label: int  # frame-local id
    cls: str  # "human" or "object"
    mask: np.ndarray  # (H, W) bool


@dataclass
class Masklet:
    mask: np.ndarray  # (N, H, W) bool
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown masklet role {self.role!r}")
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class Track:
    track_id: int
    cls: str
    mask: np.ndarray  # (N, H, W) bool, empty outside the frames it lives in
    first: int
    last: int


@dataclass
class LayeredClip:
    source: VideoClip
    depth: np.ndarray  # (N, H, W) > 0
    detections: list[list[Detection]]  # per frame

    def __post_init__(self):
        if self.depth.shape != self.source.frames.shape[:3]:
            raise DecomposeError("depth does not match the clip extents")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth <= 0):
            raise DecomposeError("depth must be finite and positive")
        if len(self.detections) != self.source.num_frames:
            raise DecomposeError("need one detection list per frame")


@dataclass
class Layers:
    human: Masklet
    occlusion: Masklet
    scene: Masklet
    tracks: list[Track]
    roles: dict[int, str] = field(default_factory=dict)  # track id -> role
    mean_depth: dict[int, float] = field(default_factory=dict)
    human_track: int = -1

    def masklets(self) -> tuple[Masklet, Masklet, Masklet]:
        return self.human, self.occlusion, self.scene


# ---------------------------------------------------------------- tracking

def _centroid_x(mask: np.ndarray) -> float:
    xs = np.nonzero(mask)[1]
    return float(xs.mean()) if xs.size else float("inf")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    if inter == 0:
        return 0.0
    return inter / np.count_nonzero(a | b)


def track_instances(frames: list[list[Detection]], threshold: float = IOU_THRESHOLD) -> list[Track]:
    """Associate detections across frames by mask IoU.

    Pairs are matched greedily by decreasing IoU (ties: lower current-frame
    centroid x first); pairs below ``threshold`` never match.  Unmatched
    tracks retire for good and unmatched detections start new tracks, issued
    in order of centroid x.  Track ids count up from 1.
    """
    if not frames:
        return []
    shape = None
    for dets in frames:
        for d in dets:
            if shape is None:
                shape = d.mask.shape
            elif d.mask.shape != shape:
                raise DecomposeError("detection masks have inconsistent extents")
    n = len(frames)
    if shape is None:
        return []
    tracks: list[Track] = []
    active: dict[int, np.ndarray] = {}  # track index -> mask in previous frame

    def start(t, det):
        m = np.zeros((n,) + shape, dtype=bool)
        m[t] = det.mask
        tracks.append(Track(len(tracks) + 1, det.cls, m, t, t))
        return len(tracks) - 1

    for t, dets in enumerate(frames):
        dets = [d for d in dets if d.mask.any()]
        cx = [_centroid_x(d.mask) for d in dets]
        pairs = []
        for k, prev in active.items():
            for i, d in enumerate(dets):
                v = _iou(prev, d.mask)
                if v >= threshold:
                    pairs.append((-v, cx[i], i, k))
        pairs.sort()
        used_det, used_trk, nxt = set(), set(), {}
        for _, _, i, k in pairs:
            if i in used_det or k in used_trk:
                continue
            used_det.add(i)
            used_trk.add(k)
            tracks[k].mask[t] = dets[i].mask
            tracks[k].last = t
            nxt[k] = dets[i].mask
        for i in sorted(set(range(len(dets))) - used_det, key=lambda i: (cx[i], dets[i].label)):
            k = start(t, dets[i])
            nxt[k] = dets[i].mask
        active = nxt
    return tracks


# ------------------------------------------------------------------ layers

def track_mean_depth(track: Track, tracks: list[Track], depth: np.ndarray) -> float:
    """Clip-mean depth of a track over pixels no other track claims.

    Falls back to all of the track's pixels when every pixel is shared.
    """
    others = np.zeros_like(track.mask)
    for o in tracks:
        if o is not track:
            others |= o.mask
    own = track.mask & ~others
    sel = own if own.any() else track.mask
    return float(depth[sel].mean())


def assign_layers(clip: LayeredClip, tracks: list[Track] | None = None) -> Layers:
    """Human, occlusion and scene masklets from depth ordering.

    Tracks nearer (clip-mean depth) than the human are occluders; the rest,
    including equal depth, join the scene.  A pixel claimed by several tracks
    belongs to the nearest of them.
    """
    if tracks is None:
        tracks = track_instances(clip.detections)
    humans = [tr for tr in tracks if tr.cls == "human"]
    if not humans:
        raise DecomposeError("no human instance in clip")
    human = max(humans, key=lambda tr: (int(tr.mask.sum()), -tr.track_id))
    depth = clip.depth
    mean = {tr.track_id: track_mean_depth(tr, tracks, depth) for tr in tracks}
    hd = mean[human.track_id]
    roles = {}
    for tr in tracks:
        if tr is human:
            roles[tr.track_id] = "human"
        elif tr.cls == "human":
            roles[tr.track_id] = "scene"  # secondary people are not layered
        else:
            roles[tr.track_id] = "occlusion" if mean[tr.track_id] < hd else "scene"
    shape = depth.shape
    owner_depth = np.full(shape, np.inf)
    role_map = np.full(shape, 2, dtype=np.int8)  # 0 human, 1 occlusion, 2 scene
    for tr in sorted(tracks, key=lambda tr: (mean[tr.track_id], tr.track_id)):
        win = tr.mask & (mean[tr.track_id] < owner_depth)
        owner_depth[win] = mean[tr.track_id]
        role_map[win] = ROLES.index(roles[tr.track_id])
    return Layers(
        Masklet(role_map == 0, "human"), Masklet(role_map == 1, "occlusion"), Masklet(role_map == 2, "scene"),
        tracks, roles, mean, human.track_id,
    )


def check_partition(human: Masklet, occlusion: Masklet, scene: Masklet) -> None:
    total = human.mask.astype(np.int8) + occlusion.mask + scene.mask
    if np.any(total != 1):
        raise DecomposeError("masklets do not partition the frames")


def extract_components(frames, human: Masklet, occlusion: Masklet, scene: Masklet):
    """``v^i = v * M^i`` for the three layers (same dtype as ``frames``)."""
    v = frames.frames if isinstance(frames, VideoClip) else np.asarray(frames)
    out = []
    for m in (human, occlusion, scene):
        if m.mask.shape != v.shape[:3]:
            raise DecomposeError(f"{m.role} masklet {m.mask.shape} does not match clip {v.shape[:3]}")
        mm = m.mask.reshape(m.mask.shape + (1,) * (v.ndim - 3))
        out.append(v * mm.astype(v.dtype))
    return tuple(out)


# ------------------------------------------------------------ scene fill

def _down(c, w):
    h, wd = w.shape
    ph, pw = h % 2, wd % 2
    if ph or pw:
        c = np.pad(c, ((0, ph), (0, pw), (0, 0)))
        w = np.pad(w, ((0, ph), (0, pw)))
    c2 = c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2]
    w2 = w[0::2, 0::2] + w[1::2, 0::2] + w[0::2, 1::2] + w[1::2, 1::2]
    return c2, w2


def _upsample(img, shape):
    """Bilinear upsample by 2 with pixel-center alignment, cropped to ``shape``."""
    h, w = img.shape[:2]
    ys = (np.arange(shape[0]) + 0.5) / 2 - 0.5
    xs = (np.arange(shape[1]) + 0.5) / 2 - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def push_pull(img: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown pixels of one (H, W, C) float image; known pixels are returned as is."""
    c = img * known[..., None]
    w = known.astype(np.float64)
    levels = [(c, w)]
    while min(w.shape) > 1 and not np.all(w > 0):
        c, w = _down(c, w)
        levels.append((c, w))
    c, w = levels[-1]
    filled = np.where(w[..., None] > 0, c / np.maximum(w, 1e-12)[..., None], 0.0)
    if not np.all(w > 0):
        # coarsest level still has holes: fill with its mean known color
        mean = c.reshape(-1, c.shape[-1]).sum(0) / max(w.sum(), 1e-12)
        filled[w <= 0] = mean
    for c, w in reversed(levels[:-1]):
        up = _upsample(filled, w.shape)
        filled = np.where(w[..., None] > 0, c / np.maximum(w, 1e-12)[..., None], up)
    return np.where(known[..., None], img, filled)


def recover_scene(vs, scene: Masklet):
    """Fill the holes of the scene component (pixels outside ``M^s``).

    Multi-scale push-pull per frame; known pixels are untouched.  A frame
    with no scene pixels is filled with the clip-mean scene color.  uint8
    input is rounded back to uint8.
    """
    v = vs.frames if isinstance(vs, VideoClip) else np.asarray(vs)
    known_all = scene.mask
    if known_all.shape != v.shape[:3]:
        raise DecomposeError("scene masklet does not match the clip")
    x = v.astype(np.float64)
    out = x.copy()
    if known_all.any():
        clip_mean = x[known_all].mean(axis=0)
    else:
        clip_mean = np.zeros(x.shape[-1])
    for t in range(x.shape[0]):
        known = known_all[t]
        if known.all():
            continue
        if not known.any():
            out[t] = clip_mean
            continue
        out[t] = push_pull(x[t], known)
    if v.dtype == np.uint8:
        res = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        res[known_all] = v[known_all]
        return res
    return out.astype(v.dtype)


# ------------------------------------------------------------------ files

def save_masklet(path, masklet: Masklet) -> None:
    """``SSMASK 1 <role> N H W`` header line, then per frame ceil(H*W/8)
    bytes: the row-major mask bits, most significant bit first, zero padded."""
    n, h, w = masklet.mask.shape
    with open(path, "wb") as fh:
        fh.write(f"SSMASK 1 {masklet.role} {n} {h} {w}\n".encode("ascii"))
        for f in masklet.mask:
            fh.write(np.packbits(f.ravel()).tobytes())


def _read_header(raw: bytes, magic: str):
    nl = raw.index(b"\n")
    head = raw[:nl].decode("ascii").split()
    if head[0] != magic or head[1] != "1":
        raise DecomposeError(f"expected a {magic} v1 file")
    return head[2:], nl + 1


def load_masklet(path) -> Masklet:
    raw = Path(path).read_bytes()
    (role, n, h, w), pos = _read_header(raw, "SSMASK")
    n, h, w = int(n), int(h), int(w)
    per = (h * w + 7) // 8
    if len(raw) - pos != n * per:
        raise DecomposeError(f"{path}: truncated masklet")
    bits = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(n, per)
    mask = np.unpackbits(bits, axis=1, count=h * w).reshape(n, h, w).astype(bool)
    return Masklet(mask, role)


def save_depth(path, depth: np.ndarray) -> None:
    """``SSDEPTH 1 N H W`` header line, then N*H*W little-endian float32."""
    n, h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"SSDEPTH 1 {n} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n, h, w), pos = _read_header(raw, "SSDEPTH")
    n, h, w = int(n), int(h), int(w)
    if len(raw) - pos != 4 * n * h * w:
        raise DecomposeError(f"{path}: truncated depth file")
    return np.frombuffer(raw, dtype="<f4", offset=pos).reshape(n, h, w).astype(np.float64)


def save_detections(path, frames: list[list[Detection]], shape) -> None:
    """``SSINST 1 N H W`` header line; per frame a line ``frame <t> <K>`` and,
    per detection, a line ``det <label> <class>`` followed by the packed
    mask bytes (as in the masklet format) and a newline."""
    h, w = shape
    with open(path, "wb") as fh:
        fh.write(f"SSINST 1 {len(frames)} {h} {w}\n".encode("ascii"))
        for t, dets in enumerate(frames):
            fh.write(f"frame {t} {len(dets)}\n".encode("ascii"))
            for d in dets:
                fh.write(f"det {d.label} {d.cls}\n".encode("ascii"))
                fh.write(np.packbits(d.mask.ravel()).tobytes() + b"\n")


def load_detections(path) -> list[list[Detection]]:
    raw = Path(path).read_bytes()
    (n, h, w), pos = _read_header(raw, "SSINST")
    n, h, w = int(n), int(h), int(w)
    per = (h * w + 7) // 8
    frames = []

    def line():
        nonlocal pos
        nl = raw.index(b"\n", pos)
        out = raw[pos:nl].decode("ascii").split()
        pos = nl + 1
        return out

    for _ in range(n):
        _, _, k = line()
        dets = []
        for _ in range(int(k)):
            _, label, cls = line()
            bits = np.frombuffer(raw, dtype=np.uint8, count=per, offset=pos)
            pos += per + 1
            dets.append(Detection(int(label), cls, np.unpackbits(bits, count=h * w).reshape(h, w).astype(bool)))
        frames.append(dets)
    return frames


# -------------------------------------------------------------- providers

class LayerProvider(Protocol):
    """Source of the per-clip perception inputs (depth and detections)."""

    def load(self, clip_dir) -> LayeredClip: ...


class FileProvider:
    """Reads ``frames/``, ``depth.bin`` and ``instances.bin`` from a clip directory."""

    def load(self, clip_dir) -> LayeredClip:
        clip_dir = Path(clip_dir)
        frames = load_frames(clip_dir / "frames")
        depth = load_depth(clip_dir / "depth.bin")
        dets = load_detections(clip_dir / "instances.bin")
        return LayeredClip(VideoClip(frames), depth, dets)


@dataclass
class Decomposition:
    layers: Layers
    components: tuple  # v^h, v^o, v^s
    recovered: np.ndarray  # R(v^s)


def decompose_clip(clip: LayeredClip) -> Decomposition:
    layers = assign_layers(clip)
    check_partition(*layers.masklets())
    comps = extract_components(clip.source.frames, *layers.masklets())
    return Decomposition(layers, comps, recover_scene(comps[2], layers.scene))
