"""Structured motion code: per-vertex latent codes rasterized into feature maps.

Each rig vertex carries a fixed random code.  For a posed, projected body the
front-most triangle at each pixel contributes the barycentric blend of its
three vertex codes; the per-frame maps are stacked and embedded by a small
per-frame convolutional pose encoder onto the denoiser's latent grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .bodymodel import BodyRig, Camera, PoseParams, pose_vertices, render_mesh
from .raster import interpolate


@dataclass
class VertexCodes:
    codes: np.ndarray  # (V, D)

    @classmethod
    def random(cls, num_vertices: int, dim: int = 8, seed: int = 0) -> "VertexCodes":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((num_vertices, dim)))

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def check(self, rig: BodyRig) -> None:
        if self.codes.shape[0] != rig.num_vertices:
            raise ValueError(f"{self.codes.shape[0]} vertex codes for a rig with {rig.num_vertices} vertices")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("vertex codes must be finite")


@dataclass
class MotionFeatureMap:
    features: np.ndarray  # (N, H, W, D), zero where uncovered
    coverage: np.ndarray  # (N, H, W) bool

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @classmethod
    def stack(cls, frames: list["MotionFeatureMap"]) -> "MotionFeatureMap":
        shapes = {f.features.shape[1:] for f in frames}
        if len(shapes) != 1:
            raise ValueError(f"frames have inconsistent extents: {sorted(shapes)}")
        return cls(np.concatenate([f.features for f in frames]), np.concatenate([f.coverage for f in frames]))


def rasterize_codes(rig: BodyRig, pose: PoseParams, camera: Camera, codes: VertexCodes,
                    extents: tuple[int, int] | None = None) -> MotionFeatureMap:
    """One-frame feature map; ``extents`` (H, W) defaults to the camera's."""
    codes.check(rig)
    if extents is not None and tuple(extents) != (camera.height, camera.width):
        sy, sx = extents[0] / camera.height, extents[1] / camera.width
        camera = Camera(camera.fx * sx, camera.fy * sy, camera.cx * sx, camera.cy * sy,
                        int(extents[1]), int(extents[0]), camera.rotation, camera.translation)
    frags, _, _ = render_mesh(rig, pose_vertices(rig, pose), camera)
    feats = interpolate(frags, rig.faces, codes.codes)
    return MotionFeatureMap(feats[None], frags.coverage[None])


def render_motion(rig: BodyRig, poses, cameras, codes: VertexCodes, extents=None) -> MotionFeatureMap:
    if len(poses) != len(cameras):
        raise ValueError(f"{len(poses)} poses but {len(cameras)} cameras")
    return MotionFeatureMap.stack([rasterize_codes(rig, p, c, codes, extents) for p, c in zip(poses, cameras)])


# -------------------------------------------------------------- file format

_MAGIC = "SSPLANAR"


def save_planar(path, planes: np.ndarray, coverage: np.ndarray | None = None, kind: str = "motion") -> None:
    """Binary planar dump shared by motion maps and latent codes.

    Layout: one ASCII header line ``SSPLANAR 1 <kind> N H W D <has_coverage>``
    then, per frame, D planes of H*W little-endian float32 (row-major) and,
    when present, one H*W uint8 coverage plane (0 or 1).
    """
    planes = np.asarray(planes)
    n, h, w, d = planes.shape
    has_cov = coverage is not None
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} 1 {kind} {n} {h} {w} {d} {int(has_cov)}\n".encode("ascii"))
        for i in range(n):
            fh.write(np.ascontiguousarray(np.moveaxis(planes[i], -1, 0), dtype="<f4").tobytes())
            if has_cov:
                fh.write(np.asarray(coverage[i], dtype=np.uint8).tobytes())


def load_planar(path):
    """Returns ``(kind, planes (N, H, W, D) float32, coverage (N, H, W) bool or None)``."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = raw[:nl].decode("ascii").split()
    if head[0] != _MAGIC or head[1] != "1":
        raise ValueError(f"{path}: not a planar dump")
    kind = head[2]
    n, h, w, d, has_cov = (int(x) for x in head[3:8])
    pos = nl + 1
    planes = np.empty((n, h, w, d), dtype=np.float32)
    cov = np.empty((n, h, w), dtype=bool) if has_cov else None
    for i in range(n):
        block = np.frombuffer(raw, dtype="<f4", count=d * h * w, offset=pos).reshape(d, h, w)
        planes[i] = np.moveaxis(block, 0, -1)
        pos += block.nbytes
        if has_cov:
            cov[i] = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w) > 0
            pos += h * w
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return kind, planes, cov


def save_motion_map(path, fmap: MotionFeatureMap) -> None:
    save_planar(path, fmap.features, fmap.coverage, kind="motion")


def load_motion_map(path) -> MotionFeatureMap:
    kind, planes, cov = load_planar(path)
    if kind != "motion" or cov is None:
        raise ValueError(f"{path}: not a motion feature map")
    return MotionFeatureMap(planes, cov)


# ------------------------------------------------------------- pose encoder

class PoseEncoder(tc.Module):
    """Per-frame strided conv embedding of motion maps onto the latent grid.

    Two stride-2 stages and a stride-1 projection (downsampling factor 4, the
    VAE factor); no mixing across frames.
    """

    def __init__(self, code_dim: int, out_channels: int, rng: np.random.Generator, width: int = 16):
        super().__init__()
        self.out_channels = out_channels
        self.conv1 = tc.Conv2d(code_dim, width, rng, stride=2)
        self.norm1 = tc.GroupNorm(width)
        self.conv2 = tc.Conv2d(width, 2 * width, rng, stride=2)
        self.norm2 = tc.GroupNorm(2 * width)
        self.conv3 = tc.Conv2d(2 * width, out_channels, rng, gain=0.5)

    def build(self, maps: tc.Node) -> tc.Node:
        """``maps`` is (B, T, H, W, D); returns (B, T, H/4, W/4, out_channels)."""
        b, t, h, w, d = maps.shape
        x = maps.reshape((b * t, h, w, d))
        x = self.norm1(self.conv1(x)).silu()
        x = self.norm2(self.conv2(x)).silu()
        x = self.conv3(x)
        return x.reshape((b, t) + x.shape[1:])


def encode_motion(maps, encoder: PoseEncoder) -> np.ndarray:
    """Embed a (T, H, W, D) map stack (or a :class:`MotionFeatureMap`) -> (T, h, w, C)."""
    feats = maps.features if isinstance(maps, MotionFeatureMap) else np.asarray(maps)
    if feats.ndim != 4:
        raise ValueError(f"expected (T, H, W, D) maps, got shape {feats.shape}")
    h, w = feats.shape[1:3]
    if h % 4 or w % 4:
        raise ValueError(f"map extents {h}x{w} are not divisible by 4")
    g = tc.Graph("pose_encoder")
    x = g.input("maps", (1,) + feats.shape)
    encoder(x)
    return g.forward({"maps": feats[None].astype(np.float32)}, keep=False)[0]
