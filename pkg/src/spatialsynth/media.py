"""Video container and lossless frame I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, C) uint8 or float in [0, 1]
    depth: np.ndarray | None = None  # (N, H, W) meters
    mask: np.ndarray | None = None  # (N, H, W) bool

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (N, H, W, C), got {self.frames.shape}")
        for name in ("depth", "mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != self.frames.shape[:3]:
                raise ValueError(f"{name} shape {arr.shape} does not match frames {self.frames.shape[:3]}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def as_float(self) -> np.ndarray:
        if self.frames.dtype == np.uint8:
            return self.frames.astype(np.float32) / 255.0
        return self.frames.astype(np.float32)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_frames(directory, frames, prefix: str = "frame") -> list[Path]:
    """Write ``<prefix>_0000.png`` ... ; float frames are quantized to 8 bits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = to_uint8(frames)
    paths = []
    for i, f in enumerate(frames):
        p = directory / f"{prefix}_{i:04d}.png"
        img = Image.fromarray(f[..., 0] if f.shape[-1] == 1 else f)
        # fixed encoder settings keep files byte-identical across runs
        img.save(p, format="PNG", optimize=False, compress_level=6)
        paths.append(p)
    return paths


def load_frames(directory, prefix: str = "frame") -> np.ndarray:
    paths = sorted(Path(directory).glob(f"{prefix}_*.png"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.png frames in {directory}")
    frames = [np.asarray(Image.open(p)) for p in paths]
    out = np.stack(frames)
    return out[..., None] if out.ndim == 3 else out
