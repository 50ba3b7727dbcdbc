"""Z-buffered triangle rasterization with barycentric attribute interpolation.

The per-pixel loop lives in a compiled extension (``_raster``); a numpy
fallback with identical arithmetic is selected when the extension is missing
or ``SPATIALSYNTH_PURE_PYTHON=1`` is set.

Conventions: pixel ``(i, j)`` is sampled at ``(i + 0.5, j + 0.5)``; on-edge
ties go to the triangle for which the edge is a top or left edge; depth is
interpolated linearly in screen space and the nearer fragment wins (earlier
triangle on exact depth ties).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _raster_py

if os.environ.get("SPATIALSYNTH_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from . import _raster as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


@dataclass
class Fragments:
    """Per-pixel result of rasterizing one mesh."""

    tri_id: np.ndarray  # (H, W) int32, -1 where uncovered
    bary: np.ndarray  # (H, W, 3) float64, weights for faces[tri_id]
    zbuf: np.ndarray  # (H, W) float64, inf where uncovered

    @property
    def coverage(self) -> np.ndarray:
        return self.tri_id >= 0


def rasterize(uv, depth, valid, faces, width: int, height: int, backend: str | None = None) -> Fragments:
    """Rasterize triangles given projected vertices.

    ``uv`` is (V, 2) pixel coordinates, ``depth`` (V,) camera-space depth and
    ``valid`` (V,) marks vertices in front of the camera; triangles touching an
    invalid vertex and zero-area triangles are skipped.
    """
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    faces = np.ascontiguousarray(faces, dtype=np.int32)
    if uv.ndim != 2 or uv.shape[1] != 2 or depth.shape != (uv.shape[0],) or valid.shape != depth.shape:
        raise ValueError("uv must be (V, 2) with matching depth and valid arrays")
    if faces.size and (faces.min() < 0 or faces.max() >= uv.shape[0]):
        raise ValueError("faces index vertices out of range")
    tri_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    impl = {"compiled": _compiled, "python": _raster_py, None: _compiled or _raster_py}[backend]
    if impl is None:
        raise RuntimeError("compiled rasterizer is not available")
    impl.rasterize_into(uv, depth, valid, faces.reshape(-1, 3), tri_id, bary, zbuf)
    return Fragments(tri_id, bary, zbuf)


def interpolate(frags: Fragments, faces, attrs) -> np.ndarray:
    """Blend per-vertex ``attrs`` (V,) or (V, D) over covered pixels; zeros elsewhere."""
    attrs = np.asarray(attrs)
    faces = np.asarray(faces)
    out = np.zeros(frags.tri_id.shape + attrs.shape[1:], dtype=np.result_type(attrs.dtype, np.float64))
    cov = frags.coverage
    if not cov.any():
        return out
    tri = faces[frags.tri_id[cov]]  # (P, 3)
    w = frags.bary[cov].reshape((-1, 3) + (1,) * (attrs.ndim - 1))
    out[cov] = w[:, 0] * attrs[tri[:, 0]] + w[:, 1] * attrs[tri[:, 1]] + w[:, 2] * attrs[tri[:, 2]]
    return out
