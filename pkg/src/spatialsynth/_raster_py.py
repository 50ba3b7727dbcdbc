"""Numpy fallback for the triangle rasterizer.

Same arithmetic, in the same order, as the compiled kernel; used when the
extension is not built or ``SPATIALSYNTH_PURE_PYTHON`` is set.
"""

import math

import numpy as np


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


def _inside(w, tl):
    return (w > 0.0) | ((w == 0.0) & tl)


def rasterize_into(uv, depth, valid, faces, tri_id, bary, zbuf):
    height, width = zbuf.shape
    for f in range(faces.shape[0]):
        ia, ib, ic = (int(k) for k in faces[f])
        if not (valid[ia] and valid[ib] and valid[ic]):
            continue
        slot_b, slot_c = 1, 2
        ax, ay = float(uv[ia, 0]), float(uv[ia, 1])
        bx, by = float(uv[ib, 0]), float(uv[ib, 1])
        cx, cy = float(uv[ic, 0]), float(uv[ic, 1])
        za, zb, zc = float(depth[ia]), float(depth[ib]), float(depth[ic])
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, cx = cx, bx
            by, cy = cy, by
            zb, zc = zc, zb
            slot_b, slot_c = 2, 1
            area = -area
        x0 = int(max(math.ceil(min(ax, bx, cx) - 0.5), 0.0))
        x1 = int(min(math.floor(max(ax, bx, cx) - 0.5), float(width - 1)))
        y0 = int(max(math.ceil(min(ay, by, cy) - 0.5), 0.0))
        y1 = int(min(math.floor(max(ay, by, cy) - 0.5), float(height - 1)))
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] + 0.5
        w0 = _edge(bx, by, cx, cy, px, py)
        w1 = _edge(cx, cy, ax, ay, px, py)
        w2 = _edge(ax, ay, bx, by, px, py)
        inside = (
            _inside(w0, _top_left(bx, by, cx, cy))
            & _inside(w1, _top_left(cx, cy, ax, ay))
            & _inside(w2, _top_left(ax, ay, bx, by))
        )
        if not inside.any():
            continue
        b0 = w0 / area
        b1 = w1 / area
        b2 = w2 / area
        z = b0 * za + b1 * zb + b2 * zc
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < region)
        region[win] = z[win]
        tri_id[y0:y1 + 1, x0:x1 + 1][win] = f
        bsub = bary[y0:y1 + 1, x0:x1 + 1]
        bsub[..., 0][win] = b0[win]
        bsub[..., slot_b][win] = b1[win]
        bsub[..., slot_c][win] = b2[win]
