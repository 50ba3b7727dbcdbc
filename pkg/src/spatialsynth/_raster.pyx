# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled triangle rasterizer (z-buffer + screen-space barycentrics).

Mirrors ``spatialsynth._raster_py`` operation for operation so both backends
produce identical buffers.
"""
from libc.math cimport ceil, floor


cdef inline double _edge(double ax, double ay, double bx, double by,
                         double px, double py) nogil:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


cdef inline bint _top_left(double ax, double ay, double bx, double by) nogil:
    cdef double dx = bx - ax
    cdef double dy = by - ay
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


cdef inline bint _inside(double w, bint tl) nogil:
    return w > 0.0 or (w == 0.0 and tl)


def rasterize_into(const double[:, ::1] uv, const double[::1] depth,
                   const unsigned char[::1] valid, const int[:, ::1] faces,
                   int[:, ::1] tri_id, double[:, :, ::1] bary,
                   double[:, ::1] zbuf):
    cdef Py_ssize_t height = zbuf.shape[0]
    cdef Py_ssize_t width = zbuf.shape[1]
    cdef Py_ssize_t nf = faces.shape[0]
    cdef Py_ssize_t f, i, j, x0, x1, y0, y1
    cdef int ia, ib, ic, slot_b, slot_c
    cdef double ax, ay, bx, by, cx, cy, za, zb, zc, area
    cdef double px, py, w0, w1, w2, b0, b1, b2, z
    cdef double minx, maxx, miny, maxy
    cdef bint tl0, tl1, tl2

    with nogil:
        for f in range(nf):
            ia = faces[f, 0]
            ib = faces[f, 1]
            ic = faces[f, 2]
            if not (valid[ia] and valid[ib] and valid[ic]):
                continue
            slot_b = 1
            slot_c = 2
            ax = uv[ia, 0]; ay = uv[ia, 1]
            bx = uv[ib, 0]; by = uv[ib, 1]
            cx = uv[ic, 0]; cy = uv[ic, 1]
            za = depth[ia]; zb = depth[ib]; zc = depth[ic]
            area = _edge(ax, ay, bx, by, cx, cy)
            if area == 0.0:
                continue
            if area < 0.0:
                bx, cx = cx, bx
                by, cy = cy, by
                zb, zc = zc, zb
                slot_b = 2
                slot_c = 1
                area = -area
            minx = min(ax, min(bx, cx)); maxx = max(ax, max(bx, cx))
            miny = min(ay, min(by, cy)); maxy = max(ay, max(by, cy))
            x0 = <Py_ssize_t>max(ceil(minx - 0.5), 0.0)
            x1 = <Py_ssize_t>min(floor(maxx - 0.5), <double>(width - 1))
            y0 = <Py_ssize_t>max(ceil(miny - 0.5), 0.0)
            y1 = <Py_ssize_t>min(floor(maxy - 0.5), <double>(height - 1))
            if x0 > x1 or y0 > y1:
                continue
            tl0 = _top_left(bx, by, cx, cy)
            tl1 = _top_left(cx, cy, ax, ay)
            tl2 = _top_left(ax, ay, bx, by)
            for j in range(y0, y1 + 1):
                py = j + 0.5
                for i in range(x0, x1 + 1):
                    px = i + 0.5
                    w0 = _edge(bx, by, cx, cy, px, py)
                    if not _inside(w0, tl0):
                        continue
                    w1 = _edge(cx, cy, ax, ay, px, py)
                    if not _inside(w1, tl1):
                        continue
                    w2 = _edge(ax, ay, bx, by, px, py)
                    if not _inside(w2, tl2):
                        continue
                    b0 = w0 / area
                    b1 = w1 / area
                    b2 = w2 / area
                    z = b0 * za + b1 * zb + b2 * zc
                    if z < zbuf[j, i]:
                        zbuf[j, i] = z
                        tri_id[j, i] = <int>f
                        bary[j, i, 0] = b0
                        bary[j, i, slot_b] = b1
                        bary[j, i, slot_c] = b2
