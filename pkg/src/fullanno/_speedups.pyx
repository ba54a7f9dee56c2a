# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled greedy suppression kernel (hot loop of detection aggregation).

Mirrors _pykernels.suppress; geometry.py picks whichever imports.
"""

import numpy as np

BACKEND = "cython"


cdef inline double _iou(double ax, double ay, double aw, double ah,
                        double bx, double by, double bw, double bh) nogil:
    cdef double ix = min(ax + aw, bx + bw) - max(ax, bx)
    if ix <= 0:
        return 0.0
    cdef double iy = min(ay + ah, by + bh) - max(ay, by)
    if iy <= 0:
        return 0.0
    cdef double inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def iou_xywh(double ax, double ay, double aw, double ah,
             double bx, double by, double bw, double bh):
    return _iou(ax, ay, aw, ah, bx, by, bw, bh)


def suppress(boxes, double iou_threshold):
    """Greedy NMS over pre-ordered xywh boxes; returns kept positions."""
    cdef double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0]
    cdef long[::1] kept = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t nkept = 0
    cdef Py_ssize_t i, j
    cdef long k
    cdef bint dead
    for i in range(n):
        dead = False
        for j in range(nkept):
            k = kept[j]
            if _iou(b[k, 0], b[k, 1], b[k, 2], b[k, 3],
                    b[i, 0], b[i, 1], b[i, 2], b[i, 3]) > iou_threshold:
                dead = True
                break
        if not dead:
            kept[nkept] = i
            nkept += 1
    return list(kept[:nkept])
