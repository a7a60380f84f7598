# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometric kernels; see ``_fallback`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()


def knn_indices(points, queries, Py_ssize_t k):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], m = q.shape[0]
    cdef Py_ssize_t i, j, s, filled
    cdef double dx, dy, dz, d
    out = np.empty((m, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    best_d = np.empty(k, dtype=np.float64)
    cdef double[::1] bd = best_d
    for i in range(m):
        filled = 0
        for j in range(n):
            dx = q[i, 0] - p[j, 0]
            dy = q[i, 1] - p[j, 1]
            dz = q[i, 2] - p[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and not d < bd[k - 1]:
                continue
            # insertion keeps (distance, index) order; equal distances stay behind
            s = filled if filled < k else k - 1
            while s > 0 and d < bd[s - 1]:
                bd[s] = bd[s - 1]
                o[i, s] = o[i, s - 1]
                s -= 1
            bd[s] = d
            o[i, s] = j
            if filled < k:
                filled += 1
    return out


def points_in_box_mask(points, center, size):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double cx = center[0], cy = center[1], cz = center[2]
    cdef double hx = size[0] * 0.5, hy = size[1] * 0.5, hz = size[2] * 0.5
    cdef Py_ssize_t i, n = p.shape[0]
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    for i in range(n):
        o[i] = (fabs(p[i, 0] - cx) <= hx and fabs(p[i, 1] - cy) <= hy
                and fabs(p[i, 2] - cz) <= hz)
    return out


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j) nogil:
    cdef double ov[3]
    cdef double ah, bh, hi, lo, inter, va, vb, r
    cdef int t
    for t in range(3):
        ah = a[i, 3 + t] * 0.5
        bh = b[j, 3 + t] * 0.5
        hi = a[i, t] + ah
        if b[j, t] + bh < hi:
            hi = b[j, t] + bh
        lo = a[i, t] - ah
        if b[j, t] - bh > lo:
            lo = b[j, t] - bh
        ov[t] = hi - lo
        if not ov[t] > 0.0:
            ov[t] = 0.0
    inter = ov[0] * ov[1] * ov[2]
    va = a[i, 3] * a[i, 4] * a[i, 5]
    vb = b[j, 3] * b[j, 4] * b[j, 5]
    r = inter / (va + vb - inter)
    if r > 1.0:
        r = 1.0
    return r


def iou_matrix(boxes_a, boxes_b):
    cdef const double[:, ::1] a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 6)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t i, j
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            o[i, j] = _iou(a, i, b, j)
    return out


def nms_order(boxes, order, double threshold):
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    cdef cnp.int64_t[::1] od = np.ascontiguousarray(order, dtype=np.int64)
    kept = np.empty(od.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] kp = kept
    cdef Py_ssize_t nk = 0, s, t, i
    cdef bint ok
    for s in range(od.shape[0]):
        i = od[s]
        ok = True
        for t in range(nk):
            if _iou(b, i, b, kp[t]) > threshold:
                ok = False
                break
        if ok:
            kp[nk] = i
            nk += 1
    return kept[:nk].copy()


def assign_inside_nearest(points, boxes):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d, bestd
    out = np.full(p.shape[0], -1, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(p.shape[0]):
        best = -1
        bestd = INFINITY
        for j in range(b.shape[0]):
            dx = p[i, 0] - b[j, 0]
            dy = p[i, 1] - b[j, 1]
            dz = p[i, 2] - b[j, 2]
            if not (fabs(dx) <= b[j, 3] * 0.5 and fabs(dy) <= b[j, 4] * 0.5
                    and fabs(dz) <= b[j, 5] * 0.5):
                continue
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:
                bestd = d
                best = j
        o[i] = best
    return out


def assign_nearest_within(points, centers, radii):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef const double[::1] r = np.ascontiguousarray(radii, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d, bestd
    out = np.full(p.shape[0], -1, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(p.shape[0]):
        best = -1
        bestd = INFINITY
        for j in range(c.shape[0]):
            dx = p[i, 0] - c[j, 0]
            dy = p[i, 1] - c[j, 1]
            dz = p[i, 2] - c[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:
                bestd = d
                best = j
        if best >= 0 and bestd <= r[best] * r[best]:
            o[i] = best
    return out
