"""Pure numpy versions of the geometric kernels.

Results match the compiled module bit for bit: distances and overlaps are
formed with the same operation order, and every tie resolves to the lowest
index.
"""
from __future__ import annotations

import numpy as np


def knn_indices(points, queries, k):
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    dx = queries[:, None, 0] - points[None, :, 0]
    dy = queries[:, None, 1] - points[None, :, 1]
    dz = queries[:, None, 2] - points[None, :, 2]
    d2 = dx * dx + dy * dy + dz * dz
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def points_in_box_mask(points, center, size):
    points = np.asarray(points, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) * 0.5
    return np.all(np.abs(points - c) <= half, axis=1)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of axis-aligned boxes given as rows ``(cx, cy, cz, l, w, h)``."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 6)
    a_half = a[:, 3:] * 0.5
    b_half = b[:, 3:] * 0.5
    a_lo, a_hi = a[:, :3] - a_half, a[:, :3] + a_half
    b_lo, b_hi = b[:, :3] - b_half, b[:, :3] + b_half
    hi = np.minimum(a_hi[:, None, :], b_hi[None, :, :])
    lo = np.maximum(a_lo[:, None, :], b_lo[None, :, :])
    ov = np.maximum(hi - lo, 0.0)
    inter = ov[..., 0] * ov[..., 1] * ov[..., 2]
    va = a[:, 3] * a[:, 4] * a[:, 5]
    vb = b[:, 3] * b[:, 4] * b[:, 5]
    union = va[:, None] + vb[None, :] - inter
    # identical boxes can round one ulp above 1
    return np.minimum(inter / union, 1.0)


def nms_order(boxes, order, threshold):
    """Greedy suppression visiting ``order``; returns kept indices in visit order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    kept = []
    for i in order:
        if kept:
            if np.any(iou_matrix(boxes[i:i + 1], boxes[kept])[0] > threshold):
                continue
        kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def assign_inside_nearest(points, boxes):
    """Index of the containing box with the nearest center, or -1."""
    points = np.asarray(points, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    out = np.full(len(points), -1, dtype=np.int64)
    if len(boxes) == 0 or len(points) == 0:
        return out
    half = boxes[:, 3:] * 0.5
    diff = np.abs(points[:, None, :] - boxes[None, :, :3])
    inside = np.all(diff <= half[None, :, :], axis=2)
    d = points[:, None, :] - boxes[None, :, :3]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    d2 = np.where(inside, d2, np.inf)
    best = np.argmin(d2, axis=1)
    hit = inside[np.arange(len(points)), best]
    out[hit] = best[hit]
    return out


def assign_nearest_within(points, centers, radii):
    """Index of the nearest center if within that center's radius, else -1."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64)
    out = np.full(len(points), -1, dtype=np.int64)
    if len(centers) == 0 or len(points) == 0:
        return out
    d = points[:, None, :] - centers[None, :, :]
    d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    best = np.argmin(d2, axis=1)
    r = radii[best]
    hit = d2[np.arange(len(points)), best] <= r * r
    out[hit] = best[hit]
    return out
