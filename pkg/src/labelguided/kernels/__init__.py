"""Geometric hot loops.

The compiled module ``_ckernels`` is used when it has been built; otherwise
the numpy fallback is loaded.  Set ``LABELGUIDED_PURE_PYTHON=1`` to force the
fallback.  ``BACKEND`` names the active implementation.
"""
import os

from . import _fallback

if os.environ.get("LABELGUIDED_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

knn_indices = _impl.knn_indices
points_in_box_mask = _impl.points_in_box_mask
iou_matrix = _impl.iou_matrix
nms_order = _impl.nms_order
assign_inside_nearest = _impl.assign_inside_nearest
assign_nearest_within = _impl.assign_nearest_within

__all__ = [
    "BACKEND",
    "knn_indices",
    "points_in_box_mask",
    "iou_matrix",
    "nms_order",
    "assign_inside_nearest",
    "assign_nearest_within",
]
