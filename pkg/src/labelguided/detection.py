"""Shared detection head, the training losses, box decoding and mAP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .encoders import init_mlp, mlp
from .scene import Annotation, AnnotationSet


def head_arity(num_classes: int) -> int:
    return 7 + num_classes


def init_head(rng, prefix: str, channels: int, num_classes: int) -> dict:
    return init_mlp(rng, (channels, channels, head_arity(num_classes)), prefix)


@dataclass
class RawPredictions:
    objectness: nx.Tensor  # (R, 1) logits
    center: nx.Tensor  # (R, 3) seed position + offset
    log_size: nx.Tensor  # (R, 3)
    class_logits: nx.Tensor  # (R, K)
    seed_positions: np.ndarray

    @property
    def size(self) -> np.ndarray:
        return np.exp(self.log_size.value)


def head_forward(tape: nx.Tape, prefix: str, features: nx.Tensor, seed_positions) -> RawPredictions:
    """Run the head on seed features ``(R, C)``."""
    seed_positions = np.asarray(seed_positions, dtype=np.float64).reshape(-1, 3)
    out = mlp(tape, prefix, features, 2)
    width = out.shape[1]
    return RawPredictions(
        objectness=nx.columns(out, 0, 1),
        center=nx.add(nx.columns(out, 1, 4), seed_positions),
        log_size=nx.columns(out, 4, 7),
        class_logits=nx.columns(out, 7, width),
        seed_positions=seed_positions,
    )


@dataclass
class Targets:
    positive: np.ndarray
    box_index: np.ndarray
    center: np.ndarray
    log_size: np.ndarray
    cls: np.ndarray


def assign_targets(seed_positions, gt: AnnotationSet) -> Targets:
    """A seed is positive iff it lies inside a real box; overlaps go to the nearest centre."""
    seed_positions = np.asarray(seed_positions, dtype=np.float64).reshape(-1, 3)
    real = gt.real()
    boxes = real.boxes()
    idx = kernels.assign_inside_nearest(seed_positions, boxes)
    pos = idx >= 0
    r = len(seed_positions)
    center = np.zeros((r, 3))
    log_size = np.zeros((r, 3))
    cls = np.zeros(r, dtype=np.int64)
    if pos.any():
        center[pos] = boxes[idx[pos], :3]
        log_size[pos] = np.log(boxes[idx[pos], 3:])
        cls[pos] = real.classes()[idx[pos]]
    return Targets(pos, idx, center, log_size, cls)


def concat_targets(targets: list[Targets]) -> Targets:
    return Targets(*(np.concatenate([getattr(t, f) for t in targets])
                     for f in ("positive", "box_index", "center", "log_size", "cls")))


def detection_loss(pred: RawPredictions, targets: Targets) -> nx.Tensor:
    """Objectness BCE over all seeds plus, on positives, L1 centre, L1 log-size
    and class cross-entropy, all with weight one."""
    loss = nx.bce_with_logits(pred.objectness, targets.positive.astype(np.float64))
    pos = np.flatnonzero(targets.positive)
    if len(pos) == 0:
        return loss
    dc = nx.sub(nx.take_rows(pred.center, pos), targets.center[pos])
    ds = nx.sub(nx.take_rows(pred.log_size, pos), targets.log_size[pos])
    loss = nx.add(loss, nx.mean(nx.sum_rows(nx.absolute(dc))))
    loss = nx.add(loss, nx.mean(nx.sum_rows(nx.absolute(ds))))
    return nx.add(loss, nx.cross_entropy(nx.take_rows(pred.class_logits, pos), targets.cls[pos]))


def aux_loss(f_repr: nx.Tensor, g_repr: nx.Tensor) -> nx.Tensor:
    """Frobenius distance between backbone features and the (constant) fused grid."""
    if f_repr.shape != g_repr.shape:
        raise nx.ShapeError(f"aux_loss shapes differ: {f_repr.shape} vs {g_repr.shape}")
    return nx.frobenius_norm(nx.sub(f_repr, nx.detach(g_repr)))


@dataclass
class LossBreakdown:
    det1: float = 0.0
    det2: float = 0.0
    idf: float = 0.0
    aux: float = 0.0
    lam: float = 1.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"det1": self.det1, "det2": self.det2, "idf": self.idf, "aux": self.aux,
                "lambda": self.lam, "total": self.total}


def total_loss(det1=None, det2=None, idf=None, aux=None, lam: float = 1.0):
    """Combine the active terms as ``det1 + det2 + idf + lam * aux``.

    Returns ``(loss tensor, LossBreakdown)``; absent terms count as zero.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    terms = []
    for t in (det1, det2, idf):
        if t is not None:
            terms.append(t)
    if aux is not None:
        terms.append(nx.mul(aux, lam))
    if not terms:
        raise ValueError("total_loss needs at least one term")
    loss = terms[0]
    for t in terms[1:]:
        loss = nx.add(loss, t)

    def val(t):
        return 0.0 if t is None else float(t.value)

    bd = LossBreakdown(val(det1), val(det2), val(idf), val(aux), lam, float(loss.value))
    return loss, bd


# -- inference ------------------------------------------------------------------

@dataclass
class Detections:
    items: list[tuple[Annotation, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def boxes(self) -> np.ndarray:
        return np.array([a.box for a, _ in self.items]).reshape(-1, 6)

    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.items], dtype=np.float64)


def decode_and_nms(pred: RawPredictions | None, objectness_threshold: float = 0.05,
                   nms_threshold: float = 0.25) -> Detections:
    """Keep seeds with objectness above the threshold, then class-agnostic greedy NMS."""
    if not (0.0 <= objectness_threshold <= 1.0 and 0.0 <= nms_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    if pred is None or pred.objectness.shape[0] == 0:
        return Detections()
    scores = nx._stable_sigmoid(pred.objectness.value[:, 0])
    keep = np.flatnonzero(scores > objectness_threshold)
    if len(keep) == 0:
        return Detections()
    centers = pred.center.value[keep]
    sizes = np.exp(pred.log_size.value[keep])
    classes = pred.class_logits.value[keep].argmax(axis=1)
    boxes = np.concatenate([centers, sizes], axis=1)
    order = np.argsort(-scores[keep], kind="stable")
    kept = kernels.nms_order(boxes, order, nms_threshold)
    return Detections([
        (Annotation(boxes[i, :3], boxes[i, 3:], int(classes[i])), float(scores[keep][i]))
        for i in kept
    ])


def nms(boxes, scores, threshold: float) -> np.ndarray:
    """Indices kept by greedy NMS on raw arrays, highest score first."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return kernels.nms_order(np.asarray(boxes, dtype=np.float64).reshape(-1, 6), order, threshold)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point AP: area under the monotone precision envelope."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def match_class(dets, gts, threshold: float) -> tuple[np.ndarray, int]:
    """TP flags of one class's detections in descending-score order.

    ``dets`` is a list of ``(scene, score, box)``; ``gts`` maps scene to an
    array of gt boxes of that class.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    matched = {s: np.zeros(len(b), dtype=bool) for s, b in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        s, _, box = dets[i]
        g = gts.get(s)
        if g is None or len(g) == 0:
            continue
        ious = kernels.iou_matrix(box[None], g)[0]
        ious[matched[s]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            tp[rank] = 1.0
            matched[s][j] = True
    n_gt = sum(len(b) for b in gts.values())
    return tp, n_gt


def evaluate_map(detections: list[Detections], ground_truth: list[AnnotationSet], num_classes: int,
                 thresholds=(0.25, 0.5)) -> dict:
    """Per-class AP and mAP at each IoU threshold.

    Classes without ground truth in the split are left out of the mean and
    listed under ``excluded_classes``.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth cover different scene counts")
    result = {"per_class_AP": {}, "excluded_classes": []}
    gt_by_class = []
    for c in range(num_classes):
        gts = {}
        for s, gt in enumerate(ground_truth):
            rows = [a.box for a in gt if a.is_real and a.cls == c]
            if rows:
                gts[s] = np.array(rows)
        gt_by_class.append(gts)
        if not gts:
            result["excluded_classes"].append(c)
    for thr in thresholds:
        key = f"{thr:g}"
        aps = {}
        for c in range(num_classes):
            if not gt_by_class[c]:
                continue
            dets = [(s, score, ann.box) for s, d in enumerate(detections)
                    for ann, score in d.items if ann.cls == c]
            tp, n_gt = match_class(dets, gt_by_class[c], thr)
            aps[c] = average_precision(tp, n_gt)
        result["per_class_AP"][key] = {str(c): ap for c, ap in aps.items()}
        result[f"mAP@{thr:g}"] = float(np.mean(list(aps.values()))) if aps else 0.0
    return result
