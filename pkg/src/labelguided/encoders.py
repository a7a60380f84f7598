"""Feature producers: the point backbone, the label-object encoder and the
annotation descriptor.

All parameters live in a flat map addressed by ``<prefix>.<layer>.<W|b>``;
every encoder reads them through a :class:`~labelguided.numerics.Tape`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .scene import AnnotationSet, PointCloud, subsample_indices

HIDDEN = 64
CLASS_EMBED_DIM = 8


@dataclass
class SeedRepresentation:
    features: nx.Tensor
    seed_positions: np.ndarray


@dataclass
class LabelTokenGrid:
    tokens: nx.Tensor
    source: np.ndarray  # annotation index per seed, -1 for background


@dataclass
class AnnotationEmbedding:
    embeddings: nx.Tensor


# -- parameter initialisation ------------------------------------------------

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str) -> dict:
    bound = math.sqrt(1.0 / fan_in)
    return {
        f"{prefix}.W": rng.uniform(-bound, bound, size=(fan_in, fan_out)),
        f"{prefix}.b": rng.uniform(-bound, bound, size=(fan_out,)),
    }


def init_mlp(rng, dims, prefix: str) -> dict:
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params.update(init_linear(rng, a, b, f"{prefix}.l{i}"))
    return params


def mlp(tape: nx.Tape, prefix: str, x: nx.Tensor, depth: int) -> nx.Tensor:
    """Linear layers with ReLU between them (none after the last)."""
    for i in range(depth):
        x = nx.linear(x, tape.param(f"{prefix}.l{i}.W"), tape.param(f"{prefix}.l{i}.b"))
        if i < depth - 1:
            x = nx.relu(x)
    return x


def init_point_encoder(rng, prefix: str, channels: int) -> dict:
    return init_mlp(rng, (3, HIDDEN, channels), prefix)


def init_label_encoder(rng, prefix: str, channels: int) -> dict:
    params = init_mlp(rng, (3, HIDDEN, channels), prefix)
    bound = math.sqrt(1.0 / channels)
    params[f"{prefix}.empty"] = rng.uniform(-bound, bound, size=(1, channels))
    return params


def init_annotation_encoder(rng, prefix: str, num_classes: int, channels: int) -> dict:
    params = {f"{prefix}.cls": rng.uniform(-1.0, 1.0, size=(num_classes, CLASS_EMBED_DIM))}
    params.update(init_mlp(rng, (6 + CLASS_EMBED_DIM, HIDDEN, channels), prefix))
    return params


# -- backbone ------------------------------------------------------------------

def group_neighbors(points: np.ndarray, seed_idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour offsets ``(n_seeds*k, 3)`` relative to each seed, and seed positions.

    Clouds smaller than ``k`` repeat their farthest neighbour, which leaves the
    max-pool unchanged.
    """
    seeds = points[seed_idx]
    k_eff = min(k, len(points))
    nbr = kernels.knn_indices(points, seeds, k_eff)
    if k_eff < k:
        nbr = np.concatenate([nbr, np.repeat(nbr[:, -1:], k - k_eff, axis=1)], axis=1)
    rel = points[nbr] - seeds[:, None, :]
    return rel.reshape(-1, 3), seeds


def point_features(tape: nx.Tape, prefix: str, grouped: np.ndarray, k: int) -> nx.Tensor:
    """Per-point MLP on grouped offsets, max-pooled over each seed's ``k`` rows."""
    h = mlp(tape, prefix, nx.constant(grouped), 2)
    return nx.group_max(h, k)


def encode_points(tape: nx.Tape, prefix: str, cloud: PointCloud, n_seeds: int, seed,
                  k: int = 16) -> SeedRepresentation:
    if len(cloud) == 0:
        raise ValueError("cannot encode an empty cloud")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = subsample_indices(len(cloud), n_seeds, rng)
    grouped, seeds = group_neighbors(cloud.points, idx, k)
    return SeedRepresentation(point_features(tape, prefix, grouped, k), seeds)


# -- label point clouds -------------------------------------------------------

def stack_label_clouds(label_clouds) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Concatenate centred label clouds.

    Returns the stacked points, start offsets of the non-empty clouds, and for
    every object its row in the pooled output (``-1`` when the cloud is empty).
    """
    chunks, starts, slot = [], [], []
    offset = 0
    for _, cloud in label_clouds:
        pts = cloud.points
        if len(pts) == 0:
            slot.append(-1)
            continue
        slot.append(len(starts))
        starts.append(offset)
        chunks.append(pts - pts.mean(axis=0))
        offset += len(pts)
    stacked = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return stacked, starts, np.asarray(slot, dtype=np.int64)


def encode_label_objects(tape: nx.Tape, prefix: str, label_clouds) -> nx.Tensor:
    """One embedding per object: max-pool of the per-point MLP over its points.

    Points are centred on their own mean first.  Empty clouds take the learned
    ``<prefix>.empty`` row.
    """
    empty = tape.param(f"{prefix}.empty")
    if not label_clouds:
        return nx.take_rows(empty, np.zeros(0, dtype=np.int64))
    stacked, starts, slot = stack_label_clouds(label_clouds)
    if not starts:
        return nx.take_rows(empty, np.zeros(len(slot), dtype=np.int64))
    pooled = nx.segment_max(mlp(tape, prefix, nx.constant(stacked), 2), starts)
    table = nx.concat([pooled, empty], axis=0)
    return nx.take_rows(table, np.where(slot < 0, len(starts), slot))


def scatter_to_seeds(object_embeddings: nx.Tensor, boxes: np.ndarray, seed_positions: np.ndarray,
                     background: nx.Tensor) -> LabelTokenGrid:
    """Give each seed the embedding of its nearest annotation centre.

    A seed farther than ``max(l, w, h) / 2`` from that centre takes the
    background row instead.  ``boxes`` rows are ``(cx, cy, cz, l, w, h)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    if object_embeddings.shape[0] != len(boxes):
        raise nx.ShapeError(f"{object_embeddings.shape[0]} embeddings for {len(boxes)} boxes")
    radii = boxes[:, 3:].max(axis=1) / 2.0 if len(boxes) else np.zeros(0)
    src = kernels.assign_nearest_within(seed_positions, boxes[:, :3], radii)
    table = nx.concat([object_embeddings, background], axis=0)
    return LabelTokenGrid(nx.take_rows(table, np.where(src < 0, len(boxes), src)), src)


# -- annotation descriptor ----------------------------------------------------

def annotation_inputs(annotations: AnnotationSet, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    geom = annotations.boxes()
    cls = annotations.classes()
    if np.any(cls >= num_classes) or np.any(cls < 0):
        raise ValueError(f"class index outside [0, {num_classes})")
    return geom, cls


def encode_annotations(tape: nx.Tape, prefix: str, annotations: AnnotationSet,
                       num_classes: int) -> AnnotationEmbedding:
    """MLP over ``(x, y, z, l, w, h)`` joined with a learned class embedding."""
    if len(annotations) == 0:
        raise ValueError("encode_annotations needs at least one annotation")
    geom, cls = annotation_inputs(annotations, num_classes)
    return AnnotationEmbedding(encode_annotation_arrays(tape, prefix, geom, cls))


def encode_annotation_arrays(tape: nx.Tape, prefix: str, geom: np.ndarray, cls: np.ndarray) -> nx.Tensor:
    emb = nx.take_rows(tape.param(f"{prefix}.cls"), cls)
    x = nx.concat([nx.constant(geom), emb], axis=1)
    return mlp(tape, prefix, x, 2)
