"""Label-annotation inducer.

Annotations are jittered and padded with fake boxes, embedded by the
annotation descriptor, scored real-vs-fake, mixed by self-attention and then
used as queries into the label-object embeddings.  The result replaces the raw
label tokens that feed the label-knowledge mapper.

Fake boxes only reach the identification head; fusion sees real boxes only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import (
    SeedRepresentation,
    encode_annotation_arrays,
    encode_label_objects,
    init_linear,
    scatter_to_seeds,
)
from .lkm import FusedRepresentation, attend, lkm_fuse
from .scene import Annotation, AnnotationSet


@dataclass
class AugmentConfig:
    scale_factor: float = 0.1
    fake_ratio: float = 1.0
    enable_size_aug: bool = True
    enable_fake: bool = True

    def __post_init__(self):
        if self.scale_factor < 0:
            raise ValueError("scale_factor must be >= 0")
        if self.fake_ratio < 0:
            raise ValueError("fake_ratio must be >= 0")


def dither_centers(annotations: AnnotationSet, cfg: AugmentConfig, rng: np.random.Generator) -> AnnotationSet:
    """Shift each real centre by ``eta * (l, w, h)`` with ``eta ~ U[-B, B]`` per axis."""
    if not cfg.enable_size_aug or cfg.scale_factor == 0:
        return annotations
    b = cfg.scale_factor
    out = []
    for a in annotations:
        if not a.is_real:
            out.append(a)
            continue
        eta = rng.uniform(-b, b, size=3)
        center = tuple(c + e * s for c, e, s in zip(a.center, eta, a.size))
        out.append(Annotation(center, a.size, a.cls, True))
    return AnnotationSet(out)


def make_fake_instances(annotations: AnnotationSet, cfg: AugmentConfig, scene_bounds,
                        class_size_stats, rng: np.random.Generator) -> AnnotationSet:
    """Append ``round(fake_ratio * N_real)`` fakes flagged ``is_real=False``.

    ``class_size_stats`` lists ``(mean_size, relative_spread)`` per class.  A
    fake takes a uniform class, a size from that class and a centre uniform in
    the scene bounds.
    """
    if not cfg.enable_fake:
        return annotations
    n_real = sum(1 for a in annotations if a.is_real)
    n_fake = int(math.floor(cfg.fake_ratio * n_real + 0.5))
    lo = np.asarray(scene_bounds[:3], dtype=np.float64)
    hi = np.asarray(scene_bounds[3:], dtype=np.float64)
    fakes = []
    for _ in range(n_fake):
        cls = int(rng.integers(len(class_size_stats)))
        mean, spread = class_size_stats[cls]
        size = np.asarray(mean) * (1.0 + rng.uniform(-spread, spread, size=3))
        center = rng.uniform(lo, hi)
        fakes.append(Annotation(center, size, cls, False))
    return AnnotationSet(tuple(annotations) + tuple(fakes))


def augment(annotations: AnnotationSet, cfg: AugmentConfig, scene_bounds, class_size_stats, rng) -> AnnotationSet:
    return make_fake_instances(dither_centers(annotations, cfg, rng), cfg, scene_bounds, class_size_stats, rng)


# -- identification ------------------------------------------------------------

def init_identification_head(rng, prefix: str, channels: int) -> dict:
    return init_linear(rng, channels, 1, prefix)


def identification_probs(tape: nx.Tape, prefix: str, x: nx.Tensor) -> nx.Tensor:
    logit = nx.linear(x, tape.param(f"{prefix}.W"), tape.param(f"{prefix}.b"))
    return nx.sigmoid(logit)


def identification_loss(probs: nx.Tensor, flags) -> nx.Tensor:
    """Mean binary cross-entropy of real (1) vs fake (0) flags."""
    return nx.binary_cross_entropy(probs, flags)


# -- attention stages -----------------------------------------------------------

def annotation_self_attention(tape: nx.Tape, prefix: str, embeddings: nx.Tensor) -> nx.Tensor:
    out, _ = attend(tape, prefix, embeddings, embeddings)
    return out


def lai_cross_attention(tape: nx.Tape, prefix: str, q_alpha: nx.Tensor, label_repr: nx.Tensor) -> nx.Tensor:
    if q_alpha.shape[-1] != label_repr.shape[-1]:
        raise nx.ShapeError(f"query {q_alpha.shape} and label features {label_repr.shape} differ in width")
    out, _ = attend(tape, prefix, q_alpha, label_repr)
    return out


@dataclass
class LabelBranchOutput:
    object_tokens: nx.Tensor
    probs: nx.Tensor | None
    flags: np.ndarray | None


def label_branch(tape: nx.Tape, label_clouds, augmented: AnnotationSet, num_classes: int,
                 use_lai: bool = True) -> LabelBranchOutput:
    """Per-object tokens for the real boxes of one scene.

    With ``use_lai`` the label-object embeddings are re-read through the
    annotation queries; otherwise the raw label-object embeddings are the
    tokens.  ``label_clouds`` must align with the real rows of ``augmented``.
    """
    psi = encode_label_objects(tape, "psi", label_clouds)
    if not use_lai or len(augmented) == 0:
        return LabelBranchOutput(psi, None, None)
    flags = augmented.flags()
    emb = encode_annotation_arrays(tape, "beta", augmented.boxes(), augmented.classes())
    probs = identification_probs(tape, "idf", emb)
    real = np.flatnonzero(flags > 0.5)
    if len(real) == 0:
        return LabelBranchOutput(psi, probs, flags)
    q_alpha = annotation_self_attention(tape, "lai_self", nx.take_rows(emb, real))
    f_a = lai_cross_attention(tape, "lai_cross", q_alpha, psi)
    return LabelBranchOutput(f_a, probs, flags)


def compose_G(tape: nx.Tape, seed_repr: SeedRepresentation, f_a: nx.Tensor, real_boxes: np.ndarray,
              embeddings: nx.Tensor | None = None) -> tuple[FusedRepresentation, nx.Tensor | None]:
    """Scatter per-object tokens onto the seeds, then cross-attend the seeds.

    Returns the fused grid and, when ``embeddings`` are given, the
    identification probabilities read from them.
    """
    grid = scatter_to_seeds(f_a, real_boxes, seed_repr.seed_positions, tape.param("bg.token"))
    fused = lkm_fuse(tape, "lkm", grid, seed_repr)
    probs = None if embeddings is None else identification_probs(tape, "idf", embeddings)
    return fused, probs
