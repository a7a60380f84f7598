"""Label-knowledge mapper: single-head scaled dot-product cross-attention.

Queries come from label tokens, keys and values from the seed features of the
original cloud::

    H = softmax(q(Q) k(K)^T / sqrt(C)) v(V)

Each of ``q``, ``k``, ``v`` is a square linear layer with bias.  There is no
output projection and no residual path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import LabelTokenGrid, SeedRepresentation, init_linear


@dataclass
class FusedRepresentation:
    features: nx.Tensor
    attention_weights: np.ndarray


def init_attention(rng, prefix: str, channels: int) -> dict:
    params = {}
    for role in ("q", "k", "v"):
        params.update(init_linear(rng, channels, channels, f"{prefix}.{role}"))
    return params


def identity_attention(prefix: str, channels: int) -> dict:
    """Projections that pass inputs through unchanged (handy for tests)."""
    params = {}
    for role in ("q", "k", "v"):
        params[f"{prefix}.{role}.W"] = np.eye(channels)
        params[f"{prefix}.{role}.b"] = np.zeros(channels)
    return params


def attend(tape: nx.Tape, prefix: str, queries: nx.Tensor, keys: nx.Tensor,
           values: nx.Tensor | None = None) -> tuple[nx.Tensor, nx.Tensor]:
    """Attention over the last two axes; returns ``(output, weights)``.

    Inputs may be 2-D ``(rows, C)`` or batched 3-D ``(B, rows, C)``.
    """
    values = keys if values is None else values
    if queries.shape[-1] != keys.shape[-1] or keys.shape[:-1] != values.shape[:-1]:
        raise nx.ShapeError(f"attention shapes disagree: q{queries.shape} k{keys.shape} v{values.shape}")
    q = nx.linear(queries, tape.param(f"{prefix}.q.W"), tape.param(f"{prefix}.q.b"))
    k = nx.linear(keys, tape.param(f"{prefix}.k.W"), tape.param(f"{prefix}.k.b"))
    v = nx.linear(values, tape.param(f"{prefix}.v.W"), tape.param(f"{prefix}.v.b"))
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(k.shape[-1]))
    weights = nx.softmax_rows(scores)
    return nx.matmul(weights, v), weights


def lkm_fuse(tape: nx.Tape, prefix: str, query_tokens: LabelTokenGrid | nx.Tensor,
             seed_repr: SeedRepresentation | nx.Tensor) -> FusedRepresentation:
    tokens = query_tokens.tokens if isinstance(query_tokens, LabelTokenGrid) else query_tokens
    feats = seed_repr.features if isinstance(seed_repr, SeedRepresentation) else seed_repr
    if tokens.shape != feats.shape:
        raise nx.ShapeError(f"label tokens {tokens.shape} and seed features {feats.shape} differ")
    out, weights = attend(tape, prefix, tokens, feats)
    return FusedRepresentation(out, weights.value)
