import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelguided import numerics as nx
from labelguided.encoders import SeedRepresentation
from labelguided.lkm import identity_attention, init_attention, lkm_fuse

from gradcheck import check


def attention_oracle(q, k, v):
    """Triple-loop scaled dot-product attention in plain floats."""
    n, c = len(q), len(q[0])
    out = [[0.0] * len(v[0]) for _ in range(n)]
    weights = []
    for i in range(n):
        s = [sum(q[i][t] * k[j][t] for t in range(c)) / math.sqrt(c) for j in range(len(k))]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = sum(e)
        w = [x / z for x in e]
        weights.append(w)
        for j in range(len(k)):
            for t in range(len(v[0])):
                out[i][t] += w[j] * v[j][t]
    return np.array(out), np.array(weights)


def _project(p, prefix, role, x):
    return x @ p[f"{prefix}.{role}.W"] + p[f"{prefix}.{role}.b"]


def _fuse(params, q, kv):
    return lkm_fuse(nx.Tape(params), "lkm", nx.constant(q), SeedRepresentation(nx.constant(kv), np.zeros((len(kv), 3))))


def test_single_seed_returns_value_row():
    p = init_attention(np.random.default_rng(0), "lkm", 4)
    q, kv = np.ones((1, 4)), np.arange(4.0)[None]
    out = _fuse(p, q, kv)
    np.testing.assert_allclose(out.features.value, _project(p, "lkm", "v", kv), atol=1e-15)
    assert out.attention_weights.tolist() == [[1.0]]


def test_zero_query_gives_column_mean_of_values():
    p = identity_attention("lkm", 3)
    kv = np.random.default_rng(1).normal(size=(5, 3))
    out = _fuse(p, np.zeros((5, 3)), kv)
    np.testing.assert_allclose(out.features.value, np.tile(kv.mean(axis=0), (5, 1)), atol=1e-15)


def test_matches_triple_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        c = int(rng.integers(2, 8))
        n = int(rng.integers(1, 10))
        p = init_attention(rng, "lkm", c)
        q, kv = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        out = _fuse(p, q, kv)
        want, w = attention_oracle(_project(p, "lkm", "q", q).tolist(), _project(p, "lkm", "k", kv).tolist(),
                                   _project(p, "lkm", "v", kv).tolist())
        assert np.max(np.abs(out.features.value - want)) <= 1e-12
        assert np.max(np.abs(out.attention_weights - w)) <= 1e-12
        np.testing.assert_allclose(out.attention_weights.sum(axis=1), 1.0, atol=1e-12)


def test_shape_mismatch_rejected():
    p = identity_attention("lkm", 3)
    with pytest.raises(nx.ShapeError):
        _fuse(p, np.zeros((4, 3)), np.zeros((5, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_key_shift_and_seed_permutation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    p = identity_attention("lkm", 4)
    q, kv = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = _fuse(p, q, kv).features.value
    # constant values: every output row equals that constant
    p2 = dict(p)
    p2["lkm.v.W"] = np.zeros((4, 4))
    p2["lkm.v.b"] = np.ones(4)
    np.testing.assert_allclose(_fuse(p2, q, kv).features.value, 1.0, atol=1e-12)
    perm = rng.permutation(6)
    # permuting keys/values together permutes nothing in the output
    np.testing.assert_allclose(_fuse(p, q, kv[perm]).features.value, base, atol=1e-12)
    # permuting queries permutes output rows
    np.testing.assert_allclose(_fuse(p, q[perm], kv).features.value, base[perm], atol=1e-12)
    p3 = dict(p)
    p3["lkm.q.b"] = np.zeros(4)
    p3["lkm.k.b"] = np.full(4, shift)
    # a key bias adds the constant q.b_k along each score row, which softmax ignores
    shifted = _fuse(p3, q, kv).attention_weights
    np.testing.assert_allclose(shifted, _fuse(p, q, kv).attention_weights, atol=1e-9)


def test_lkm_gradients_wrt_weights_and_inputs():
    rng = np.random.default_rng(3)
    for _ in range(5):
        params = init_attention(rng, "lkm", 5)
        params["q_in"] = rng.normal(size=(6, 5))
        params["kv_in"] = rng.normal(size=(6, 5))
        w = rng.normal(size=(6, 5))

        def loss(tape):
            seeds = SeedRepresentation(tape.param("kv_in"), np.zeros((6, 3)))
            return nx.total(nx.mul(lkm_fuse(tape, "lkm", tape.param("q_in"), seeds).features, w))
        check(loss, params)
