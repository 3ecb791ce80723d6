import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg import numeric as nx
from hybridreg.attention import (
    attention,
    attention_weights,
    cross_attention_block,
    init_attention,
    init_transformer_block,
    multi_head,
    self_attention_block,
)
from hybridreg.errors import ShapeMismatch


def test_single_key_returns_its_value(rng):
    V = rng.normal(size=(1, 4))
    out = attention(rng.normal(size=(5, 3)), rng.normal(size=(1, 3)), V, 3).data
    np.testing.assert_array_equal(out, np.repeat(V, 5, axis=0))


def test_identical_keys_average_values(rng):
    K = np.tile(rng.normal(size=3), (6, 1))
    V = rng.normal(size=(6, 2))
    out = attention(rng.normal(size=(4, 3)), K, V, 3).data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (4, 1)), atol=1e-14)


def test_saturated_logits_select_aligned_key():
    K = np.eye(4)
    V = np.arange(16.0).reshape(4, 4)
    out = attention(50.0 * K[[2]], K, V, 1).data
    np.testing.assert_allclose(out[0], V[2], atol=1e-6)


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_rows_are_stochastic(seed, m, n):
    rng = np.random.default_rng(seed)
    W = attention_weights(rng.normal(scale=4, size=(m, 5)), rng.normal(scale=4, size=(n, 5)), 5).data
    assert np.all(W >= 0)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_multi_head_splits_channels(rng):
    p = init_attention(rng, 8, heads=2)
    X, Y = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    Q, K, V = X @ p.Wq.data, Y @ p.Wk.data, Y @ p.Wv.data
    parts = [attention(Q[:, s], K[:, s], V[:, s], 4).data for s in (slice(0, 4), slice(4, 8))]
    np.testing.assert_allclose(multi_head(p, X, Y).data, np.hstack(parts) @ p.Wo.data, atol=1e-13)
    with pytest.raises(ValueError):
        init_attention(rng, 6, heads=4)


def zeroed_block(rng, width=8):
    p = init_transformer_block(rng, width)
    for _, t in nx.named_parameters(p):
        t.data[...] = 0.0
    return p


def test_zeroed_blocks_are_identity(rng):
    p = zeroed_block(rng)
    F, G = rng.normal(size=(6, 8)), rng.normal(size=(4, 8))
    np.testing.assert_array_equal(self_attention_block(p, F).data, F)
    a, b = cross_attention_block(p, F, G)
    np.testing.assert_array_equal(a.data, F)
    np.testing.assert_array_equal(b.data, G)


def test_self_attention_is_permutation_equivariant(rng):
    p = init_transformer_block(rng, 8, 2)
    F = rng.normal(size=(11, 8))
    perm = rng.permutation(11)
    np.testing.assert_allclose(self_attention_block(p, F[perm]).data, self_attention_block(p, F).data[perm],
                               atol=1e-12)


def test_single_target_token_is_shared_by_all_sources(rng):
    p = init_transformer_block(rng, 8)
    Fs, Ft = rng.normal(size=(5, 8)), rng.normal(size=(1, 8))
    nt = nx.layernorm_rows(Ft, p.ln1_gain, p.ln1_bias)
    ns = nx.layernorm_rows(Fs, p.ln1_gain, p.ln1_bias)
    mixed = multi_head(p.attn, ns, nt).data
    np.testing.assert_allclose(mixed, np.tile(((nt @ p.attn.Wv) @ p.attn.Wo).data, (5, 1)), atol=1e-14)
    src, _ = cross_attention_block(p, Fs, Ft)
    assert src.shape == (5, 8)


def test_cross_block_swap_symmetry(rng):
    p = init_transformer_block(rng, 8)
    A, B = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    a1, b1 = cross_attention_block(p, A, B)
    b2, a2 = cross_attention_block(p, B, A)
    np.testing.assert_array_equal(a1.data, a2.data)
    np.testing.assert_array_equal(b1.data, b2.data)


def test_attention_blocks_gradcheck(rng):
    p = init_transformer_block(rng, 8)
    F = nx.parameter(rng.normal(size=(6, 8)))
    G = nx.parameter(rng.normal(size=(4, 8)))
    params = [t for _, t in nx.named_parameters(p)]
    assert nx.gradcheck(lambda: self_attention_block(p, F).sum(), [F, *params]).passed

    def both():
        a, b = cross_attention_block(p, F, G)
        return a.sum() + b.sum()

    assert nx.gradcheck(both, [F, G, *params]).passed


def test_shape_errors(rng):
    p = init_transformer_block(rng, 8)
    with pytest.raises(ShapeMismatch):
        attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 1)))
    with pytest.raises(ShapeMismatch):
        attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((3, 1)))
    with pytest.raises(ShapeMismatch):
        self_attention_block(p, np.ones((3, 7)))
    with pytest.raises(ShapeMismatch):
        cross_attention_block(p, np.ones((3, 8)), np.zeros((0, 8)))
