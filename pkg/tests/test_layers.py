import numpy as np
import pytest

from gmae import tensor as T
from gmae.batch import collate_structure
from gmae.graph import UNREACHABLE, compute_encodings, make_graph
from gmae.layers import (
    EncodingTables,
    LayerParams,
    attention,
    build_bias,
    build_bias_batch,
    centrality_encode,
    transformer_layer,
)
from gmae.tensor import Tensor

from toys import er_graph, naive_attention


def tables(rng, d=8, heads=2, max_degree=6, max_spd=5, edge_classes=3, std=0.5):
    return EncodingTables.init(d, heads, max_degree, max_spd, edge_classes, 4, rng, std)


def randomize(tab, rng):
    for t in (tab.spatial, tab.centrality):
        t.data[...] = rng.standard_normal(t.shape)
    return tab


def layer(rng, d=8, heads=2, std=0.4):
    return LayerParams.init(d, heads, 4 * d, rng, std)


def hand_bias(enc, tab, labels):
    """Bias from the definition: spatial entry plus the path average of per-hop dot products."""
    n, h = enc.num_nodes, tab.heads
    out = np.zeros((h, n, n))
    emb, hop = tab.edge_emb.data, tab.hop_w.data
    for i in range(n):
        for j in range(n):
            s = enc.spd[i, j]
            idx = tab.max_spd + 1 if s == UNREACHABLE else s
            for k in range(h):
                out[k, i, j] = tab.spatial.data[idx, k]
                path = enc.path(i, j)
                if path:
                    terms = [emb[labels[e]] @ hop[:, t * h + k] for t, e in enumerate(path)]
                    out[k, i, j] += sum(terms) / len(terms)
    return out


# -- centrality


def test_centrality_zero_table_is_identity():
    rng = np.random.default_rng(0)
    tab = tables(rng)
    tab.centrality.data[...] = 0
    h0 = Tensor(rng.standard_normal((3, 8)))
    assert np.array_equal(centrality_encode(h0, [0, 1, 2], tab).data, h0.data)


def test_centrality_equal_degrees_and_clamp():
    rng = np.random.default_rng(1)
    tab = EncodingTables.init(8, 2, 64, 5, 0, 4, rng, 0.5)
    out = centrality_encode(Tensor(np.zeros((4, 8))), [3, 3, 100, 64], tab).data
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[2], out[3])


# -- bias


def test_zero_tables_give_zero_bias():
    rng = np.random.default_rng(2)
    g = er_graph(6, 0.4, 2, num_edge_labels=3)
    tab = tables(rng)
    for t in (tab.spatial, tab.edge_emb, tab.hop_w):
        t.data[...] = 0
    assert not build_bias(compute_encodings(g, 5), tab).data.any()


@pytest.mark.parametrize("seed", range(5))
def test_bias_matches_definition(seed):
    rng = np.random.default_rng(seed)
    g = er_graph(5, 0.5, seed, num_edge_labels=3)
    enc = compute_encodings(g, 5)
    tab = randomize(tables(rng), rng)
    assert np.allclose(build_bias(enc, tab).data, hand_bias(enc, tab, g.edge_labels), atol=1e-13, rtol=0)


def test_bias_with_unreachable_and_clamped_pairs():
    rng = np.random.default_rng(7)
    edges = [(i, i + 1) for i in range(7)]  # 0..7 path plus isolated node 8
    g = make_graph(9, edges, edge_labels=[i % 3 for i in range(7)])
    enc = compute_encodings(g, 3)
    tab = randomize(tables(rng, max_spd=3), rng)
    assert np.allclose(build_bias(enc, tab).data, hand_bias(enc, tab, g.edge_labels), atol=1e-13, rtol=0)


def test_bias_superposition():
    rng = np.random.default_rng(3)
    g = er_graph(7, 0.4, 3, num_edge_labels=3)
    enc = compute_encodings(g, 5)
    tab = randomize(tables(rng), rng)
    full = build_bias(enc, tab).data
    spatial_only = tables(rng)
    spatial_only.spatial.data[...] = tab.spatial.data
    spatial_only.edge_emb.data[...] = 0
    edge_only = tables(rng)
    edge_only.spatial.data[...] = 0
    edge_only.edge_emb.data[...] = tab.edge_emb.data
    edge_only.hop_w.data[...] = tab.hop_w.data
    parts = build_bias(enc, spatial_only).data + build_bias(enc, edge_only).data
    assert np.allclose(full, parts, atol=1e-14, rtol=0)


def test_bias_subset_is_submatrix():
    rng = np.random.default_rng(4)
    g = er_graph(9, 0.3, 4, num_edge_labels=3)
    enc = compute_encodings(g, 5)
    tab = randomize(tables(rng), rng)
    full = build_bias(enc, tab).data
    assert np.array_equal(build_bias(enc, tab, np.arange(9)).data, full)
    sub = np.array([0, 3, 4, 8])
    assert np.array_equal(build_bias(enc, tab, sub).data, full[:, sub][:, :, sub])


def test_padded_batch_bias():
    rng = np.random.default_rng(5)
    encs = [compute_encodings(er_graph(n, 0.5, n, num_edge_labels=3), 5) for n in (3, 5)]
    tab = randomize(tables(rng), rng)
    b = build_bias_batch(collate_structure(encs), tab).data
    assert b.shape == (2, 2, 5, 5)
    assert np.isneginf(b[0, :, 3:, :]).all() and np.isneginf(b[0, :, :, 3:]).all()
    assert np.array_equal(b[0, :, :3, :3], build_bias(encs[0], tab).data)
    assert np.array_equal(b[1], build_bias(encs[1], tab).data)


# -- attention and the layer


def test_single_node_attention():
    rng = np.random.default_rng(6)
    p = layer(rng)
    x = rng.standard_normal((1, 8))
    out = attention(Tensor(x), p, np.zeros((2, 1, 1))).data
    assert np.allclose(out, x @ p.wv.data @ p.wo.data, atol=1e-14)


def test_constant_bias_shift_leaves_attention_unchanged():
    rng = np.random.default_rng(7)
    p = layer(rng)
    x = Tensor(rng.standard_normal((5, 8)))
    bias = rng.standard_normal((2, 5, 5))
    shifted = bias + np.array([3.0, -11.0])[:, None, None]
    assert np.allclose(attention(x, p, bias).data, attention(x, p, shifted).data, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_attention_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    p = layer(rng)
    x = rng.standard_normal((4, 8))
    bias = rng.standard_normal((2, 4, 4))
    fast = attention(Tensor(x), p, bias).data
    slow = naive_attention(x, p.wq.data, p.wk.data, p.wv.data, p.wo.data, bias, 2)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_attention_weights_are_convex():
    rng = np.random.default_rng(8)
    p = layer(rng)
    _, w = attention(Tensor(rng.standard_normal((6, 8))), p, rng.standard_normal((2, 6, 6)) * 5, return_weights=True)
    assert (w.data >= 0).all()
    assert np.allclose(w.data.sum(-1), 1.0, atol=1e-12, rtol=0)


def test_zero_output_projections_give_identity():
    rng = np.random.default_rng(9)
    p = layer(rng)
    p.wo.data[...] = 0
    p.w2.data[...] = 0
    x = rng.standard_normal((4, 8))
    assert np.array_equal(transformer_layer(Tensor(x), p, np.zeros((2, 4, 4))).data, x)


def test_layer_gradients():
    rng = np.random.default_rng(10)
    p = layer(rng, std=0.3)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    bias = rng.standard_normal((2, 4, 4))
    params = [getattr(p, f) for f in LayerParams.FIELDS]
    err = T.grad_check_many(lambda: T.sum_all(transformer_layer(x, p, bias)), params + [x])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_layer_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = layer(rng)
    n = 7
    x = rng.standard_normal((n, 8))
    bias = rng.standard_normal((2, n, n))
    perm = rng.permutation(n)
    out = transformer_layer(Tensor(x), p, bias).data
    out_p = transformer_layer(Tensor(x[perm]), p, bias[:, perm][:, :, perm]).data
    assert np.max(np.abs(out_p - out[perm])) < 1e-10
