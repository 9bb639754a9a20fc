"""Graph transformer layer with centrality, spatial and edge encodings.

Centrality is added to the layer-stack input.  Spatial and edge encodings
form a per-head additive bias on the attention logits (added after the
``1/sqrt(d_head)`` scaling).  The edge term for a pair ``(i, j)`` averages,
over the stored shortest path ``e_1..e_L``, the dot products
``edge_emb[label(e_t)] . w_t[head]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .batch import Batch, collate_structure
from .graph import EncodedGraph
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples, redrawn until all lie within two std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class LayerParams:
    """Weights of one transformer layer.

    The per-head projections are stored side by side: columns
    ``k*d_head:(k+1)*d_head`` of ``wq``/``wk``/``wv`` belong to head ``k``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int

    FIELDS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")

    @classmethod
    def init(cls, d: int, heads: int, d_ff: int, rng: np.random.Generator, std: float = 0.02) -> "LayerParams":
        w = lambda *shape: _param(trunc_normal(rng, shape, std), None)  # noqa: E731
        z = lambda *shape: _param(np.zeros(shape), None)  # noqa: E731
        o = lambda *shape: _param(np.ones(shape), None)  # noqa: E731
        return cls(
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            w1=w(d, d_ff), b1=z(d_ff), w2=w(d_ff, d), b2=z(d),
            ln1_g=o(d), ln1_b=z(d), ln2_g=o(d), ln2_b=z(d),
            heads=heads,
        )  # fmt: skip

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in self.FIELDS:
            yield prefix + f, getattr(self, f)


@dataclass
class EncodingTables:
    """Learnable positional tables owned by one layer stack.

    ``spatial`` has one row per table index (distances ``0..max_spd`` then
    UNREACHABLE) and one column per head.  ``hop_w`` packs the per-hop,
    per-head weight vectors: column ``t*heads + k`` is the weight for hop
    ``t+1`` and head ``k``.
    """

    centrality: Tensor
    spatial: Tensor
    edge_emb: Tensor | None
    hop_w: Tensor | None
    max_degree: int
    max_spd: int
    heads: int

    @classmethod
    def init(
        cls,
        d: int,
        heads: int,
        max_degree: int,
        max_spd: int,
        num_edge_classes: int,
        edge_dim: int,
        rng: np.random.Generator,
        std: float = 0.02,
    ) -> "EncodingTables":
        edge_emb = hop_w = None
        if num_edge_classes:
            edge_emb = _param(rng.normal(0.0, std, (num_edge_classes, edge_dim)), None)
            hop_w = _param(trunc_normal(rng, (edge_dim, max_spd * heads), std), None)
        return cls(
            centrality=_param(rng.normal(0.0, std, (max_degree + 1, d)), None),
            spatial=_param(np.zeros((max_spd + 2, heads)), None),
            edge_emb=edge_emb,
            hop_w=hop_w,
            max_degree=max_degree,
            max_spd=max_spd,
            heads=heads,
        )

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "centrality", self.centrality
        yield prefix + "spatial", self.spatial
        if self.edge_emb is not None:
            yield prefix + "edge_emb", self.edge_emb
            yield prefix + "hop_w", self.hop_w


def centrality_encode(h0: Tensor, degrees, tables: EncodingTables) -> Tensor:
    ids = np.minimum(np.asarray(degrees, dtype=np.int64), tables.max_degree)
    return T.add(h0, T.embedding_lookup(tables.centrality, ids))


def build_bias_batch(batch: Batch, tables: EncodingTables) -> Tensor:
    """(B, heads, N, N) attention bias; -inf to and from padded positions."""
    B, N, h = batch.size, batch.n_pad, tables.heads
    bias = T.embedding_lookup(tables.spatial, batch.spatial_ids)  # (B, N, N, h)
    if tables.edge_emb is not None and batch.path_labels is not None and len(batch.path_labels):
        per_hop = T.reshape(
            T.matmul(tables.edge_emb, tables.hop_w), (tables.edge_emb.shape[0] * tables.max_spd, h)
        )
        rows = T.embedding_lookup(per_hop, batch.path_labels * tables.max_spd + batch.path_hops)
        edge = T.segment_sum(rows, batch.path_segments, B * N * N, batch.path_weights)
        bias = T.add(bias, T.reshape(edge, (B, N, N, h)))
    bias = T.swapaxes(T.swapaxes(bias, 1, 3), 2, 3)
    if batch.padded:
        bias = T.add(bias, batch.pad_bias())
    return bias


def build_bias(enc: EncodedGraph, tables: EncodingTables, subset=None) -> Tensor:
    """(heads, m, m) bias for one graph, restricted to ``subset`` if given.

    Distances and paths come from the full graph in ``enc``.
    """
    batch = collate_structure([enc], [subset])
    b = build_bias_batch(batch, tables)
    return T.reshape(b, b.shape[1:])


def attention(x: Tensor, p: LayerParams, bias, return_weights: bool = False):
    """Multi-head attention over the second-to-last axis of ``x``."""
    d = x.shape[-1]
    h = p.heads
    dh = d // h
    lead = x.shape[:-1]

    def heads(t):
        return T.swapaxes(T.reshape(t, lead + (h, dh)), -3, -2)  # (..., h, N, dh)

    q = heads(T.matmul(x, p.wq))
    k = heads(T.matmul(x, p.wk))
    v = heads(T.matmul(x, p.wv))
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    weights = T.softmax_lastdim(T.add(scores, bias))
    ctx = T.reshape(T.swapaxes(T.matmul(weights, v), -3, -2), lead + (d,))
    out = T.matmul(ctx, p.wo)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, p: LayerParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, p.w1), p.b1))
    return T.add(T.matmul(hidden, p.w2), p.b2)


def transformer_layer(x: Tensor, p: LayerParams, bias, dropout: float = 0.0, rng=None) -> Tensor:
    """Pre-norm residual block: attention then feed-forward."""
    a = attention(T.layer_norm(x, p.ln1_g, p.ln1_b), p, bias)
    if dropout:
        a = T.dropout(a, dropout, rng)
    h1 = T.add(x, a)
    f = feed_forward(T.layer_norm(h1, p.ln2_g, p.ln2_b), p)
    if dropout:
        f = T.dropout(f, dropout, rng)
    return T.add(h1, f)
