"""Padding several graphs (or node subsets of them) into one dense batch.

Each graph contributes the rows of its selected nodes, in the order given,
padded to the largest selection in the batch.  Structural quantities always
come from the full graph: a subset only picks rows and columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import EncodedGraph, Graph


@dataclass
class Batch:
    n_pad: int
    counts: np.ndarray  # (B,) selected nodes per graph
    nodes: list[np.ndarray]  # selected original node ids per graph
    valid: np.ndarray  # (B, N) bool
    degrees: np.ndarray  # (B, N) raw degrees, 0 on padding
    spatial_ids: np.ndarray  # (B, N, N) spatial table indices, 0 on padding
    node_labels: np.ndarray | None  # (B, N) label ids, 0 on padding
    node_attrs: np.ndarray | None  # (B, N, d_V), 0 on padding
    # one entry per (pair, hop) of every stored shortest path inside the selection
    path_labels: np.ndarray | None
    path_hops: np.ndarray | None
    path_segments: np.ndarray | None
    path_weights: np.ndarray | None

    @property
    def size(self) -> int:
        return len(self.counts)

    @property
    def padded(self) -> bool:
        return bool((self.counts < self.n_pad).any())

    def pad_bias(self) -> np.ndarray:
        """(B, 1, N, N) additive mask: 0 between real nodes, -inf to/from padding."""
        pair = self.valid[:, :, None] & self.valid[:, None, :]
        return np.where(pair, 0.0, -np.inf)[:, None]

    def flat_index(self) -> np.ndarray:
        """Row ids of real nodes in the (B*N, ...) flattened layout."""
        b, i = np.nonzero(self.valid)
        return b * self.n_pad + i


def collate_structure(
    encs: Sequence[EncodedGraph],
    subsets: Sequence[np.ndarray | None] | None = None,
    with_edges: bool = True,
) -> Batch:
    """Pad the structural arrays of several (sub)graphs; node features are left empty."""
    if subsets is None:
        subsets = [None] * len(encs)
    nodes = [
        np.arange(e.num_nodes) if s is None else np.asarray(s, dtype=np.int64) for e, s in zip(encs, subsets)
    ]
    counts = np.array([len(s) for s in nodes], dtype=np.int64)
    B, N = len(encs), int(counts.max())
    valid = np.arange(N)[None, :] < counts[:, None]
    degrees = np.zeros((B, N), dtype=np.int64)
    spatial = np.zeros((B, N, N), dtype=np.int64)
    use_edges = with_edges and encs[0].edge_labels is not None
    plab, phop, pseg, pw = [], [], [], []
    for b, (enc, s) in enumerate(zip(encs, nodes)):
        m = len(s)
        degrees[b, :m] = enc.degrees[s]
        spatial[b, :m, :m] = enc.spatial_index()[np.ix_(s, s)]
        if not (use_edges and len(enc.edge_labels)):
            continue
        n = enc.num_nodes
        pair = (s[:, None] * n + s[None, :]).reshape(-1)
        starts = enc.path_ptr[pair]
        lens = enc.path_ptr[pair + 1] - starts
        total = int(lens.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(m * m), lens)
        hop = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
        plab.append(enc.edge_labels[enc.path_edges[starts[owner] + hop]])
        phop.append(hop)
        pseg.append(b * N * N + (owner // m) * N + owner % m)
        pw.append(1.0 / lens[owner])
    paths = (None, None, None, None)
    if use_edges:
        def cat(xs, dt):
            return np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)

        paths = (cat(plab, np.int64), cat(phop, np.int64), cat(pseg, np.int64), cat(pw, np.float64))
    return Batch(N, counts, nodes, valid, degrees, spatial, None, None, *paths)


def collate(
    graphs: Sequence[Graph],
    encs: Sequence[EncodedGraph],
    subsets: Sequence[np.ndarray | None] | None = None,
) -> Batch:
    """Structure plus node features (label ids or attribute vectors)."""
    batch = collate_structure(encs, subsets)
    B, N = batch.size, batch.n_pad
    if graphs[0].node_labels is not None:
        batch.node_labels = np.zeros((B, N), dtype=np.int64)
        for b, (g, s) in enumerate(zip(graphs, batch.nodes)):
            batch.node_labels[b, : len(s)] = g.node_labels[s]
    else:
        batch.node_attrs = np.zeros((B, N, graphs[0].node_attrs.shape[1]))
        for b, (g, s) in enumerate(zip(graphs, batch.nodes)):
            batch.node_attrs[b, : len(s)] = g.node_attrs[s]
    return batch
