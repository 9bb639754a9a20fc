"""Masked graph autoencoder: encoder over visible nodes, shallow decoder over all.

A pretraining step samples a mask, encodes the visible nodes with the
full-graph positional information, puts a shared learnable mask token at
every masked position, decodes the whole graph and scores the reconstruction
of the masked nodes' original features.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .batch import Batch, collate, collate_structure
from .errors import ConfigError
from .graph import EncodedGraph, Graph, GraphDataset
from .layers import EncodingTables, LayerParams, build_bias_batch, centrality_encode, transformer_layer, trunc_normal
from .tensor import Tensor


@dataclass
class GmaeConfig:
    enc_layers: int = 12
    dec_layers: int = 2
    hidden: int = 80
    heads: int = 8
    mask_ratio: float = 0.5
    max_spd: int = 20
    max_degree: int = 64
    ffn_mult: int = 4
    dropout: float = 0.0
    edge_dim: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if self.enc_layers < 1:
            raise ConfigError("enc_layers must be >= 1")
        if self.dec_layers < 1:
            raise ConfigError("dec_layers must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.max_spd < 1 or self.max_degree < 1:
            raise ConfigError("max_spd and max_degree must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GmaeConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class FeatureSchema:
    num_node_classes: int = 0
    node_attr_dim: int = 0
    num_edge_classes: int = 0

    @classmethod
    def of(cls, dataset: GraphDataset) -> "FeatureSchema":
        return cls(dataset.num_node_classes, dataset.node_attr_dim, dataset.num_edge_classes)

    @property
    def categorical(self) -> bool:
        return self.node_attr_dim == 0

    @property
    def out_dim(self) -> int:
        return self.num_node_classes if self.categorical else self.node_attr_dim


_DECAYED = ("wq", "wk", "wv", "wo", "w1", "w2", "attr_w", "head_w")


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, not biases, norms or tables."""
    return name.rsplit(".", 1)[-1] in _DECAYED


@dataclass
class ModelParams:
    cfg: GmaeConfig
    schema: FeatureSchema
    node_embed: Tensor | None
    attr_w: Tensor | None
    attr_b: Tensor | None
    enc: list[LayerParams]
    enc_tables: EncodingTables
    dec: list[LayerParams]
    dec_tables: EncodingTables
    mask_token: Tensor
    head_w: Tensor
    head_b: Tensor

    def encoder_named(self) -> dict[str, Tensor]:
        out = {}
        if self.node_embed is not None:
            out["feat.node_embed"] = self.node_embed
        else:
            out["feat.attr_w"] = self.attr_w
            out["feat.attr_b"] = self.attr_b
        for i, layer in enumerate(self.enc):
            out.update(layer.named(f"enc.{i}."))
        out.update(self.enc_tables.named("enc.tables."))
        return out

    def decoder_named(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.dec):
            out.update(layer.named(f"dec.{i}."))
        out.update(self.dec_tables.named("dec.tables."))
        out["dec.mask_token"] = self.mask_token
        out["dec.head_w"] = self.head_w
        out["dec.head_b"] = self.head_b
        return out

    def named(self) -> dict[str, Tensor]:
        return {**self.encoder_named(), **self.decoder_named()}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def num_floats(self) -> int:
        return sum(p.size for p in self.named().values())


def init_params(cfg: GmaeConfig, schema: FeatureSchema, rng: np.random.Generator | int = 0) -> ModelParams:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d, h, std = cfg.hidden, cfg.heads, cfg.init_std
    d_ff = cfg.ffn_mult * d

    def p(a):
        return Tensor(a, requires_grad=True)

    node_embed = attr_w = attr_b = None
    if schema.categorical:
        node_embed = p(rng.normal(0.0, std, (max(schema.num_node_classes, 1), d)))
    else:
        attr_w = p(trunc_normal(rng, (schema.node_attr_dim, d), std))
        attr_b = p(np.zeros(d))

    def tables():
        return EncodingTables.init(d, h, cfg.max_degree, cfg.max_spd, schema.num_edge_classes, cfg.edge_dim, rng, std)

    enc = [LayerParams.init(d, h, d_ff, rng, std) for _ in range(cfg.enc_layers)]
    enc_tables = tables()
    dec = [LayerParams.init(d, h, d_ff, rng, std) for _ in range(cfg.dec_layers)]
    dec_tables = tables()
    mask_token = p(rng.normal(0.0, std, (1, d)))
    out_dim = max(schema.out_dim, 1)
    head_w = p(trunc_normal(rng, (d, out_dim), std))
    head_b = p(np.zeros(out_dim))
    params = ModelParams(cfg, schema, node_embed, attr_w, attr_b, enc, enc_tables, dec, dec_tables, mask_token, head_w, head_b)
    for name, t in params.named().items():
        t.name = name
    return params


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True, eq=False)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.visible) + len(self.masked)

    def permuted(self, perm) -> "MaskPlan":
        """The same plan after relabeling node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return MaskPlan(np.sort(perm[self.visible]), np.sort(perm[self.masked]))


def mask_count(n: int, r: float) -> int:
    """round(r*n), halves rounded up, clamped to [1, n-1]."""
    return min(max(math.floor(r * n + 0.5 + 1e-9), 1), n - 1)


def sample_mask(n: int, r: float, rng: np.random.Generator) -> MaskPlan:
    if n < 2:
        raise ValueError(f"cannot mask a graph with {n} node(s); need at least 2")
    masked = np.sort(rng.choice(n, size=mask_count(n, r), replace=False))
    visible = np.setdiff1d(np.arange(n), masked)
    return MaskPlan(visible, masked)


def full_plan(n: int) -> MaskPlan:
    """Every node visible (the inference path)."""
    return MaskPlan(np.arange(n), np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# forward pieces (batched)


def featurize(params: ModelParams, batch: Batch) -> Tensor:
    if params.node_embed is not None:
        return T.embedding_lookup(params.node_embed, batch.node_labels)
    return T.add(T.matmul(Tensor(batch.node_attrs), params.attr_w), params.attr_b)


def run_stack(x: Tensor, batch: Batch, layers, tables: EncodingTables, cfg: GmaeConfig, rng=None) -> Tensor:
    x = centrality_encode(x, batch.degrees, tables)
    bias = build_bias_batch(batch, tables)
    drop = cfg.dropout if rng is not None else 0.0
    for layer in layers:
        x = transformer_layer(x, layer, bias, drop, rng)
    return x


def encoder_forward(params: ModelParams, batch: Batch, rng=None) -> Tensor:
    """(B, N, d) embeddings of the batch's selected nodes, in selection order."""
    return run_stack(featurize(params, batch), batch, params.enc, params.enc_tables, params.cfg, rng)


def assemble_batch(x_e: Tensor, visible: Batch, masked: Sequence[np.ndarray], full: Batch, mask_token: Tensor) -> Tensor:
    """Scatter encoder rows back to original node positions; mask token elsewhere."""
    B, No, d = x_e.shape
    N = full.n_pad
    token_row, zero_row = B * No, B * No + 1
    index = np.full((B, N), zero_row, dtype=np.int64)
    for b in range(B):
        index[b, visible.nodes[b]] = b * No + np.arange(visible.counts[b])
        index[b, masked[b]] = token_row
    stacked = T.concat([T.reshape(x_e, (B * No, d)), mask_token, Tensor(np.zeros((1, d)))])
    return T.reshape(T.gather_rows(stacked, index.reshape(-1)), (B, N, d))


def decoder_forward(params: ModelParams, x: Tensor, full: Batch, rng=None) -> Tensor:
    h = run_stack(x, full, params.dec, params.dec_tables, params.cfg, rng)
    return T.add(T.matmul(h, params.head_w), params.head_b)


def _masked_loss(pred: Tensor, graphs: Sequence[Graph], plans: Sequence[MaskPlan], n_pad: int, categorical: bool) -> Tensor:
    B, N, c = pred.shape
    rows = np.concatenate([b * N + p.masked for b, p in enumerate(plans)])
    picked = T.gather_rows(T.reshape(pred, (B * N, c)), rows)
    if categorical:
        labels = np.concatenate([g.node_labels[p.masked] for g, p in zip(graphs, plans)])
        return T.loss_cross_entropy(picked, labels)
    target = np.concatenate([g.node_attrs[p.masked] for g, p in zip(graphs, plans)])
    return T.loss_mse(picked, target)


def pretrain_loss(
    params: ModelParams,
    graphs: Sequence[Graph],
    encs: Sequence[EncodedGraph],
    plans: Sequence[MaskPlan],
    rng=None,
) -> Tensor:
    """Mean reconstruction loss over all masked nodes of the batch.

    ``rng`` is only used for dropout; pass None for a deterministic pass.
    """
    visible = collate(graphs, encs, [p.visible for p in plans])
    x_e = encoder_forward(params, visible, rng)
    full = collate_structure(encs)
    x = assemble_batch(x_e, visible, [p.masked for p in plans], full, params.mask_token)
    pred = decoder_forward(params, x, full, rng)
    return _masked_loss(pred, graphs, plans, full.n_pad, params.schema.categorical)


def pooled(h: Tensor, batch: Batch) -> Tensor:
    """(B, d) mean over each graph's real rows; padding contributes nothing."""
    B, N, d = h.shape
    b, _ = np.nonzero(batch.valid)
    weights = 1.0 / batch.counts[b]
    return T.segment_sum(T.gather_rows(T.reshape(h, (B * N, d)), batch.flat_index()), b, B, weights)


def embed_batch(params: ModelParams, graphs: Sequence[Graph], encs: Sequence[EncodedGraph]) -> tuple[Tensor, Tensor, Batch]:
    """Unmasked encoder pass: (B, N, d) node embeddings, (B, d) pooled, and the batch."""
    batch = collate(graphs, encs)
    h = encoder_forward(params, batch)
    return h, pooled(h, batch), batch


# ---------------------------------------------------------------------------
# single-graph API


def encode(g: Graph, enc: EncodedGraph, plan: MaskPlan, params: ModelParams) -> Tensor:
    """(n_visible, d) encoder output, rows in ``plan.visible`` order."""
    batch = collate([g], [enc], [plan.visible])
    x = encoder_forward(params, batch)
    return T.reshape(x, x.shape[1:])


def assemble_decoder_input(x_e: Tensor, plan: MaskPlan, x_m: Tensor) -> Tensor:
    """(n, d): encoder rows at visible positions, copies of ``x_m`` at masked ones."""
    from .errors import ShapeError

    if x_e.ndim != 2 or x_e.shape[0] != len(plan.visible):
        raise ShapeError(f"{x_e.shape} encoder rows for {len(plan.visible)} visible nodes")
    n, n_o = plan.num_nodes, len(plan.visible)
    index = np.empty(n, dtype=np.int64)
    index[plan.visible] = np.arange(n_o)
    index[plan.masked] = n_o
    return T.gather_rows(T.concat([x_e, x_m]), index)


def decode(x_e_prime: Tensor, enc: EncodedGraph, params: ModelParams) -> Tensor:
    """(n, C) logits or (n, d_V) attribute predictions for every node."""
    full = collate_structure([enc])
    n, d = x_e_prime.shape
    out = decoder_forward(params, T.reshape(x_e_prime, (1, n, d)), full)
    return T.reshape(out, out.shape[1:])


def reconstruction_loss(pred: Tensor, g: Graph, plan: MaskPlan) -> Tensor:
    picked = T.gather_rows(pred, plan.masked)
    if g.node_labels is not None:
        return T.loss_cross_entropy(picked, g.node_labels[plan.masked])
    return T.loss_mse(picked, g.node_attrs[plan.masked])


def pretrain_step(g: Graph, enc: EncodedGraph, params: ModelParams, rng: np.random.Generator, plan: MaskPlan | None = None):
    """One full masked-reconstruction pass with gradients.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to arrays;
    parameter ``.grad`` fields are left populated as well.
    """
    if plan is None:
        plan = sample_mask(g.num_nodes, params.cfg.mask_ratio, rng)
    named = params.named()
    T.zero_grad(named.values())
    with T.Tape() as tape:
        x_e = encode(g, enc, plan, params)
        x = assemble_decoder_input(x_e, plan, params.mask_token)
        pred = decode(x, enc, params)
        loss = reconstruction_loss(pred, g, plan)
    T.backward(tape, loss, params=named.values())
    return float(loss.data), {k: p.grad for k, p in named.items()}


def embed(g: Graph, enc: EncodedGraph, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Node embeddings (n, d) and their mean (1, d); the decoder is unused."""
    nodes = encode(g, enc, full_plan(g.num_nodes), params)
    return nodes, T.mean_rows(nodes)


def set_arrays(params: ModelParams, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Copy stored arrays into ``params`` by name; every parameter must be present."""
    named = params.named()
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise KeyError(f"missing parameter arrays: {', '.join(missing[:5])}")
    for k, p in named.items():
        a = np.asarray(arrays[k], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"{k}: stored shape {a.shape} != expected {p.shape}")
        p.data[...] = a
    return params
