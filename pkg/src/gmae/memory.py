"""Peak-memory model for a masked-autoencoder step versus a full-graph step.

Memory is counted in float64 elements held by live tensors (see
``tensor.LiveFloatCounter``), so numbers are platform independent.  The
estimator mirrors what the engine keeps alive at the end of backward: every
forward output, the attention-bias gradient of each stack, and one gradient
buffer per trainable parameter.

Per transformer layer over ``m`` rows the engine records

* ``C_ATTN = 4`` attention-shaped outputs of ``heads * m**2`` floats
  (raw scores, scaled scores, biased scores, softmax weights);
* ``C_ACT = 12 + 3 * ffn_mult`` row-shaped outputs of ``d`` floats per row
  (two norms, q/k/v, weighted values and their head-merged copy, output
  projection, two residual sums, second FFN matmul and bias, plus three
  ``ffn_mult * d`` wide FFN tensors).

Each stack also holds ``C_BIAS = 2`` bias-shaped tensors (the spatial lookup
and its accumulated gradient) and about ``C_IO = 3`` row-shaped input tensors
(feature lookup or mask-token scatter, centrality lookup, their sum).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import StateError
from .graph import Graph, compute_encodings, make_graph
from .model import FeatureSchema, GmaeConfig, embed_batch, init_params, mask_count, pretrain_step

C_ATTN = 4
C_BIAS = 2
C_IO = 3
MODES = ("gmae", "full")


def c_act(cfg: GmaeConfig) -> int:
    return 12 + 3 * cfg.ffn_mult


def _layer_params(d: int, ffn_mult: int) -> int:
    f = ffn_mult * d
    return 4 * d * d + 2 * d * f + f + 5 * d


def _table_params(cfg: GmaeConfig, num_edge_classes: int) -> int:
    n = (cfg.max_degree + 1) * cfg.hidden + (cfg.max_spd + 2) * cfg.heads
    if num_edge_classes:
        n += num_edge_classes * cfg.edge_dim + cfg.edge_dim * cfg.max_spd * cfg.heads
    return n


@dataclass(frozen=True)
class MemEstimate:
    n: int
    mode: str
    visible: int
    attention_logits: int  # heads * (enc_layers * n_o**2 + dec_layers * n**2)
    attention: int
    activations: int
    parameters: int
    config: dict

    @property
    def total(self) -> int:
        return self.attention + self.activations + self.parameters

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def estimate_peak_floats(
    n: int, cfg: GmaeConfig, mode: str = "gmae", schema: FeatureSchema = FeatureSchema(4, 0, 0)
) -> MemEstimate:
    """Analytic peak live floats of one step on an ``n``-node graph.

    ``mode="gmae"``: encoder over the ``n_o`` visible nodes, decoder over all
    ``n``.  ``mode="full"``: the encoder stack alone over all ``n`` nodes,
    pooled into a one-output head (no decoder).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    d, h = cfg.hidden, cfg.heads
    if mode == "gmae":
        n_o, dec = n - mask_count(n, cfg.mask_ratio), cfg.dec_layers
    else:
        n_o, dec = n, 0
    stacks = [n_o] + ([n] if dec else [])
    logits = h * (cfg.enc_layers * n_o**2 + dec * n**2)
    attention = C_ATTN * logits + C_BIAS * h * sum(m * m for m in stacks)
    activations = c_act(cfg) * d * (cfg.enc_layers * n_o + dec * n) + C_IO * d * sum(stacks)
    feat = schema.num_node_classes * d if schema.categorical else (schema.node_attr_dim + 1) * d
    params = feat + cfg.enc_layers * _layer_params(d, cfg.ffn_mult) + _table_params(cfg, schema.num_edge_classes)
    if dec:
        out = schema.out_dim
        params += dec * _layer_params(d, cfg.ffn_mult) + _table_params(cfg, schema.num_edge_classes)
        params += d + d * out + out  # mask token and reconstruction head
    else:
        params += d + 1  # one-output task head
    return MemEstimate(n, mode, n_o, logits, attention, activations, params, cfg.to_dict())


def random_graph(n: int, seed: int, avg_degree: float = 4.0, num_labels: int = 4) -> Graph:
    """Erdos-Renyi graph with edge probability ``avg_degree / n`` and random node labels."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < min(1.0, avg_degree / n)
    return make_graph(n, np.stack([iu[keep], ju[keep]], axis=1), node_labels=rng.integers(0, num_labels, n))


def _full_step(g, enc, params) -> None:
    head = T.Tensor(np.full((params.cfg.hidden, 1), 0.02), requires_grad=True)
    head_b = T.Tensor(np.zeros(1), requires_grad=True)
    named = [*params.encoder_named().values(), head, head_b]
    T.zero_grad(named)
    with T.Tape() as tape:
        _, pooled, _ = embed_batch(params, [g], [enc])
        loss = T.loss_l1(T.add(T.matmul(pooled, head), head_b), np.zeros((1, 1)))
    T.backward(tape, loss, params=named)


def measure_peak_floats(n: int, cfg: GmaeConfig, mode: str = "gmae", seed: int = 0) -> int:
    """Peak live floats of one forward+backward step on a seeded random graph."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not T.memory_tracking_enabled():
        raise StateError("memory tracking is disabled; enable it with tensor.set_memory_tracking(True)")
    g = random_graph(n, seed)
    enc = compute_encodings(g, cfg.max_spd)
    params = init_params(cfg, FeatureSchema(4, 0, 0), seed)
    rng = np.random.default_rng(seed)
    for p in params.named().values():
        p.grad = None
    with T.LiveFloatCounter() as counter:
        if mode == "gmae":
            pretrain_step(g, enc, params, rng)
        else:
            _full_step(g, enc, params)
    return counter.peak


def memory_profile(sizes, cfg: GmaeConfig, seed: int = 0) -> list[dict]:
    """Estimate and measurement for both modes at each size."""
    rows = []
    for n in sizes:
        for mode in MODES:
            est = estimate_peak_floats(n, cfg, mode).total
            rows.append({"n": n, "mode": mode, "estimated_floats": est, "measured_floats": measure_peak_floats(n, cfg, mode, seed)})
    return rows


def write_profile_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["n", "mode", "estimated_floats", "measured_floats"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def attention_ratio(n: int, cfg: GmaeConfig) -> float:
    """Attention-logit count of a masked step over that of a full encoder-only step."""
    return estimate_peak_floats(n, cfg, "gmae").attention_logits / estimate_peak_floats(n, cfg, "full").attention_logits
