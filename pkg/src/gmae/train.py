"""Pretraining loop, learning-rate schedule, early stopping and fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError
from .graph import CLASSIFICATION, REGRESSION, GraphDataset
from .layers import trunc_normal
from .model import (
    FeatureSchema,
    GmaeConfig,
    ModelParams,
    decays,
    embed_batch,
    init_params,
    pretrain_loss,
    sample_mask,
    set_arrays,
)
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    end_lr: float = 1e-9
    warmup_steps: int = 40000
    total_steps: int | None = None  # None: max_epochs * batches per epoch
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 50
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    min_rel_improvement: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.end_lr <= self.peak_lr:
            raise ConfigError(f"need 0 < end_lr <= peak_lr, got end_lr={self.end_lr} peak_lr={self.peak_lr}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.total_steps is not None and self.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must be < total_steps={self.total_steps}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be >= 1")

    def resolved(self, num_graphs: int) -> "TrainConfig":
        """A copy with ``total_steps`` filled in for a dataset of this size."""
        if self.total_steps is not None:
            return self
        total = self.max_epochs * math.ceil(num_graphs / self.batch_size)
        return TrainConfig(**{**asdict(self), "total_steps": max(total, self.warmup_steps + 1)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, linear decay to ``end_lr`` at ``total_steps``, then flat."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.total_steps is None:
        raise ConfigError("lr_at needs total_steps; call TrainConfig.resolved first")
    w, total = cfg.warmup_steps, cfg.total_steps
    if step < w:
        return cfg.peak_lr * (step + 1) / w
    if step <= total:
        frac = (step - w) / (total - w)
        return cfg.peak_lr + frac * (cfg.end_lr - cfg.peak_lr)
    return cfg.end_lr


class EarlyStopping:
    """Stop once the best epoch loss is ``patience`` epochs old.

    An epoch counts as an improvement only if it beats the best loss by at
    least ``min_rel`` relative.
    """

    def __init__(self, patience: int, min_rel: float = 1e-6):
        self.patience = patience
        self.min_rel = min_rel
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch's loss; True if it is a new best."""
        if loss < self.best - self.min_rel * abs(self.best) or self.best_epoch < 0:
            self.best, self.best_epoch = loss, epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return self.best_epoch >= 0 and epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# pretraining


class Pretrainer:
    """Owns the parameters, optimizer and rng of one pretraining run.

    The run is resumable at epoch boundaries through :meth:`checkpoint` and
    :meth:`from_checkpoint`; a resumed run replays the remaining epochs
    exactly as an uninterrupted one would.
    """

    def __init__(self, dataset: GraphDataset, gmae_cfg: GmaeConfig, train_cfg: TrainConfig, params: ModelParams | None = None):
        if len(dataset) == 0:
            raise DataError("cannot pretrain on an empty dataset")
        keep = [i for i, g in enumerate(dataset.graphs) if g.num_nodes >= 2]
        if len(keep) < len(dataset):
            log.warning("skipping %d graph(s) with fewer than 2 nodes (nothing to mask)", len(dataset) - len(keep))
        if not keep:
            raise DataError("no graph with at least 2 nodes to pretrain on")
        self.gmae_cfg = gmae_cfg
        self.cfg = train_cfg.resolved(len(keep))
        self.graphs = [dataset.graphs[i] for i in keep]
        self.encs = [dataset.encodings(gmae_cfg.max_spd)[i] for i in keep]
        self.schema = FeatureSchema.of(dataset)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.params = params if params is not None else init_params(gmae_cfg, self.schema, self.rng)
        self.opt = OptimizerState.create(self.params.named(), self.cfg.weight_decay, decays)
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.stopper = EarlyStopping(self.cfg.early_stop_patience, self.cfg.min_rel_improvement)
        self.best_params = self.params.copy()
        self.done = False

    def train_batch(self, idx) -> float:
        graphs = [self.graphs[i] for i in idx]
        encs = [self.encs[i] for i in idx]
        plans = [sample_mask(g.num_nodes, self.gmae_cfg.mask_ratio, self.rng) for g in graphs]
        named = self.params.named()
        T.zero_grad(named.values())
        drop_rng = self.rng if self.gmae_cfg.dropout else None
        with T.Tape() as tape:
            loss = pretrain_loss(self.params, graphs, encs, plans, drop_rng)
        T.backward(tape, loss, params=named.values())
        del tape
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {self.step}")
        if self.cfg.clip_norm:
            clip_grad_norm(named.values(), self.cfg.clip_norm)
        adamw_step(named, self.opt, lr_at(self.step, self.cfg))
        self.step += 1
        return value

    def run_epoch(self) -> dict:
        order = self.rng.permutation(len(self.graphs))
        losses = []
        for start in range(0, len(order), self.cfg.batch_size):
            if self.step >= self.cfg.total_steps:
                break
            losses.append(self.train_batch(order[start : start + self.cfg.batch_size]))
        rec = {"epoch": self.epoch, "step": self.step, "loss": float(np.mean(losses)), "lr": lr_at(self.step, self.cfg)}
        self.history.append(rec)
        if self.stopper.update(self.epoch, rec["loss"]):
            self.best_params = self.params.copy()
        stop = self.stopper.should_stop(self.epoch)
        self.epoch += 1
        if stop:
            log.info("early stop at epoch %d (best %d)", rec["epoch"], self.stopper.best_epoch)
        self.done = stop or self.epoch >= self.cfg.max_epochs or self.step >= self.cfg.total_steps
        return rec

    def run(self, until_epoch: int | None = None, on_epoch: Callable[[dict], None] | None = None):
        """Train until done (or until ``until_epoch`` epochs have run); returns (best params, history)."""
        while not self.done and (until_epoch is None or self.epoch < until_epoch):
            rec = self.run_epoch()
            log.debug("epoch %d step %d loss %.6f", rec["epoch"], rec["step"], rec["loss"])
            if on_epoch is not None:
                on_epoch(rec)
        return self.best_params, list(self.history)

    # -- persistence

    def checkpoint(self) -> Checkpoint:
        meta = {
            "kind": "pretrain",
            "gmae": self.gmae_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "schema": asdict(self.schema),
            "step": self.step,
            "epoch": self.epoch,
            "done": self.done,
            "opt_step": self.opt.step,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
            "best_loss": None if self.stopper.best_epoch < 0 else self.stopper.best,
            "best_epoch": self.stopper.best_epoch,
        }
        tensors = {}
        for k, p in self.params.named().items():
            tensors["param/" + k] = p.data
        for k, p in self.best_params.named().items():
            tensors["best/" + k] = p.data
        for k in self.opt.m:
            tensors["adam_m/" + k] = self.opt.m[k]
            tensors["adam_v/" + k] = self.opt.v[k]
        return Checkpoint(meta, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: GraphDataset) -> "Pretrainer":
        meta = ckpt.meta
        if meta.get("kind") != "pretrain":
            raise ConfigError(f"checkpoint kind {meta.get('kind')!r} is not a pretraining checkpoint")
        gcfg = GmaeConfig.from_dict(meta["gmae"])
        tcfg = TrainConfig.from_dict(meta["train"])
        self = cls(dataset, gcfg, tcfg)
        if asdict(self.schema) != meta["schema"]:
            raise ConfigError(f"dataset schema {asdict(self.schema)} does not match checkpoint {meta['schema']}")
        set_arrays(self.params, ckpt.group("param"))
        set_arrays(self.best_params, ckpt.group("best"))
        m, v = ckpt.group("adam_m"), ckpt.group("adam_v")
        for k in self.opt.m:
            self.opt.m[k][...] = m[k]
            self.opt.v[k][...] = v[k]
        self.opt.step = meta["opt_step"]
        self.step, self.epoch, self.done = meta["step"], meta["epoch"], meta["done"]
        self.rng.bit_generator.state = meta["rng"]
        self.history = [dict(r) for r in meta["history"]]
        if meta["best_epoch"] >= 0:
            self.stopper.best, self.stopper.best_epoch = meta["best_loss"], meta["best_epoch"]
        return self


def pretrain(dataset: GraphDataset, gmae_cfg: GmaeConfig, train_cfg: TrainConfig, on_epoch=None):
    """Pretrain from scratch; returns (best-loss params, per-epoch history)."""
    return Pretrainer(dataset, gmae_cfg, train_cfg).run(on_epoch=on_epoch)


def params_from_checkpoint(ckpt: Checkpoint, which: str = "best") -> ModelParams:
    """Rebuild model parameters stored in a pretraining or fine-tuning checkpoint."""
    meta = ckpt.meta
    cfg = GmaeConfig.from_dict(meta["gmae"])
    schema = FeatureSchema(**meta["schema"])
    params = init_params(cfg, schema, 0)
    group = ckpt.group(which) or ckpt.group("param")
    if meta.get("kind") == "finetune":
        # decoder weights are not kept after fine-tuning; leave them at init
        group = {**{k: p.data for k, p in params.decoder_named().items()}, **group}
    return set_arrays(params, group)


def write_history_csv(path, history: list[dict]) -> None:
    if not history:
        raise ValueError("empty history")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(history[0])
        w.writerow(cols)
        for rec in history:
            w.writerow([format(rec[c], ".17g") if isinstance(rec[c], float) else rec[c] for c in cols])


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class TaskHead:
    """Linear layer on the pooled graph embedding."""

    kind: str
    w: Tensor
    b: Tensor

    @classmethod
    def for_dataset(cls, dataset: GraphDataset, d: int, rng: np.random.Generator, std: float = 0.02) -> "TaskHead":
        if dataset.target_kind == REGRESSION:
            out = 1
        elif dataset.target_kind == CLASSIFICATION:
            out = dataset.num_classes
        else:
            raise ConfigError(f"dataset {dataset.name!r} has no targets to fine-tune on")
        return cls(
            dataset.target_kind,
            Tensor(trunc_normal(rng, (d, out), std), requires_grad=True, name="head.w"),
            Tensor(np.zeros(out), requires_grad=True, name="head.b"),
        )

    def named(self) -> dict[str, Tensor]:
        return {"head.w": self.w, "head.b": self.b}

    def __call__(self, pooled: Tensor) -> Tensor:
        return T.add(T.matmul(pooled, self.w), self.b)


def head_loss(head: TaskHead, out: Tensor, targets: np.ndarray) -> Tensor:
    if head.kind == REGRESSION:
        return T.loss_l1(out, np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    return T.loss_cross_entropy(out, targets)


def predict(params: ModelParams, head: TaskHead, dataset: GraphDataset, batch_size: int = 64) -> np.ndarray:
    """Regression values or class ids for every graph."""
    encs = dataset.encodings(params.cfg.max_spd)
    outs = []
    for s in range(0, len(dataset), batch_size):
        _, pooled, _ = embed_batch(params, dataset.graphs[s : s + batch_size], encs[s : s + batch_size])
        outs.append(head(pooled).data)
    out = np.concatenate(outs)
    return out[:, 0] if head.kind == REGRESSION else out.argmax(axis=1)


def task_metric(head: TaskHead, preds: np.ndarray, targets: np.ndarray) -> float:
    """MAE for regression, accuracy for classification."""
    if head.kind == REGRESSION:
        return float(np.mean(np.abs(preds - targets)))
    return float(np.mean(preds == targets))


def finetune(
    params: ModelParams,
    dataset: GraphDataset,
    head: TaskHead | None = None,
    epochs: int = 300,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    freeze_encoder: bool = False,
    val_dataset: GraphDataset | None = None,
    weight_decay: float = 0.01,
    on_epoch=None,
):
    """Train encoder (unless frozen) plus a linear head at a constant learning rate.

    Works on a copy of ``params``.  Returns ``(params, head, history)``; each
    history row holds the epoch mean loss and the train (and validation)
    metric after that epoch.
    """
    rng = np.random.default_rng(seed)
    params = params.copy()
    if head is None:
        head = TaskHead.for_dataset(dataset, params.cfg.hidden, rng)
    elif head.kind != dataset.target_kind:
        raise ConfigError(f"{head.kind} head cannot be trained on {dataset.target_kind} targets")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1")
    trainable = dict(head.named()) if freeze_encoder else {**params.encoder_named(), **head.named()}
    opt = OptimizerState.create(trainable, weight_decay, decays)
    encs = dataset.encodings(params.cfg.max_spd)
    targets = dataset.targets()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            T.zero_grad(trainable.values())
            with T.Tape() as tape:
                _, pooled, _ = embed_batch(params, [dataset.graphs[i] for i in idx], [encs[i] for i in idx])
                loss = head_loss(head, head(pooled), targets[idx])
            T.backward(tape, loss, params=trainable.values())
            del tape
            losses.append(float(loss.data))
            adamw_step(trainable, opt, lr)
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        rec["train_metric"] = task_metric(head, predict(params, head, dataset), targets)
        if val_dataset is not None:
            rec["val_metric"] = task_metric(head, predict(params, head, val_dataset), val_dataset.targets())
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, head, history


def finetune_checkpoint(params: ModelParams, head: TaskHead, history: list[dict]) -> Checkpoint:
    meta = {
        "kind": "finetune",
        "gmae": params.cfg.to_dict(),
        "schema": asdict(params.schema),
        "head_kind": head.kind,
        "history": history,
    }
    tensors = {"param/" + k: p.data for k, p in params.encoder_named().items()}
    tensors.update({k: p.data for k, p in head.named().items()})
    return Checkpoint(meta, tensors)


__all__ = [
    "EarlyStopping",
    "Pretrainer",
    "TaskHead",
    "TrainConfig",
    "finetune",
    "finetune_checkpoint",
    "load_checkpoint",
    "lr_at",
    "params_from_checkpoint",
    "predict",
    "pretrain",
    "save_checkpoint",
    "write_history_csv",
]
