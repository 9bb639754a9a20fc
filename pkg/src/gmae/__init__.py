"""Masked autoencoder pretraining for graph transformers, on a small numpy autodiff engine."""

from .graph import EncodedGraph, Graph, GraphDataset, compute_encodings, load_dataset, make_graph, split_kfold
from .model import FeatureSchema, GmaeConfig, MaskPlan, ModelParams, embed, init_params, pretrain_step, sample_mask
from .train import TrainConfig, finetune, lr_at, pretrain

__version__ = "0.1.0"

__all__ = [
    "EncodedGraph",
    "FeatureSchema",
    "GmaeConfig",
    "Graph",
    "GraphDataset",
    "MaskPlan",
    "ModelParams",
    "TrainConfig",
    "compute_encodings",
    "embed",
    "finetune",
    "init_params",
    "load_dataset",
    "lr_at",
    "make_graph",
    "pretrain",
    "pretrain_step",
    "sample_mask",
    "split_kfold",
]
