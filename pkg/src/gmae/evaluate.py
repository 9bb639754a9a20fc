"""Linear evaluation: frozen-encoder graph embeddings, an SVM probe, k-fold CV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import DataError
from .graph import REGRESSION, GraphDataset, split_kfold
from .model import ModelParams, embed

C_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # (num_graphs, d)
    targets: np.ndarray
    graph_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        self.graph_ids = np.asarray(self.graph_ids, dtype=np.int64)
        if self.matrix.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if not (len(self.matrix) == len(self.targets) == len(self.graph_ids)):
            raise DataError(
                f"row mismatch: {len(self.matrix)} embeddings, {len(self.targets)} targets, {len(self.graph_ids)} ids"
            )
        if not np.isfinite(self.matrix).all():
            raise DataError("embedding matrix contains non-finite entries")

    def __len__(self):
        return len(self.matrix)


def embed_dataset(dataset: GraphDataset, params: ModelParams, provenance: dict | None = None) -> EmbeddingTable:
    """One mean-pooled encoder embedding per graph, in dataset order.

    Graphs go through the encoder one at a time, so a row never depends on
    what else is in the dataset.
    """
    encs = dataset.encodings(params.cfg.max_spd)
    rows = [embed(g, e, params)[1].data[0] for g, e in zip(dataset.graphs, encs)]
    d = params.cfg.hidden
    matrix = np.stack(rows) if rows else np.zeros((0, d))
    targets = dataset.targets() if dataset.target_kind != "none" else np.zeros(len(dataset), dtype=np.int64)
    prov = {"dataset": dataset.name, **(provenance or {})}
    return EmbeddingTable(matrix, targets, np.arange(len(dataset)), prov)


def write_embeddings_csv(table: EmbeddingTable, path) -> None:
    d = table.matrix.shape[1]
    regression = np.issubdtype(table.targets.dtype, np.floating)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_id", "target"] + [f"e{i}" for i in range(d)])
        for gid, t, row in zip(table.graph_ids, table.targets, table.matrix):
            target = format(float(t), ".17g") if regression else int(t)
            w.writerow([int(gid), target] + [format(float(x), ".17g") for x in row])


def read_embeddings_csv(path) -> EmbeddingTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["graph_id", "target"]:
        raise DataError(f"{path}: expected header graph_id,target,e0..")
    width = len(rows[0])
    body = rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != width:
            raise DataError(f"{path}:{i}: expected {width} columns, got {len(r)}")
    try:
        ids = np.array([int(r[0]) for r in body], dtype=np.int64)
        raw_t = [r[1] for r in body]
        integral = all(t.lstrip("-").isdigit() for t in raw_t)
        targets = np.array([int(t) if integral else float(t) for t in raw_t])
        matrix = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64).reshape(len(body), width - 2)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    return EmbeddingTable(matrix, targets, ids, {"source": str(path)})


def mae_metric(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} targets")
    if len(p) == 0:
        raise ValueError("mae of empty sequences")
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------------------
# linear SVM probe


@dataclass
class ProbeModel:
    """One-vs-rest linear SVM.  Two-class problems use a single separator."""

    classes: np.ndarray
    weights: np.ndarray  # (K, d) with K = 1 for two classes
    bias: np.ndarray  # (K,)
    c_reg: float
    trace: list[list[float]]  # per separator: best objective after each epoch

    def scores(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, X) -> np.ndarray:
        s = self.scores(X)
        if len(self.classes) == 2:
            return self.classes[(s[:, 0] > 0).astype(int)]
        return self.classes[np.argmax(s, axis=1)]


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    """lam/2 (|w|^2 + b^2) + mean hinge loss; the bias is regularized like a constant feature."""
    margins = y * (X @ w + b)
    return 0.5 * lam * (w @ w + b * b) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def _pegasos(X, y, lam, epochs, batch, rng):
    """Mini-batch stochastic subgradient with an averaged iterate.

    The returned separator is the averaged iterate with the lowest objective
    seen at an epoch end, so the trace is non-increasing.
    """
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    radius = 1.0 / np.sqrt(lam)
    best, best_w, trace = np.inf, avg.copy(), []
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch):
            t += 1
            idx = perm[s : s + batch]
            eta = 1.0 / (lam * t)
            viol = idx[y[idx] * (Xb[idx] @ w) < 1.0]
            w *= 1.0 - eta * lam
            if len(viol):
                w += (eta / len(idx)) * (y[viol] @ Xb[viol])
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        obj = svm_objective(avg[:-1], avg[-1], X, y, lam)
        if obj < best:
            best, best_w = obj, avg.copy()
        trace.append(best)
    return best_w[:-1], best_w[-1], trace


def train_svm_probe(X, y, c_reg: float = 1.0, epochs: int = 100, seed: int = 0, batch: int = 16) -> ProbeModel:
    """Soft-margin linear SVM, ``lam = 1 / (c_reg * n)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes to train a probe, got {classes.tolist()}")
    if c_reg <= 0:
        raise ValueError(f"c_reg must be positive, got {c_reg}")
    rng = np.random.default_rng(seed)
    lam = 1.0 / (c_reg * len(X))
    targets = [classes[1]] if len(classes) == 2 else list(classes)
    ws, bs, traces = [], [], []
    for c in targets:
        w, b, trace = _pegasos(X, np.where(y == c, 1.0, -1.0), lam, epochs, batch, rng)
        ws.append(w)
        bs.append(b)
        traces.append(trace)
    return ProbeModel(classes, np.array(ws), np.array(bs), c_reg, traces)


# ---------------------------------------------------------------------------
# cross-validation


class Classifier(Protocol):
    def __call__(self, X_train: np.ndarray, y_train: np.ndarray, seed: int) -> Callable[[np.ndarray], np.ndarray]: ...


def majority_classifier(X_train, y_train, seed):
    values, counts = np.unique(y_train, return_counts=True)
    top = values[np.argmax(counts)]
    return lambda X: np.full(len(X), top)


def _standardize(X_train):
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return lambda X: (X - mu) / sd


def svm_classifier(c_grid=C_GRID, epochs: int = 100, inner_folds: int = 3) -> Classifier:
    """Standardize on the training rows, pick C by inner k-fold accuracy, refit on all rows."""

    def fit(X_train, y_train, seed):
        scale = _standardize(X_train)
        Z = scale(X_train)
        if len(c_grid) == 1:
            best_c = c_grid[0]
        else:
            acc = np.zeros(len(c_grid))
            for tr, te in split_kfold(len(Z), min(inner_folds, len(Z)), seed):
                if len(np.unique(y_train[tr])) < 2:
                    continue
                for j, c in enumerate(c_grid):
                    probe = train_svm_probe(Z[tr], y_train[tr], c, epochs, seed)
                    acc[j] += np.mean(probe.predict(Z[te]) == y_train[te])
            best_c = c_grid[int(np.argmax(acc))]
        probe = train_svm_probe(Z, y_train, best_c, epochs, seed)
        return lambda X: probe.predict(scale(X))

    return fit


@dataclass
class CvResult:
    mean: float
    std: float
    repeat_scores: list[float]


def kfold_evaluate(
    emb: EmbeddingTable,
    k: int = 10,
    repeats: int = 5,
    seed: int = 0,
    classifier: Classifier | None = None,
) -> CvResult:
    """Repeated k-fold accuracy; repeat ``r`` splits with seed ``seed + r``.

    Each repeat's score is the mean fold accuracy; the result reports the
    mean and population std over repeats.
    """
    if len(emb) < k:
        raise ValueError(f"dataset of {len(emb)} graphs is smaller than k={k}")
    if np.issubdtype(emb.targets.dtype, np.floating):
        raise ValueError("k-fold accuracy needs class labels, got continuous targets")
    fit = classifier or svm_classifier()
    X, y = emb.matrix, emb.targets
    scores = []
    for r in range(repeats):
        accs = []
        for fold, (tr, te) in enumerate(split_kfold(len(emb), k, seed + r)):
            predict = fit(X[tr], y[tr], seed + 1000 * r + fold)
            accs.append(float(np.mean(predict(X[te]) == y[te])))
        scores.append(float(np.mean(accs)))
    return CvResult(float(np.mean(scores)), float(np.std(scores)), scores)


def is_regression(table_or_dataset) -> bool:
    if isinstance(table_or_dataset, GraphDataset):
        return table_or_dataset.target_kind == REGRESSION
    return np.issubdtype(table_or_dataset.targets.dtype, np.floating)
