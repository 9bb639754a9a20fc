import itertools

import numpy as np
import pytest

from gmae.errors import DataError
from gmae.evaluate import (
    EmbeddingTable,
    embed_dataset,
    kfold_evaluate,
    mae_metric,
    majority_classifier,
    read_embeddings_csv,
    svm_classifier,
    svm_objective,
    train_svm_probe,
    write_embeddings_csv,
)
from gmae.graph import parse_tu_dataset
from gmae.model import FeatureSchema, GmaeConfig, embed, init_params

from toys import MUTAG_DIR, classification_set, er_graph, dataset_of


def blobs(n_per, centers, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    X = np.concatenate([c + spread * rng.standard_normal((n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


def table(X, y):
    return EmbeddingTable(X, y, np.arange(len(X)))


# -- probe


def test_separable_blobs_are_separated():
    X, y = blobs(30, [np.array([2.0, 2.0]), np.array([-2.0, -2.0])])
    probe = train_svm_probe(X, y, c_reg=1.0, seed=1)
    assert np.mean(probe.predict(X) == y) == 1.0


def test_three_classes_one_vs_rest():
    X, y = blobs(20, [np.array([3.0, 0.0]), np.array([-3.0, 0.0]), np.array([0.0, 4.0])], seed=2)
    probe = train_svm_probe(X, y + 5, c_reg=10.0, seed=0)
    assert probe.weights.shape == (3, 2)
    assert np.mean(probe.predict(X) == y + 5) == 1.0


def test_probe_trace_never_increases():
    X, y = blobs(25, [np.array([0.5, 0.0]), np.array([-0.5, 0.0])], spread=1.0)
    probe = train_svm_probe(X, y, c_reg=1.0, epochs=50)
    trace = probe.trace[0]
    assert len(trace) == 50
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_probe_reaches_grid_minimum():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((6, 2))
    y = np.array([1, 1, 1, 0, 0, 0])
    signs = np.where(y == 1, 1.0, -1.0)
    c = 1.0
    lam = 1.0 / (c * len(X))
    grid = np.linspace(-3, 3, 61)
    brute = min(svm_objective(np.array([a, b]), c0, X, signs, lam) for a, b, c0 in itertools.product(grid, grid, grid))
    probe = train_svm_probe(X, y, c_reg=c, epochs=3000, seed=0)
    got = svm_objective(probe.weights[0], probe.bias[0], X, signs, lam)
    assert got <= brute + 1e-2


def test_probe_needs_two_classes():
    with pytest.raises(ValueError):
        train_svm_probe(np.zeros((4, 2)), np.zeros(4, dtype=int))


# -- cross-validation


def test_zero_features_fall_back_to_majority():
    y = np.array([0] * 20 + [1] * 40)
    X = np.zeros((60, 3))
    svm = kfold_evaluate(table(X, y), k=5, repeats=2, seed=0)
    maj = kfold_evaluate(table(X, y), k=5, repeats=2, seed=0, classifier=majority_classifier)
    assert svm.mean == pytest.approx(maj.mean)
    assert maj.mean == pytest.approx(2 / 3, abs=0.02)


def test_mutag_majority_baseline():
    y = parse_tu_dataset(MUTAG_DIR, "MUTAG").targets()
    res = kfold_evaluate(table(np.zeros((len(y), 1)), y), k=10, repeats=5, seed=0, classifier=majority_classifier)
    assert res.mean == pytest.approx(125 / 188, abs=0.005)


def test_one_hot_labels_give_perfect_accuracy():
    y = np.random.default_rng(0).integers(0, 2, 50)
    X = np.eye(2)[y]
    res = kfold_evaluate(table(X, y), k=5, repeats=3, seed=1)
    assert res.mean == 1.0 and res.std == 0.0


def test_cv_is_deterministic_and_reports_population_std():
    X, y = blobs(15, [np.array([0.6, 0.0]), np.array([-0.6, 0.0])], spread=1.0)
    fit = svm_classifier(epochs=20)
    a = kfold_evaluate(table(X, y), k=5, repeats=4, seed=2, classifier=fit)
    b = kfold_evaluate(table(X, y), k=5, repeats=4, seed=2, classifier=fit)
    assert a == b
    assert len(a.repeat_scores) == 4
    assert a.std == pytest.approx(np.std(a.repeat_scores, ddof=0))


def test_cv_rejects_continuous_targets_and_tiny_sets():
    with pytest.raises(ValueError):
        kfold_evaluate(table(np.zeros((12, 2)), np.linspace(0, 1, 12)), k=3)
    with pytest.raises(ValueError):
        kfold_evaluate(table(np.zeros((4, 2)), np.array([0, 1, 0, 1])), k=10)


# -- MAE


def test_mae_metric():
    assert mae_metric([1.0, 2.0, 3.0], [1.0, 2.5, 2.0]) == pytest.approx(0.5)
    assert mae_metric([0.0], [0.0]) == 0.0
    with pytest.raises(ValueError):
        mae_metric([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae_metric([], [])


# -- embeddings and CSV


def test_embed_dataset_rows_are_independent_of_order():
    data = classification_set(8)
    params = init_params(GmaeConfig(enc_layers=1, dec_layers=1, hidden=16, heads=2), FeatureSchema.of(data), 0)
    tab = embed_dataset(data, params)
    assert tab.matrix.shape == (8, 16)
    assert tab.targets.tolist() == data.targets().tolist()
    rev = embed_dataset(data.subset(np.arange(8)[::-1]), params)
    assert np.array_equal(rev.matrix[::-1], tab.matrix)
    encs = data.encodings(params.cfg.max_spd)
    assert np.array_equal(tab.matrix[3], embed(data[3], encs[3], params)[1].data[0])


@pytest.mark.parametrize("targets", [np.array([0, 2, 1]), np.array([0.1, -3.25, 1e-300])])
def test_embeddings_csv_round_trip(tmp_path, targets):
    X = np.random.default_rng(0).standard_normal((3, 4)) * np.array([1, 1e-12, 1e12, 1])
    write_embeddings_csv(EmbeddingTable(X, targets, np.arange(3)), tmp_path / "e.csv")
    back = read_embeddings_csv(tmp_path / "e.csv")
    assert np.array_equal(back.matrix, X)
    assert np.array_equal(back.targets, targets) and back.targets.dtype.kind == targets.dtype.kind


def test_embeddings_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,y,e0\n0,1,0.5\n")
    with pytest.raises(DataError):
        read_embeddings_csv(tmp_path / "bad.csv")
    (tmp_path / "ragged.csv").write_text("graph_id,target,e0,e1\n0,1,0.5\n")
    with pytest.raises(DataError, match="ragged.csv:2"):
        read_embeddings_csv(tmp_path / "ragged.csv")
    with pytest.raises(DataError):
        EmbeddingTable(np.array([[np.nan]]), np.array([0]), np.array([0]))


def test_unlabelled_dataset_embeds_with_placeholder_targets():
    data = dataset_of([er_graph(5, 0.5, i) for i in range(3)])
    params = init_params(GmaeConfig(enc_layers=1, dec_layers=1, hidden=8, heads=2), FeatureSchema.of(data), 0)
    assert embed_dataset(data, params).targets.tolist() == [0, 0, 0]
