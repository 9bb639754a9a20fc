import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmae.errors import DataError, FormatError, IntegrityError, ParseError
from gmae.graph import (
    CLASSIFICATION,
    REGRESSION,
    UNREACHABLE,
    compute_encodings,
    make_graph,
    parse_jsonl_graphs,
    parse_tu_dataset,
    split_kfold,
    write_jsonl,
)

from toys import MUTAG_DIR, er_graph, floyd_warshall


@st.composite
def graphs(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = [p for p, keep in zip(pairs, mask) if keep]
    edges = draw(st.permutations(edges))
    labels = draw(st.lists(st.integers(0, 3), min_size=len(edges), max_size=len(edges)))
    return make_graph(n, edges, node_labels=[0] * n, edge_labels=labels)


def write_tu(tmp_path, name, files):
    for suffix, lines in files.items():
        (tmp_path / f"{name}_{suffix}.txt").write_text("\n".join(lines) + "\n")
    return tmp_path


# -- construction


def test_make_graph_drops_loops_and_duplicates():
    g = make_graph(3, [(0, 1), (1, 0), (1, 1), (2, 1)], edge_labels=[5, 6, 7, 8])
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    assert g.edge_labels.tolist() == [5, 8]


def test_make_graph_rejects_out_of_range():
    with pytest.raises(DataError):
        make_graph(3, [(0, 3)])


def test_graph_arrays_are_read_only():
    g = make_graph(2, [(0, 1)])
    with pytest.raises(ValueError):
        g.edges[0, 0] = 1


# -- encodings


def test_path_graph_encoding():
    enc = compute_encodings(make_graph(3, [(0, 1), (1, 2)]))
    assert enc.spd[0, 2] == 2
    assert enc.path(0, 2) == (0, 1)
    assert enc.path(2, 0) == (1, 0)
    assert enc.path(1, 1) == ()
    assert enc.degrees.tolist() == [1, 2, 1]


def test_disconnected_pair_is_unreachable():
    enc = compute_encodings(make_graph(2, []))
    assert enc.spd[0, 1] == UNREACHABLE
    assert enc.path(0, 1) is None
    assert enc.spatial_index()[0, 1] == enc.max_spd + 1


def test_long_paths_are_clamped():
    n = 30
    enc = compute_encodings(make_graph(n, [(i, i + 1) for i in range(n - 1)]), max_spd=20)
    assert enc.spd[0, n - 1] == 20
    assert len(enc.path(0, n - 1)) == 20
    assert enc.spd[0, 20] == 20 and enc.spd[0, 19] == 19


def test_tie_breaking_prefers_lowest_neighbour():
    # square 0-1-3, 0-2-3: both are shortest; BFS from 0 reaches 3 through 1
    g = make_graph(4, [(0, 1), (0, 2), (1, 3), (2, 3)])
    enc = compute_encodings(g)
    assert enc.path(0, 3) == (0, 2)


def test_bfs_matches_floyd_warshall_on_random_graphs():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        g = er_graph(int(rng.integers(1, 13)), 0.3, seed)
        fw = floyd_warshall(g.num_nodes, g.edges.tolist())
        enc = compute_encodings(g)
        expect = np.where(np.isinf(fw), UNREACHABLE, fw).astype(int)
        assert np.array_equal(enc.spd, expect), seed


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_encoding_invariants(g):
    enc = compute_encodings(g)
    spd, n = enc.spd, g.num_nodes
    assert np.array_equal(spd, spd.T)
    assert (np.diag(spd) == 0).all()
    adj = np.zeros((n, n), bool)
    for u, v in g.edges:
        adj[u, v] = adj[v, u] = True
    assert np.array_equal(spd == 1, adj)
    assert enc.degrees.tolist() == adj.sum(1).tolist()
    reach = spd != UNREACHABLE
    for i in range(n):
        for j in range(n):
            if not reach[i, j]:
                continue
            path = enc.path(i, j)
            assert len(path) == spd[i, j]
            # the path walks from i to j along graph edges
            at = i
            for e in path:
                u, v = g.edges[e]
                assert at in (u, v)
                at = v if at == u else u
            assert at == j
            for k in range(n):
                if reach[i, k] and reach[k, j]:
                    assert spd[i, j] <= spd[i, k] + spd[k, j]


@settings(max_examples=30, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_encoding_ignores_edge_order(g, rnd):
    order = list(range(g.num_edges))
    rnd.shuffle(order)
    shuffled = make_graph(g.num_nodes, g.edges[order], edge_labels=g.edge_labels[order])
    a, b = compute_encodings(g), compute_encodings(shuffled)
    assert np.array_equal(a.spd, b.spd)
    assert np.array_equal(a.degrees, b.degrees)
    # same edge labels along each stored path
    for i in range(g.num_nodes):
        for j in range(g.num_nodes):
            pa, pb = a.path(i, j), b.path(i, j)
            if pa is not None:
                assert [g.edge_labels[e] for e in pa] == [shuffled.edge_labels[e] for e in pb]


# -- TU reader


def test_tu_fixture(tmp_path):
    d = write_tu(tmp_path, "T", {
        "A": ["1,2", "2,1", "2,3", "3,2", "1,3", "3,1", "4, 5", "5, 4"],
        "graph_indicator": ["1", "1", "1", "2", "2"],
        "graph_labels": ["1", "-1"],
        "node_labels": ["0", "1", "0", "0", "1"],
    })  # fmt: skip
    ds = parse_tu_dataset(d, "T")
    assert len(ds) == 2
    assert ds.num_node_classes == 2
    assert ds.target_kind == CLASSIFICATION
    assert ds.targets().tolist() == [1, 0]
    assert ds[0].num_edges == 3 and ds[1].edges.tolist() == [[0, 1]]


def test_tu_missing_file_names_it(tmp_path):
    d = write_tu(tmp_path, "T", {"A": ["1,2"], "graph_indicator": ["1", "1"]})
    with pytest.raises(FormatError, match="T_graph_labels.txt"):
        parse_tu_dataset(d, "T")


def test_tu_edge_across_graphs(tmp_path):
    d = write_tu(tmp_path, "T", {
        "A": ["1,2", "2,1", "2,3"],
        "graph_indicator": ["1", "1", "2"],
        "graph_labels": ["0", "1"],
    })  # fmt: skip
    with pytest.raises(IntegrityError, match=r"T_A.txt:3"):
        parse_tu_dataset(d, "T")


def test_tu_bad_token_has_line_number(tmp_path):
    d = write_tu(tmp_path, "T", {
        "A": ["1,2", "2,x"],
        "graph_indicator": ["1", "1"],
        "graph_labels": ["0"],
    })  # fmt: skip
    with pytest.raises(ParseError, match=r"T_A.txt:2"):
        parse_tu_dataset(d, "T")


def test_mutag_statistics():
    ds = parse_tu_dataset(MUTAG_DIR, "MUTAG")
    assert len(ds) == 188
    assert math.isclose(ds.mean_nodes(), 17.93, abs_tol=0.005)
    assert ds.num_node_classes == 7
    assert ds.num_edge_classes == 4
    assert np.bincount(ds.targets()).tolist() == [63, 125]


# -- JSONL reader


def test_jsonl_record(tmp_path):
    p = tmp_path / "g.jsonl"
    p.write_text(json.dumps({"n": 3, "edges": [[0, 1], [1, 2]], "node_labels": [0, 0, 1], "target": 1}) + "\n")
    ds = parse_jsonl_graphs(p)
    assert ds[0].edges.tolist() == [[0, 1], [1, 2]]
    assert ds.target_kind == CLASSIFICATION
    assert ds[0].target == 0  # the only class present remaps to 0
    assert ds.num_classes == 1


def test_jsonl_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert len(parse_jsonl_graphs(p)) == 0


def test_jsonl_out_of_range_edge(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"n": 3, "edges": [[0, 3]]}) + "\n")
    with pytest.raises(ParseError, match="record 1"):
        parse_jsonl_graphs(p)


@st.composite
def jsonl_datasets(draw):
    regression = draw(st.booleans())
    recs = []
    for _ in range(draw(st.integers(1, 5))):
        n = draw(st.integers(1, 6))
        pairs = [[i, j] for i in range(n) for j in range(i + 1, n)]
        edges = draw(st.lists(st.sampled_from(pairs), unique_by=tuple, max_size=len(pairs))) if pairs else []
        rec = {"n": n, "edges": edges, "node_labels": draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))}
        rec["edge_labels"] = draw(st.lists(st.integers(0, 2), min_size=len(edges), max_size=len(edges)))
        if regression:
            rec["target"] = draw(st.floats(-1e6, 1e6, allow_nan=False).filter(lambda x: x != int(x)))
        else:
            rec["target"] = draw(st.integers(0, 2))
        recs.append(rec)
    return recs


@settings(max_examples=40, deadline=None)
@given(jsonl_datasets())
def test_jsonl_round_trip(tmp_path_factory, recs):
    d = tmp_path_factory.mktemp("rt")
    src = d / "a.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in recs))
    ds = parse_jsonl_graphs(src)
    write_jsonl(ds, d / "b.jsonl")
    again = parse_jsonl_graphs(d / "b.jsonl")
    assert again == ds
    assert again.target_kind in (CLASSIFICATION, REGRESSION)


# -- folds


def test_kfold_sizes():
    folds = split_kfold(10, 5, seed=0)
    assert [len(te) for _, te in folds] == [2] * 5
    sizes = sorted(len(te) for _, te in split_kfold(188, 10, seed=3))
    assert sizes == [18, 18] + [19] * 8


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000), st.data())
def test_kfold_partition(n, seed, data):
    k = data.draw(st.integers(2, n))
    folds = split_kfold(n, k, seed)
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(n))
    sizes = [len(te) for _, te in folds]
    assert max(sizes) - min(sizes) <= 1
    for tr, te in folds:
        assert not set(tr) & set(te) and len(tr) + len(te) == n
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(folds, split_kfold(n, k, seed)))


def test_kfold_errors():
    with pytest.raises(ValueError):
        split_kfold(5, 6, 0)
    with pytest.raises(ValueError):
        split_kfold(5, 1, 0)
