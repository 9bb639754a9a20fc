"""Graph data model, dataset readers and structural precomputation.

Graphs are undirected and unweighted.  Node ids are 0-based and contiguous
within each graph.  ``compute_encodings`` runs one BFS per node and stores
hop distances plus one shortest path per reachable ordered pair; those feed
the centrality, spatial and edge encodings of the transformer.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, IntegrityError, ParseError

log = logging.getLogger(__name__)

#: Sentinel stored in ``EncodedGraph.spd`` for disconnected pairs.
UNREACHABLE = -1

CLASSIFICATION = "classification"
REGRESSION = "regression"
NO_TARGET = "none"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """One undirected graph.

    ``edges`` is an ``(E, 2)`` integer array with ``u < v`` per row and no
    duplicates.  Build graphs from raw (possibly messy) edge lists with
    :func:`make_graph`, which normalizes before construction.
    """

    num_nodes: int
    edges: np.ndarray
    node_labels: np.ndarray | None = None
    node_attrs: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    target: int | float | None = None

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise DataError(f"graph must have at least one node, got {n}")
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise DataError(f"edges must have shape (E, 2), got {e.shape}")
        if len(e):
            if e.min() < 0 or e.max() >= n:
                raise DataError(f"edge endpoint out of range for {n} nodes")
            if np.any(e[:, 0] >= e[:, 1]):
                raise DataError("edges must be stored as (u, v) with u < v")
            if len(np.unique(e[:, 0] * n + e[:, 1])) != len(e):
                raise DataError("duplicate edges")
        if self.node_labels is not None and self.node_labels.shape != (n,):
            raise DataError("node_labels must have one entry per node")
        if self.node_attrs is not None and (self.node_attrs.ndim != 2 or len(self.node_attrs) != n):
            raise DataError("node_attrs must have shape (num_nodes, d_V)")
        if self.edge_labels is not None and self.edge_labels.shape != (len(e),):
            raise DataError("edge_labels must have one entry per edge")
        for name in ("edges", "node_labels", "node_attrs", "edge_labels"):
            a = getattr(self, name)
            if a is not None:
                _frozen(a)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.num_nodes == other.num_nodes
            and same(self.edges, other.edges)
            and same(self.node_labels, other.node_labels)
            and same(self.node_attrs, other.node_attrs)
            and same(self.edge_labels, other.edge_labels)
            and self.target == other.target
            and type(self.target) is type(other.target)
        )

    __hash__ = None

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the isomorphic graph where old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.num_nodes)):
            raise DataError("perm must be a permutation of the node ids")
        inv = np.argsort(perm)
        return make_graph(
            self.num_nodes,
            perm[self.edges] if len(self.edges) else self.edges,
            node_labels=None if self.node_labels is None else self.node_labels[inv],
            node_attrs=None if self.node_attrs is None else self.node_attrs[inv],
            edge_labels=self.edge_labels,
            target=self.target,
        )


def make_graph(
    num_nodes: int,
    edges: Iterable[Sequence[int]],
    node_labels=None,
    node_attrs=None,
    edge_labels=None,
    target=None,
) -> Graph:
    """Normalize a raw edge list and build a :class:`Graph`.

    Self-loops and repeated undirected edges are dropped (the first
    occurrence and its label win).  Endpoints out of range raise.
    """
    edges = [tuple(int(x) for x in e) for e in edges]
    labels = None if edge_labels is None else [int(x) for x in edge_labels]
    if labels is not None and len(labels) != len(edges):
        raise DataError(f"{len(labels)} edge labels for {len(edges)} edges")
    kept, kept_labels, seen = [], [], set()
    loops = dups = 0
    for k, (u, v) in enumerate(edges):
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise DataError(f"edge ({u}, {v}) out of range for {num_nodes} nodes")
        if u == v:
            loops += 1
            continue
        key = (min(u, v), max(u, v))
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        kept.append(key)
        if labels is not None:
            kept_labels.append(labels[k])
    if loops or dups:
        log.debug("dropped %d self-loops and %d duplicate edges", loops, dups)
    return Graph(
        num_nodes=int(num_nodes),
        edges=np.array(kept, dtype=np.int64).reshape(-1, 2),
        node_labels=None if node_labels is None else np.asarray(node_labels, dtype=np.int64),
        node_attrs=None if node_attrs is None else np.asarray(node_attrs, dtype=np.float64).reshape(num_nodes, -1),
        edge_labels=None if labels is None else np.array(kept_labels, dtype=np.int64),
        target=target,
    )


@dataclass(frozen=True, eq=False)
class EncodedGraph:
    """Structural precomputation for one graph.

    Paths are stored in CSR form: the path for the ordered pair ``(i, j)``
    is ``path_edges[path_ptr[i*n + j]:path_ptr[i*n + j + 1]]``, a sequence
    of edge indices walking from ``i`` to ``j``.
    """

    degrees: np.ndarray
    spd: np.ndarray
    path_ptr: np.ndarray
    path_edges: np.ndarray
    max_spd: int
    edge_labels: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.degrees)

    def path(self, i: int, j: int) -> tuple[int, ...] | None:
        if self.spd[i, j] == UNREACHABLE:
            return None
        k = i * self.num_nodes + j
        return tuple(int(e) for e in self.path_edges[self.path_ptr[k]:self.path_ptr[k + 1]])

    def spatial_index(self) -> np.ndarray:
        """Distances as table indices, with UNREACHABLE mapped to ``max_spd + 1``."""
        return np.where(self.spd == UNREACHABLE, self.max_spd + 1, self.spd)


def compute_encodings(g: Graph, max_spd: int = 20) -> EncodedGraph:
    n = g.num_nodes
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (u, v) in enumerate(g.edges.tolist()):
        adj[u].append((v, k))
        adj[v].append((u, k))
    for nbrs in adj:
        nbrs.sort()
    degrees = np.array([len(a) for a in adj], dtype=np.int64)

    spd = np.full((n, n), UNREACHABLE, dtype=np.int64)
    pair_paths: list[tuple[int, ...]] = [()] * (n * n)
    for s in range(n):
        paths = {s: ()}
        spd[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if v not in paths:
                    paths[v] = paths[u] + (k,)
                    spd[s, v] = min(len(paths[v]), max_spd)
                    queue.append(v)
        for t, p in paths.items():
            pair_paths[s * n + t] = p[:max_spd]

    lengths = np.fromiter((len(p) for p in pair_paths), dtype=np.int64, count=n * n)
    ptr = np.zeros(n * n + 1, dtype=np.int64)
    np.cumsum(lengths, out=ptr[1:])
    flat = np.fromiter((e for p in pair_paths for e in p), dtype=np.int64, count=int(ptr[-1]))
    return EncodedGraph(
        degrees=_frozen(degrees),
        spd=_frozen(spd),
        path_ptr=_frozen(ptr),
        path_edges=_frozen(flat),
        max_spd=max_spd,
        edge_labels=g.edge_labels,
    )


@dataclass(eq=False)
class GraphDataset:
    graphs: list[Graph]
    num_node_classes: int = 0
    node_attr_dim: int = 0
    num_edge_classes: int = 0
    target_kind: str = NO_TARGET
    num_classes: int = 0
    name: str = ""
    _encodings: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    def __eq__(self, other):
        if not isinstance(other, GraphDataset):
            return NotImplemented
        return (
            self.graphs == other.graphs
            and self.num_node_classes == other.num_node_classes
            and self.node_attr_dim == other.node_attr_dim
            and self.num_edge_classes == other.num_edge_classes
            and self.target_kind == other.target_kind
            and self.num_classes == other.num_classes
        )

    @property
    def categorical(self) -> bool:
        """True when node features are label ids rather than float vectors."""
        return self.node_attr_dim == 0

    def targets(self) -> np.ndarray:
        dtype = np.float64 if self.target_kind == REGRESSION else np.int64
        return np.array([g.target for g in self.graphs], dtype=dtype)

    def encodings(self, max_spd: int = 20) -> list[EncodedGraph]:
        """Encodings for every graph, computed once per ``max_spd`` and cached."""
        if max_spd not in self._encodings:
            self._encodings[max_spd] = [compute_encodings(g, max_spd) for g in self.graphs]
        return self._encodings[max_spd]

    def subset(self, indices: Sequence[int]) -> "GraphDataset":
        out = GraphDataset(
            [self.graphs[i] for i in indices],
            self.num_node_classes,
            self.node_attr_dim,
            self.num_edge_classes,
            self.target_kind,
            self.num_classes,
            self.name,
        )
        for key, encs in self._encodings.items():
            out._encodings[key] = [encs[i] for i in indices]
        return out

    def mean_nodes(self) -> float:
        return float(np.mean([g.num_nodes for g in self.graphs])) if self.graphs else 0.0


def _remap(values: Iterable[int]) -> dict[int, int]:
    return {v: k for k, v in enumerate(sorted(set(values)))}


def _finish_dataset(raw: list[dict], name: str) -> GraphDataset:
    """Shared normalization for both readers: label remaps and schema checks.

    ``raw`` holds dicts with keys n, edges, node_labels, node_attrs,
    edge_labels, target (missing values as None).
    """
    has_labels = {r["node_labels"] is not None for r in raw}
    has_attrs = {r["node_attrs"] is not None for r in raw}
    has_edge_labels = {r["edge_labels"] is not None for r in raw}
    has_target = {r["target"] is not None for r in raw}
    for flags, what in (
        (has_labels, "node_labels"),
        (has_attrs, "node_attrs"),
        (has_edge_labels, "edge_labels"),
        (has_target, "target"),
    ):
        if len(flags) > 1:
            raise IntegrityError(f"{what} present for some graphs but not others")
    use_labels = raw and raw[0]["node_labels"] is not None
    use_attrs = raw and raw[0]["node_attrs"] is not None and not use_labels
    if raw and not use_labels and not use_attrs:
        log.warning("dataset %r has no node features; using a constant label", name)
        for r in raw:
            r["node_labels"] = [0] * r["n"]
        use_labels = True

    node_map = _remap(x for r in raw for x in r["node_labels"]) if use_labels else {}
    edge_map = (
        _remap(x for r in raw for x in r["edge_labels"]) if raw and raw[0]["edge_labels"] is not None else {}
    )
    attr_dim = 0
    if use_attrs:
        dims = {len(row) for r in raw for row in r["node_attrs"]}
        if len(dims) != 1:
            raise IntegrityError(f"inconsistent node attribute dimensions {sorted(dims)}")
        attr_dim = dims.pop()

    target_kind, num_classes, target_map = NO_TARGET, 0, None
    if raw and raw[0]["target"] is not None:
        ts = [r["target"] for r in raw]
        if all(isinstance(t, (int, np.integer)) for t in ts):
            target_kind = CLASSIFICATION
            target_map = _remap(ts)
            num_classes = len(target_map)
        else:
            target_kind = REGRESSION

    graphs = []
    for r in raw:
        t = r["target"]
        if target_kind == CLASSIFICATION:
            t = target_map[t]
        elif target_kind == REGRESSION:
            t = float(t)
        graphs.append(
            make_graph(
                r["n"],
                r["edges"],
                node_labels=[node_map[x] for x in r["node_labels"]] if use_labels else None,
                node_attrs=r["node_attrs"] if use_attrs else None,
                edge_labels=[edge_map[x] for x in r["edge_labels"]] if edge_map else None,
                target=t,
            )
        )
    return GraphDataset(
        graphs,
        num_node_classes=len(node_map),
        node_attr_dim=attr_dim,
        num_edge_classes=len(edge_map),
        target_kind=target_kind,
        num_classes=num_classes,
        name=name,
    )


def _read_lines(path: Path, parse, ncols=None):
    """Parse a comma-separated text file, one record per non-blank line.

    Returns ``(line_number, values)`` tuples.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            try:
                values = [parse(t) for t in tokens]
            except ValueError:
                raise ParseError(f"{path.name}:{lineno}: cannot parse {line!r}") from None
            if ncols is not None and len(values) != ncols:
                raise ParseError(f"{path.name}:{lineno}: expected {ncols} values, got {len(values)}")
            out.append((lineno, values))
    return out


def parse_tu_dataset(directory, name: str) -> GraphDataset:
    """Read a dataset in the TU Dortmund multi-file text format."""
    directory = Path(directory)

    def f(suffix):
        return directory / f"{name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not f(suffix).is_file():
            raise FormatError(f"missing required file {f(suffix).name} in {directory}")

    indicator = [v[0] for _, v in _read_lines(f("graph_indicator"), int, 1)]
    graph_labels = [v[0] for _, v in _read_lines(f("graph_labels"), int, 1)]
    graph_ids = sorted(set(indicator))
    if len(graph_ids) != len(graph_labels):
        raise IntegrityError(
            f"{len(graph_ids)} graphs in indicator but {len(graph_labels)} graph labels"
        )
    gindex = {gid: k for k, gid in enumerate(graph_ids)}
    members: list[list[int]] = [[] for _ in graph_ids]
    local = [0] * len(indicator)
    for node, gid in enumerate(indicator):
        g = gindex[gid]
        local[node] = len(members[g])
        members[g].append(node)

    node_labels = None
    if f("node_labels").is_file():
        node_labels = [v[0] for _, v in _read_lines(f("node_labels"), int, 1)]
        if len(node_labels) != len(indicator):
            raise IntegrityError(f"{len(node_labels)} node labels for {len(indicator)} nodes")
    node_attrs = None
    if f("node_attributes").is_file():
        node_attrs = [v for _, v in _read_lines(f("node_attributes"), float)]
        if len(node_attrs) != len(indicator):
            raise IntegrityError(f"{len(node_attrs)} node attribute rows for {len(indicator)} nodes")

    edge_rows = _read_lines(f("A"), int, 2)
    edge_labels = None
    if f("edge_labels").is_file():
        edge_labels = [v[0] for _, v in _read_lines(f("edge_labels"), int, 1)]
        if len(edge_labels) != len(edge_rows):
            raise IntegrityError(f"{len(edge_labels)} edge labels for {len(edge_rows)} edges")

    edges: list[list[tuple[int, int]]] = [[] for _ in graph_ids]
    elabels: list[list[int]] = [[] for _ in graph_ids]
    for k, (lineno, (u, v)) in enumerate(edge_rows):
        u, v = u - 1, v - 1
        if not (0 <= u < len(indicator) and 0 <= v < len(indicator)):
            raise IntegrityError(f"{f('A').name}:{lineno}: node id out of range")
        if indicator[u] != indicator[v]:
            raise IntegrityError(
                f"{f('A').name}:{lineno}: edge ({u + 1}, {v + 1}) joins graphs "
                f"{indicator[u]} and {indicator[v]}"
            )
        g = gindex[indicator[u]]
        edges[g].append((local[u], local[v]))
        if edge_labels is not None:
            elabels[g].append(edge_labels[k])

    raw = []
    for g, nodes in enumerate(members):
        raw.append(
            dict(
                n=len(nodes),
                edges=edges[g],
                node_labels=None if node_labels is None else [node_labels[i] for i in nodes],
                node_attrs=None if node_attrs is None else [node_attrs[i] for i in nodes],
                edge_labels=None if edge_labels is None else elabels[g],
                target=graph_labels[g],
            )
        )
    return _finish_dataset(raw, name)


_JSONL_KEYS = {"n", "edges", "node_labels", "node_attrs", "edge_labels", "target"}


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (_is_int(x) or isinstance(x, float)) and math.isfinite(x)


def _check_record(rec, k: int) -> dict:
    def bad(msg):
        return ParseError(f"record {k}: {msg}")

    if not isinstance(rec, dict):
        raise bad("expected a JSON object")
    unknown = set(rec) - _JSONL_KEYS
    if unknown:
        raise bad(f"unknown keys {sorted(unknown)}")
    n = rec.get("n")
    if not _is_int(n) or n < 1:
        raise bad("'n' must be a positive integer")
    edges = rec.get("edges", [])
    if not isinstance(edges, list):
        raise bad("'edges' must be a list")
    for e in edges:
        if not (isinstance(e, list) and len(e) == 2 and all(_is_int(x) for x in e)):
            raise bad(f"malformed edge {e!r}")
        if not all(0 <= x < n for x in e):
            raise bad(f"edge {e} out of range for n={n}")
    out = dict(n=n, edges=edges, node_labels=None, node_attrs=None, edge_labels=None, target=None)
    if "node_labels" in rec:
        nl = rec["node_labels"]
        if not (isinstance(nl, list) and len(nl) == n and all(_is_int(x) for x in nl)):
            raise bad("'node_labels' must be a list of n integers")
        out["node_labels"] = nl
    if "node_attrs" in rec:
        na = rec["node_attrs"]
        if not (
            isinstance(na, list)
            and len(na) == n
            and all(isinstance(row, list) and all(_is_num(x) for x in row) for row in na)
        ):
            raise bad("'node_attrs' must be a list of n float lists")
        out["node_attrs"] = [[float(x) for x in row] for row in na]
    if "edge_labels" in rec:
        el = rec["edge_labels"]
        if not (isinstance(el, list) and len(el) == len(edges) and all(_is_int(x) for x in el)):
            raise bad("'edge_labels' must align with 'edges'")
        out["edge_labels"] = el
    if "target" in rec:
        t = rec["target"]
        if not _is_num(t):
            raise bad("'target' must be a number")
        out["target"] = t
    return out


def parse_jsonl_graphs(path) -> GraphDataset:
    """Read newline-delimited JSON graph records (see README for the schema)."""
    path = Path(path)
    raw = []
    with open(path, encoding="utf-8") as fh:
        k = 0
        for line in fh:
            if not line.strip():
                continue
            k += 1
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"record {k}: invalid JSON ({exc.msg})") from None
            raw.append(_check_record(rec, k))
    try:
        return _finish_dataset(raw, path.stem)
    except DataError as exc:
        raise ParseError(str(exc)) from None


def write_jsonl(dataset: GraphDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in dataset.graphs:
            rec: dict = {"n": g.num_nodes, "edges": g.edges.tolist()}
            if g.node_labels is not None:
                rec["node_labels"] = g.node_labels.tolist()
            if g.node_attrs is not None:
                rec["node_attrs"] = g.node_attrs.tolist()
            if g.edge_labels is not None:
                rec["edge_labels"] = g.edge_labels.tolist()
            if g.target is not None:
                rec["target"] = float(g.target) if dataset.target_kind == REGRESSION else int(g.target)
            fh.write(json.dumps(rec) + "\n")


def split_kfold(dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; fold sizes differ by at most one."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([folds[j] for j in range(k) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def load_dataset(fmt: str, path, name: str | None = None) -> GraphDataset:
    if fmt == "tu":
        path = Path(path)
        return parse_tu_dataset(path, name or path.name)
    if fmt == "jsonl":
        return parse_jsonl_graphs(path)
    raise ValueError(f"unknown dataset format {fmt!r}")
