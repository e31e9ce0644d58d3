"""Graph, feature, split and id-map loading.

Nodes are dense integers in ``[0, num_nodes)``.  Adjacency is held in CSR
form (``indptr``/``indices``) with each neighbor list sorted, so that the
propagation and search code can index arrays directly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Dense ids are stored as int64 but must also fit comfortably in int32 consumers.
MAX_NODE_ID = 2**31 - 2

SPLITS = ("train", "valid", "test")


class GraphFormatError(ValueError):
    """Raised for malformed or inconsistent input files."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    # original ids when ingested with remapping; None means ids were already dense
    external_ids: np.ndarray | None = field(default=None, compare=False)

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0] // 2)

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_array(self) -> np.ndarray:
        """Return the undirected edges as an ``(E, 2)`` array with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degree())
        mask = src < self.indices
        return np.stack([src[mask], self.indices[mask]], axis=1)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edge_array()}

    def check_node(self, v: int) -> int:
        if not isinstance(v, (int, np.integer)) or v < 0 or v >= self.num_nodes:
            raise IndexError(f"invalid node id {v!r} (graph has {self.num_nodes} nodes)")
        return int(v)


@dataclass(frozen=True)
class AnchoredSubgraph:
    anchor: int
    nodes: frozenset[int]
    edges: frozenset[tuple[int, int]]
    hop_limit: int


def from_edges(num_nodes: int, edges, external_ids: np.ndarray | None = None) -> Graph:
    """Build a :class:`Graph` from an iterable of ``(u, v)`` pairs.

    Duplicate edges (in either orientation) collapse to one; self-loops raise.
    """
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphFormatError("edges must be pairs of node ids")
    if num_nodes < 0:
        raise GraphFormatError("num_nodes must be non-negative")
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        bad = int(arr[(arr < 0) | (arr >= num_nodes)][0])
        raise GraphFormatError(f"edge endpoint {bad} outside [0, {num_nodes})")
    loops = arr[:, 0] == arr[:, 1]
    if loops.any():
        raise GraphFormatError(f"self-loop on node {int(arr[loops][0, 0])}")
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    und = np.unique(np.stack([lo, hi], axis=1), axis=0) if arr.shape[0] else arr
    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return Graph(num_nodes=int(num_nodes), indptr=indptr, indices=dst.astype(np.int64), external_ids=external_ids)


def _split_line(line: str) -> list[str]:
    if "\t" in line:
        return [p.strip() for p in line.split("\t")]
    return [p.strip() for p in line.split(",")]


def load_graph(edge_file, *, remap: bool = False) -> Graph:
    """Read an edge list (tab or comma separated, ``#`` comments).

    A ``#nodes=N`` header fixes the node count; otherwise it is one more than
    the largest id seen.  With ``remap=True`` arbitrary non-negative integer
    ids are compacted to ``[0, n)`` in sorted order and kept in
    ``Graph.external_ids``.
    """
    path = Path(edge_file)
    declared: int | None = None
    pairs: list[tuple[int, int]] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip().replace(" ", "")
                if body.startswith("nodes="):
                    try:
                        declared = int(body[len("nodes="):])
                    except ValueError:
                        raise GraphFormatError(f"{path}:{lineno}: bad node-count header {line!r}") from None
                continue
            parts = _split_line(line)
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected two node ids, got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id in {line!r}")
            if u == v:
                raise GraphFormatError(f"{path}:{lineno}: self-loop on node {u}")
            if not remap and max(u, v) > MAX_NODE_ID:
                raise GraphFormatError(f"{path}:{lineno}: node id {max(u, v)} overflows (max {MAX_NODE_ID})")
            pairs.append((u, v))

    if remap:
        ids = np.unique(np.asarray(pairs, dtype=np.int64)) if pairs else np.zeros(0, np.int64)
        if declared is not None and declared < ids.size:
            raise GraphFormatError(f"{path}: header declares {declared} nodes but {ids.size} distinct ids appear")
        lookup = {int(x): i for i, x in enumerate(ids)}
        dense = [(lookup[u], lookup[v]) for u, v in pairs]
        return from_edges(max(declared or 0, ids.size), dense, external_ids=ids)

    seen = 1 + max((max(p) for p in pairs), default=-1)
    if declared is not None:
        if declared < seen:
            raise GraphFormatError(f"{path}: header declares {declared} nodes but id {seen - 1} appears")
        seen = declared
    return from_edges(seen, pairs)


def write_edges(graph: Graph, out) -> None:
    path = Path(out)
    with path.open("w") as fh:
        fh.write(f"#nodes={graph.num_nodes}\n")
        for u, v in graph.edge_array():
            fh.write(f"{u},{v}\n")


def write_id_map(graph: Graph, out) -> None:
    if graph.external_ids is None:
        raise ValueError("graph was not remapped; there is no id map to write")
    with Path(out).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["external_id", "internal_id"])
        for i, ext in enumerate(graph.external_ids):
            w.writerow([int(ext), i])


def load_id_map(path) -> dict[int, int]:
    """Read ``external_id,internal_id`` rows into an external -> internal dict."""
    out: dict[int, int] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["external_id", "internal_id"]:
            raise GraphFormatError(f"{path}: expected header external_id,internal_id")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[int(row[0])] = int(row[1])
            except (ValueError, IndexError):
                raise GraphFormatError(f"{path}:{lineno}: malformed id-map row {row!r}") from None
    return out


def load_features(feature_file, graph: Graph) -> np.ndarray:
    """Read a dense ``node_id,f0,...,f{d-1}`` CSV into a ``(num_nodes, d)`` float64 array."""
    path = Path(feature_file)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "node_id" or len(header) < 2:
            raise GraphFormatError(f"{path}: header must be node_id,f0,...")
        d = len(header) - 1
        X = np.zeros((graph.num_nodes, d), dtype=np.float64)
        present = np.zeros(graph.num_nodes, dtype=bool)
        rows = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            rows += 1
            if len(row) != d + 1:
                raise GraphFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                v = int(row[0])
                vals = [float(x) for x in row[1:]]
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: unparseable row") from None
            if v < 0 or v >= graph.num_nodes:
                raise GraphFormatError(f"{path}:{lineno}: node id {v} not in graph")
            if not all(math.isfinite(x) for x in vals):
                raise GraphFormatError(f"{path}:{lineno}: non-finite feature value for node {v}")
            if present[v]:
                raise GraphFormatError(f"{path}:{lineno}: duplicate row for node {v}")
            present[v] = True
            X[v] = vals
    if not present.all():
        missing = np.flatnonzero(~present)
        shown = ", ".join(str(int(m)) for m in missing[:20])
        raise GraphFormatError(
            f"{path}: {rows} rows for {graph.num_nodes} nodes; missing rows for nodes {shown}"
        )
    return X


def write_features(X: np.ndarray, out) -> None:
    with Path(out).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id"] + [f"f{j}" for j in range(X.shape[1])])
        for v, row in enumerate(X):
            w.writerow([v] + [repr(float(x)) for x in row])


def load_splits(split_file, graph: Graph) -> np.ndarray:
    """Read ``node_id,split`` rows; returns an array of split names indexed by node."""
    path = Path(split_file)
    tags = np.empty(graph.num_nodes, dtype=object)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "split"]:
            raise GraphFormatError(f"{path}: header must be node_id,split")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                v = int(row[0])
                tag = row[1].strip()
            except (ValueError, IndexError):
                raise GraphFormatError(f"{path}:{lineno}: malformed split row {row!r}") from None
            if tag not in SPLITS:
                raise GraphFormatError(f"{path}:{lineno}: unknown split {tag!r}")
            if v < 0 or v >= graph.num_nodes:
                raise GraphFormatError(f"{path}:{lineno}: node id {v} not in graph")
            if tags[v] is not None:
                raise GraphFormatError(f"{path}:{lineno}: node {v} assigned twice")
            tags[v] = tag
    missing = [i for i, t in enumerate(tags) if t is None]
    if missing:
        raise GraphFormatError(f"{path}: no split for nodes {missing[:20]}")
    if not (tags == "test").any():
        raise GraphFormatError(f"{path}: test split is empty")
    return tags


def write_splits(tags, out) -> None:
    with Path(out).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "split"])
        for v, t in enumerate(tags):
            w.writerow([v, t])


def test_nodes(tags) -> np.ndarray:
    return np.flatnonzero(np.asarray(tags) == "test").astype(np.int64)


test_nodes.__test__ = False  # keep pytest from collecting this helper


def neighbors(graph: Graph, v: int) -> np.ndarray:
    v = graph.check_node(v)
    return graph.indices[graph.indptr[v]:graph.indptr[v + 1]]


def extract_l_hop(graph: Graph, v: int, L: int) -> AnchoredSubgraph:
    """Nodes within ``L`` hops of ``v`` and the edges they induce."""
    v = graph.check_node(v)
    if L < 0:
        raise ValueError("hop limit must be non-negative")
    seen = {v}
    frontier = [v]
    for _ in range(L):
        nxt = []
        for x in frontier:
            for u in graph.indices[graph.indptr[x]:graph.indptr[x + 1]]:
                u = int(u)
                if u not in seen:
                    seen.add(u)
                    nxt.append(u)
        if not nxt:
            break
        frontier = nxt
    edges = set()
    for x in seen:
        for u in graph.indices[graph.indptr[x]:graph.indptr[x + 1]]:
            u = int(u)
            if x < u and u in seen:
                edges.add((x, u))
    return AnchoredSubgraph(anchor=v, nodes=frozenset(seen), edges=frozenset(edges), hop_limit=L)
