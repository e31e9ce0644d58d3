"""Per-node predicted labels: ingested from CSV or produced by a dense GCN pass."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_store import Graph, GraphFormatError


@dataclass(frozen=True)
class PredictionTable:
    predicted: np.ndarray  # int64 per node, -1 where unknown
    num_classes: int
    true_label: np.ndarray | None = None  # int64 per node, -1 where unknown

    def __post_init__(self):
        p = self.predicted
        known = p[p >= 0]
        if known.size and known.max() >= self.num_classes:
            raise ValueError(f"predicted label {int(known.max())} outside [0, {self.num_classes})")

    def require(self, nodes) -> None:
        missing = [int(v) for v in nodes if self.predicted[v] < 0]
        if missing:
            raise ValueError(f"no prediction for test node(s) {missing[:20]}")


def normalize_adjacency(graph: Graph) -> np.ndarray:
    """Dense ``D^-1/2 (A + I) D^-1/2``; degrees count the added self-loop."""
    n = graph.num_nodes
    A = np.eye(n, dtype=np.float64)
    src = np.repeat(np.arange(n), graph.degree())
    A[src, graph.indices] = 1.0
    inv_sqrt = 1.0 / np.sqrt(A.sum(axis=1))
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


def gcn_forward(features: np.ndarray, adj_norm: np.ndarray, weights: list[np.ndarray]) -> np.ndarray:
    """Run ``H <- relu(A H W)`` per layer; the last layer has no activation."""
    H = np.asarray(features, dtype=np.float64)
    if adj_norm.shape != (H.shape[0], H.shape[0]):
        raise ValueError(f"adjacency shape {adj_norm.shape} does not match {H.shape[0]} nodes")
    for i, W in enumerate(weights):
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != H.shape[1]:
            raise ValueError(
                f"layer {i}: weight shape {W.shape} incompatible with input width {H.shape[1]}"
            )
        H = adj_norm @ H @ W
        if i < len(weights) - 1:
            H = np.maximum(H, 0.0)
    return H


def predict_labels(logits: np.ndarray, true_label: np.ndarray | None = None) -> PredictionTable:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ValueError("logits must have at least one column per row")
    # np.argmax returns the first maximum, i.e. the smallest label id on ties
    pred = np.argmax(logits, axis=1).astype(np.int64)
    return PredictionTable(predicted=pred, num_classes=int(logits.shape[1]), true_label=true_label)


def load_weights(path) -> list[np.ndarray]:
    """Read ``{"layers": [{"rows": r, "cols": c, "data": [...]}, ...]}``.

    A layer may also be given directly as a nested list of rows.
    """
    doc = json.loads(Path(path).read_text())
    layers = []
    for i, layer in enumerate(doc["layers"]):
        if isinstance(layer, dict):
            W = np.asarray(layer["data"], dtype=np.float64).reshape(int(layer["rows"]), int(layer["cols"]))
        else:
            W = np.asarray(layer, dtype=np.float64)
        if W.ndim != 2 or not np.isfinite(W).all():
            raise ValueError(f"layer {i}: weights must be a finite 2-D matrix")
        layers.append(W)
    for i in range(1, len(layers)):
        if layers[i].shape[0] != layers[i - 1].shape[1]:
            raise ValueError(f"layer {i}: input dim {layers[i].shape[0]} != previous output {layers[i - 1].shape[1]}")
    return layers


def save_weights(layers, path) -> None:
    doc = {"layers": [{"rows": int(W.shape[0]), "cols": int(W.shape[1]), "data": np.asarray(W).ravel().tolist()}
                      for W in layers]}
    Path(path).write_text(json.dumps(doc))


def load_predictions(path, num_classes: int, num_nodes: int, required=()) -> PredictionTable:
    """Read ``node_id,predicted_label[,true_label]``.

    ``required`` lists the nodes (normally the test split) that must be covered.
    """
    path = Path(path)
    pred = np.full(num_nodes, -1, dtype=np.int64)
    true = np.full(num_nodes, -1, dtype=np.int64)
    has_true = False
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "node_id":
                continue
            if len(row) not in (2, 3):
                raise GraphFormatError(f"{path}:{lineno}: expected node_id,predicted_label[,true_label]")
            try:
                vals = [int(x) for x in row]
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer field in {row!r}") from None
            v = vals[0]
            if v < 0 or v >= num_nodes:
                raise GraphFormatError(f"{path}:{lineno}: node id {v} not in graph")
            for lab in vals[1:]:
                if lab < 0 or lab >= num_classes:
                    raise GraphFormatError(f"{path}:{lineno}: label {lab} out of range [0, {num_classes})")
            pred[v] = vals[1]
            if len(vals) == 3:
                true[v] = vals[2]
                has_true = True
    missing = [int(v) for v in required if pred[v] < 0]
    if missing:
        raise GraphFormatError(f"{path}: missing prediction for test node(s) {missing[:20]}")
    return PredictionTable(predicted=pred, num_classes=num_classes, true_label=true if has_true else None)


def write_predictions(table: PredictionTable, path, nodes=None) -> None:
    nodes = range(table.predicted.shape[0]) if nodes is None else nodes
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if table.true_label is not None:
            w.writerow(["node_id", "predicted_label", "true_label"])
        else:
            w.writerow(["node_id", "predicted_label"])
        for v in nodes:
            if table.predicted[v] < 0:
                continue
            row = [int(v), int(table.predicted[v])]
            if table.true_label is not None:
                row.append(int(table.true_label[v]))
            w.writerow(row)
