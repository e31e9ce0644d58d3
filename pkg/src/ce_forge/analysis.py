"""Evaluation and auditing metrics over CE results."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ce_search import CeQueryResult, GcePair, Hit
from .model_runner import PredictionTable


@dataclass(frozen=True)
class FeatureValuePredicate:
    """``f(x) == value`` for categorical features, or ``f(x) >= threshold`` for continuous ones."""

    feature: int
    value: float | None = None
    threshold: float | None = None
    name: str = ""

    def __post_init__(self):
        if (self.value is None) == (self.threshold is None):
            raise ValueError("give exactly one of value or threshold")
        if self.feature < 0:
            raise ValueError("feature index must be non-negative")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.value is not None:
            return f"f{self.feature}={self.value:g}"
        return f"f{self.feature}>={self.threshold:g}"

    def holds(self, features: np.ndarray, v) -> np.ndarray | bool:
        col = features[v, self.feature]
        if self.value is not None:
            return col == self.value
        return col >= self.threshold

    @classmethod
    def parse(cls, text: str) -> "FeatureValuePredicate":
        """Parse ``f3=1``, ``3=1`` or ``f2>=0.5`` (an optional ``name:`` prefix labels it)."""
        name = ""
        if ":" in text:
            name, text = text.split(":", 1)
        if ">=" in text:
            lhs, rhs = text.split(">=", 1)
            return cls(int(lhs.strip().lstrip("f")), threshold=float(rhs), name=name.strip())
        if "=" in text:
            lhs, rhs = text.split("=", 1)
            return cls(int(lhs.strip().lstrip("f")), value=float(rhs), name=name.strip())
        raise ValueError(f"cannot parse predicate {text!r}")


@dataclass
class MetricReport:
    metric: str
    value: float
    k: int
    nodes: int
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["value"] = round(self.value, 6)
        return d


def average_similarity(results: list[CeQueryResult], k: int, *, effective_k: bool = False,
                       exclude_empty: bool = False) -> float:
    """Mean over query nodes of the mean KS of their top-``k`` hits.

    By default each node's sum is divided by ``k`` even when it has fewer hits,
    and nodes without hits count as 0.  ``effective_k`` divides by the number
    of hits instead; ``exclude_empty`` drops hitless nodes from the outer mean.
    """
    if not results:
        raise ValueError("no test nodes")
    per_node = []
    for r in results:
        hits = r.hits[:k]
        if not hits:
            if not exclude_empty:
                per_node.append(0.0)
            continue
        denom = len(hits) if effective_k else k
        per_node.append(sum(h.ks for h in hits) / denom)
    if not per_node:
        return 0.0
    return float(np.mean(per_node))


def discrimination_score(predicate: FeatureValuePredicate, features: np.ndarray, v: int,
                         hits: list[Hit], k: int, *, effective_k: bool = False) -> float:
    """Fraction of ``v``'s top-``k`` hits that do not satisfy the predicate ``v`` satisfies."""
    if not predicate.holds(features, v):
        raise ValueError(f"predicate {predicate.label} does not hold at node {v}")
    hits = hits[:k]
    if not hits:
        return 0.0
    flips = sum(1 for h in hits if not predicate.holds(features, h.node))
    return flips / (len(hits) if effective_k else k)


def dataset_discrimination_table(predicates: list[FeatureValuePredicate], features: np.ndarray,
                                 results: list[CeQueryResult], k: int = 10, *,
                                 effective_k: bool = False) -> list[dict]:
    """Mean DS per predicate over the query nodes where it holds, highest first."""
    if not predicates:
        raise ValueError("empty predicate list")
    rows = []
    for pred in predicates:
        if pred.feature >= features.shape[1]:
            raise ValueError(f"feature index {pred.feature} >= dimension {features.shape[1]}")
        scores = [discrimination_score(pred, features, r.query, r.hits, k, effective_k=effective_k)
                  for r in results if pred.holds(features, r.query)]
        rows.append({"feature": pred.label, "ds": float(np.mean(scores)) if scores else 0.0,
                     "nodes": len(scores)})
    rows.sort(key=lambda r: (-r["ds"], r["feature"]))
    return rows


def _pair_nodes(pairs: list[GcePair], k: int) -> list[int]:
    seen: dict[int, None] = {}
    for p in pairs[:k]:
        seen.setdefault(p.u)
        seen.setdefault(p.v)
    return list(seen)


def accuracy_within_topk_gce(pairs: list[GcePair], predictions: PredictionTable, k: int) -> float:
    """Share of distinct nodes in the top-``k`` pairs whose prediction is correct."""
    nodes = _pair_nodes(pairs, k)
    if not nodes:
        raise ValueError("no nodes in the top-k pairs")
    truth = predictions.true_label
    if truth is None or np.any(truth[nodes] < 0):
        raise ValueError("true labels are missing for nodes in the top-k pairs")
    return float(np.mean(predictions.predicted[nodes] == truth[nodes]))


def test_accuracy(predictions: PredictionTable, test_nodes) -> float:
    truth = predictions.true_label
    if truth is None:
        raise ValueError("no true labels")
    nodes = np.asarray(test_nodes)
    return float(np.mean(predictions.predicted[nodes] == truth[nodes]))


test_accuracy.__test__ = False


def error_curve(pairs: list[GcePair], predictions: PredictionTable, k_grid) -> list[dict]:
    rows = []
    for k in k_grid:
        nodes = _pair_nodes(pairs, k)
        acc = accuracy_within_topk_gce(pairs, predictions, k) if nodes else float("nan")
        rows.append({"k": int(k), "nodes": len(nodes), "accuracy": acc})
    return rows


def export_validation_set(pairs: list[GcePair], k: int, out) -> list[int]:
    """Write the distinct nodes of the top-``k`` pairs as a ``node_id`` CSV."""
    if k < 1:
        raise ValueError("k must be at least 1")
    nodes = _pair_nodes(pairs, k)
    with Path(out).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id"])
        for v in nodes:
            w.writerow([v])
    return nodes


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text rendering; floats at 6 decimals."""
    cells = [[f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"
