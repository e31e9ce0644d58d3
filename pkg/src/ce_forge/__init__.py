"""Counterfactual-evidence search for node classifiers.

Finds pairs of test nodes whose L-hop neighborhoods look alike under a
feature-propagation kernel but which a classifier labels differently, by
exact scan or through a spherical partition index.
"""

from .ce_search import CeQueryResult, GcePair, Hit, SearchContext, global_ce, local_ce_exact, local_ce_indexed
from .graph_store import Graph, load_features, load_graph, load_splits
from .ks_kernel import KsParams, aggregate, aggregated_vectors, ks_propagate, ks_score
from .model_runner import PredictionTable, gcn_forward, load_predictions, normalize_adjacency, predict_labels
from .spherical_index import IndexParams, SphericalIndex, build_index, cap_overlap_ratio, lookup

__version__ = "0.1.0"
