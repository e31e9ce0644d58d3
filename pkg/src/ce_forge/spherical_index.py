"""Cosine-similarity index over aggregated vectors.

The index is a chain of ``p`` spherical k-means partitions of the test nodes.
The first partition is unweighted.  Each later partition is a weighted
k-means whose weights come from the previous partition: a node's weight is
the fraction of its similarity cap (all directions within ``theta`` of it)
that falls *outside* the cap of its assigned centroid.  Nodes sitting on a
cluster boundary therefore pull the next partition's centroids towards
themselves.  At query time a node is looked up in the partition where its
own weight was smallest, and only that cluster is scanned.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import betainc

from .ks_kernel import read_table, write_table

log = logging.getLogger(__name__)

INDEX_VERSION = 1
_QUAD_NODES = 256


@dataclass(frozen=True)
class IndexParams:
    partitions: int = 50
    clusters: int = 10
    theta: float = math.pi / 3
    seed: int = 0
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    # False reproduces the "no weighted clustering" ablation: uniform weights in every partition
    weighted: bool = True

    def __post_init__(self):
        if self.partitions < 1:
            raise ValueError("need at least one partition")
        if self.clusters < 1:
            raise ValueError("need at least one cluster")
        if not 0.0 < self.theta <= math.pi / 2:
            raise ValueError(f"theta must lie in (0, pi/2], got {self.theta}")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be positive")


@dataclass
class Partition:
    centroids: np.ndarray  # (m, d), unit rows
    assignment: np.ndarray  # (n,) cluster id per point
    weights: np.ndarray  # (n,) node weight against the assigned centroid
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


@dataclass
class SphericalIndex:
    params: IndexParams
    nodes: np.ndarray  # test node ids, in the row order used by the partitions
    partitions: list[Partition]
    entry_partition: np.ndarray  # per row of ``nodes``
    entry_cluster: np.ndarray
    metadata: dict = field(default_factory=dict)
    _members: list[list[np.ndarray]] = field(default_factory=list, repr=False)
    _row_of: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row_of = {int(v): i for i, v in enumerate(self.nodes)}
        self._members = []
        for part in self.partitions:
            order = np.argsort(part.assignment, kind="stable")
            bounds = np.searchsorted(part.assignment[order], np.arange(self.params.clusters + 1))
            self._members.append(
                [self.nodes[order[bounds[c]:bounds[c + 1]]] for c in range(self.params.clusters)]
            )

    def members(self, partition: int, cluster: int) -> np.ndarray:
        return self._members[partition][cluster]

    def entry(self, v: int) -> tuple[int, int]:
        row = self._row(v)
        return int(self.entry_partition[row]), int(self.entry_cluster[row])

    def storage_entries(self) -> int:
        return sum(len(m) for part in self._members for m in part)

    def _row(self, v: int) -> int:
        try:
            return self._row_of[int(v)]
        except KeyError:
            raise KeyError(f"node {v} is not in the index") from None


# ---------------------------------------------------------------------------
# geometry


def unit_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        log.warning("zero vector normalized to the first basis direction")
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0.0
    out = X / np.where(zero, 1.0, norms)[:, None]
    if zero.any():
        log.warning("%d zero vector(s) normalized to the first basis direction", int(zero.sum()))
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out


@lru_cache(maxsize=8)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _slice_fraction(c: np.ndarray, d: int) -> np.ndarray:
    """Fraction of the unit sphere in R^(d-1) whose first coordinate is >= c.

    At ``d == 2`` that sphere is the two points {-1, +1}.
    """
    c = np.clip(c, -1.0, 1.0)
    if d == 2:
        return np.where(c <= -1.0, 1.0, np.where(c >= 1.0, 0.0, 0.5))
    upper = 0.5 * betainc((d - 2) / 2.0, 0.5, np.clip(1.0 - c * c, 0.0, 1.0))
    return np.where(c >= 0.0, upper, 1.0 - upper)


def _integrate_caps(phi: np.ndarray, theta: float, d: int, nodes: int) -> np.ndarray:
    x, w = _gauss_legendre(nodes)
    log_top = (d - 2) * math.log(math.sin(theta))

    def density(t):
        # sin^(d-2) relative to its value at theta, evaluated in log space
        if d == 2:
            return np.ones_like(t)
        with np.errstate(divide="ignore"):
            return np.exp((d - 2) * np.log(np.sin(t)) - log_top)

    def gl(a, b):
        half = 0.5 * (b - a)
        t = (a + b)[..., None] * 0.5 + half[..., None] * x
        return t, half[..., None] * w

    zero = np.zeros_like(phi)
    t_full, w_full = gl(zero, np.full_like(phi, theta))
    sf = (density(t_full) * w_full).sum(axis=-1)

    inner_hi = np.maximum(theta - phi, 0.0)
    t_in, w_in = gl(zero, inner_hi)
    inside = (density(t_in) * w_in).sum(axis=-1)

    lo = np.abs(theta - phi)
    t_mid, w_mid = gl(lo, np.full_like(phi, theta))
    sin_t = np.sin(t_mid)
    sin_p = np.sin(phi)[..., None]
    cp = np.cos(phi)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = (math.cos(theta) - np.cos(t_mid) * cp) / (sin_t * sin_p)
    c = np.where(np.isfinite(c), c, 1.0)
    partial = (density(t_mid) * _slice_fraction(c, d) * w_mid).sum(axis=-1)
    return (inside + partial) / sf


def cap_overlap_ratio(phi, theta: float, d: int, *, nodes: int = _QUAD_NODES):
    """Area shared by two caps of half-angle ``theta`` whose axes are ``phi``
    apart, as a fraction of one cap's area, on the unit sphere in R^d.

    The overlap is integrated over the polar angle measured from one axis:
    the slice at angle ``t`` is a (d-2)-sphere of area proportional to
    ``sin(t)^(d-2)``, and the part of it lying inside the other cap follows
    from the regularized incomplete beta function.  ``phi`` may be an array.
    """
    if not 0.0 < theta <= math.pi / 2:
        raise ValueError(f"theta must lie in (0, pi/2], got {theta}")
    if d < 2:
        raise ValueError(f"cap geometry needs d >= 2, got {d}")
    phi_arr = np.asarray(phi, dtype=np.float64)
    if np.any(phi_arr < 0.0) or np.any(phi_arr > math.pi) or not np.isfinite(phi_arr).all():
        raise ValueError("phi must lie in [0, pi]")
    out = np.zeros_like(phi_arr)
    exact_one = phi_arr == 0.0
    exact_zero = phi_arr >= 2 * theta
    mid = ~(exact_one | exact_zero)
    out[exact_one] = 1.0
    if mid.any():
        out[mid] = np.clip(_integrate_caps(phi_arr[mid], theta, d, nodes), 0.0, 1.0)
    if np.ndim(phi) == 0:
        return float(out)
    return out


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between unit vectors (row-wise if 2-D), clamping the dot product first."""
    dots = np.sum(np.asarray(a) * np.asarray(b), axis=-1)
    return np.arccos(np.clip(dots, -1.0, 1.0))


def node_weight(agg_unit, centroid, theta: float, d: int):
    return 1.0 - cap_overlap_ratio(angle_between(agg_unit, centroid), theta, d)


_TABLE_POINTS = 8193


@lru_cache(maxsize=16)
def _overlap_table(theta: float, d: int) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(0.0, 2 * theta, _TABLE_POINTS)
    return grid, cap_overlap_ratio(grid, theta, d)


def node_weights_tabulated(agg_unit, centroid, theta: float, d: int) -> np.ndarray:
    """Vectorized :func:`node_weight` for index builds.

    Interpolates linearly in a quadrature table over ``[0, 2*theta]``; exact
    at both ends, monotone, and within ~1e-7 of the direct quadrature.
    """
    grid, table = _overlap_table(float(theta), int(d))
    phi = angle_between(agg_unit, centroid)
    w = 1.0 - np.interp(phi, grid, table, right=0.0)
    w[phi == 0.0] = 0.0
    return w


# ---------------------------------------------------------------------------
# weighted spherical k-means


def _objective(points, weights, centroids, assignment) -> float:
    sims = np.einsum("ij,ij->i", points, centroids[assignment])
    return float(np.dot(weights, sims))


def _farthest_first(points, weights, m, rng) -> np.ndarray:
    candidates = np.flatnonzero(weights > 0)
    p = weights[candidates] / weights[candidates].sum()
    first = int(candidates[rng.choice(candidates.size, p=p)])
    chosen = [first]
    best = points[candidates] @ points[first]
    for _ in range(1, m):
        # farthest in angle = smallest best-cosine; argmin takes the lowest index on ties
        nxt = int(candidates[np.argmin(best)])
        chosen.append(nxt)
        best = np.maximum(best, points[candidates] @ points[nxt])
    return points[chosen].copy()


def weighted_kmeans(points, weights, m: int, seed, max_iters: int = 100, tol: float = 1e-6,
                    init: np.ndarray | None = None) -> Partition:
    """Maximize ``sum_v w_v * cos(x_v, mu_{c(v)})`` over assignments and unit centroids.

    Alternates nearest-centroid assignment (ties to the lowest cluster id) and
    the weighted-mean update, renormalized to the unit sphere.  A cluster left
    empty by the assignment is reseeded with the point of lowest weighted
    similarity to its current centroid.  ``seed`` may be an int or a
    ``numpy.random.Generator``.  The returned partition's ``weights`` are the
    input weights; :func:`build_index` replaces them with node weights.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = points.shape[0]
    if n < m:
        raise ValueError(f"cannot form {m} clusters from {n} points")
    if weights.shape != (n,) or np.any(weights < 0) or not np.any(weights > 0):
        raise ValueError("weights must be non-negative, one per point, and not all zero")
    if np.count_nonzero(weights) < m and init is None:
        raise ValueError(f"need at least {m} points with positive weight")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centroids = init.copy() if init is not None else _farthest_first(points, weights, m, rng)

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        sims = points @ centroids.T
        assignment = np.argmax(sims, axis=1)
        counts = np.bincount(assignment, minlength=m)
        if (counts == 0).any():
            taken = set()
            for c in np.flatnonzero(counts == 0):
                own = sims[np.arange(n), assignment] * weights
                donors = counts[assignment] > 1
                donors[list(taken)] = False
                pick = int(np.flatnonzero(donors)[np.argmin(own[donors])])
                counts[assignment[pick]] -= 1
                assignment[pick] = c
                counts[c] = 1
                centroids[c] = points[pick]
                taken.add(pick)
        onehot = sp.csr_matrix((weights, (assignment, np.arange(n))), shape=(m, n))
        sums = onehot @ points
        norms = np.linalg.norm(sums, axis=1)
        # a cluster whose weighted sum vanishes keeps its centroid; its term is 0 either way
        live = norms > 0.0
        centroids[live] = sums[live] / norms[live, None]
        history.append(_objective(points, weights, centroids, assignment))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break

    # final assignment consistent with the returned centroids
    sims = points @ centroids.T
    final = np.argmax(sims, axis=1)
    if np.bincount(final, minlength=m).min() == 0:
        final = assignment
    return Partition(centroids=centroids, assignment=final.astype(np.int64), weights=weights.copy(),
                     objective_history=history, iterations=it, converged=converged)


# ---------------------------------------------------------------------------
# index construction and lookup


def build_index(agg: np.ndarray, nodes, params: IndexParams, metadata: dict | None = None) -> SphericalIndex:
    """Build the partition chain over ``agg[nodes]``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    n = nodes.size
    if n < params.clusters:
        raise ValueError(f"{n} test nodes cannot fill {params.clusters} clusters")
    points = normalize_rows(np.asarray(agg, dtype=np.float64)[nodes])
    d = points.shape[1]
    if d < 2:
        raise ValueError("the index needs vectors of dimension >= 2")
    root = np.random.SeedSequence(params.seed)
    streams = [np.random.default_rng(s) for s in root.spawn(params.partitions)]

    weights = np.ones(n)
    partitions: list[Partition] = []
    all_weights = np.empty((params.partitions, n))
    for i in range(params.partitions):
        use = weights if params.weighted else np.ones(n)
        if np.count_nonzero(use) < params.clusters:
            # every node sits on a centroid; fall back to uniform rather than degenerate seeding
            use = np.ones(n)
        part = weighted_kmeans(points, use, params.clusters, streams[i],
                               params.kmeans_max_iters, params.kmeans_tol)
        part.weights = node_weights_tabulated(points, part.centroids[part.assignment], params.theta, d)
        partitions.append(part)
        all_weights[i] = part.weights
        weights = part.weights

    # argmin returns the first (smallest partition index) on ties
    entry_partition = np.argmin(all_weights, axis=0).astype(np.int64)
    entry_cluster = np.array([partitions[p].assignment[j] for j, p in enumerate(entry_partition)],
                             dtype=np.int64)
    return SphericalIndex(params=params, nodes=nodes, partitions=partitions,
                          entry_partition=entry_partition, entry_cluster=entry_cluster,
                          metadata=dict(metadata or {}))


def lookup(index: SphericalIndex, v: int) -> np.ndarray:
    """Candidate nodes for ``v``: its entry cluster's members, excluding ``v``."""
    p, c = index.entry(v)
    members = index.members(p, c)
    return members[members != v]


def weight_histogram(index: SphericalIndex, bins: int = 10) -> list[int]:
    """Counts of chosen node weights in equal-width bins over [0, 1]."""
    chosen = np.array([index.partitions[p].weights[j] for j, p in enumerate(index.entry_partition)])
    hist, _ = np.histogram(chosen, bins=bins, range=(0.0, 1.0))
    return hist.tolist()


# ---------------------------------------------------------------------------
# persistence: JSON envelope plus a binary centroid table


def centroid_path(index_path) -> Path:
    p = Path(index_path)
    return p.with_name(p.stem + ".centroids.bin")


def save_index(index: SphericalIndex, path) -> None:
    path = Path(path)
    p = index.params
    doc = {
        "version": INDEX_VERSION,
        "params": {
            "p": p.partitions, "m": p.clusters, "theta": p.theta, "seed": p.seed,
            "kmeans_max_iters": p.kmeans_max_iters, "kmeans_tol": p.kmeans_tol,
            "weighted": p.weighted, **index.metadata,
        },
        "nodes": index.nodes.tolist(),
        "partitions": [
            {"assignment": part.assignment.tolist(), "weights": part.weights.tolist(),
             "iterations": part.iterations, "converged": part.converged}
            for part in index.partitions
        ],
        "entry": [[int(a), int(b)] for a, b in zip(index.entry_partition, index.entry_cluster)],
        "centroids": centroid_path(path).name,
    }
    write_table(np.concatenate([part.centroids for part in index.partitions]), centroid_path(path))
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_index(path) -> SphericalIndex:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {doc.get('version')}")
    raw = dict(doc["params"])
    params = IndexParams(partitions=raw.pop("p"), clusters=raw.pop("m"), theta=raw.pop("theta"),
                         seed=raw.pop("seed"), kmeans_max_iters=raw.pop("kmeans_max_iters"),
                         kmeans_tol=raw.pop("kmeans_tol"), weighted=raw.pop("weighted"))
    cents = read_table(path.with_name(doc["centroids"]))
    m = params.clusters
    parts = []
    for i, pd in enumerate(doc["partitions"]):
        parts.append(Partition(centroids=cents[i * m:(i + 1) * m].copy(),
                               assignment=np.asarray(pd["assignment"], dtype=np.int64),
                               weights=np.asarray(pd["weights"], dtype=np.float64),
                               iterations=pd["iterations"], converged=pd["converged"]))
    entry = np.asarray(doc["entry"], dtype=np.int64).reshape(-1, 2)
    return SphericalIndex(params=params, nodes=np.asarray(doc["nodes"], dtype=np.int64), partitions=parts,
                          entry_partition=entry[:, 0], entry_cluster=entry[:, 1], metadata=raw)
