"""Kernel-based neighborhood similarity.

Each node's feature vector is repeatedly mixed with its neighbors' vectors,
the neighbors weighted by their cosine similarity to the node.  The vectors
from every round are summed into one aggregated vector per node, and two
nodes are compared by the cosine of their aggregated vectors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph_store import Graph

CACHE_MAGIC = b"CEAGGV01"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")

# edges are processed in blocks to bound the (E, d) temporaries
_EDGE_BLOCK = 1 << 18


@dataclass(frozen=True)
class KsParams:
    alpha: float = 0.5
    hops: int = 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.hops < 0:
            raise ValueError(f"hops must be non-negative, got {self.hops}")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, np.dot(a, b) / (na * nb))))


def _edge_cosines(X: np.ndarray, norms: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    out = np.empty(src.shape[0], dtype=np.float64)
    for lo in range(0, src.shape[0], _EDGE_BLOCK):
        s, t = src[lo:lo + _EDGE_BLOCK], dst[lo:lo + _EDGE_BLOCK]
        dots = np.einsum("ij,ij->i", X[s], X[t])
        denom = norms[s] * norms[t]
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
        out[lo:lo + _EDGE_BLOCK] = np.clip(c, -1.0, 1.0)
    return out


def ks_propagate(features: np.ndarray, graph: Graph, params: KsParams) -> list[np.ndarray]:
    """Return ``[x^0, x^1, ..., x^L]`` over all nodes.

    Isolated nodes keep only the self term: ``x^{l+1} = alpha * x^l``.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.num_nodes:
        raise ValueError(f"features have shape {X.shape}, graph has {graph.num_nodes} nodes")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    n = graph.num_nodes
    deg = graph.degree().astype(np.float64)
    src = np.repeat(np.arange(n, dtype=np.int64), graph.degree())
    dst = graph.indices
    scale = np.where(deg > 0, (1.0 - params.alpha) / np.where(deg > 0, deg, 1.0), 0.0)

    out = [X.copy()]
    for _ in range(params.hops):
        cur = out[-1]
        norms = np.linalg.norm(cur, axis=1)
        w = _edge_cosines(cur, norms, src, dst)
        W = sp.csr_matrix((w, dst, graph.indptr), shape=(n, n))
        out.append(params.alpha * cur + scale[:, None] * (W @ cur))
    return out


def aggregate(propagated) -> np.ndarray:
    if len(propagated) == 0:
        raise ValueError("need at least one propagation round")
    agg = np.array(propagated[0], dtype=np.float64, copy=True)
    for layer in propagated[1:]:
        agg += layer
    return agg


def aggregated_vectors(features: np.ndarray, graph: Graph, params: KsParams) -> np.ndarray:
    return aggregate(ks_propagate(features, graph, params))


def unit_rows(agg: np.ndarray) -> np.ndarray:
    """Row-normalize; zero rows stay zero so their cosine with anything is 0."""
    norms = np.linalg.norm(agg, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    return agg / safe[:, None]


def ks_score(agg: np.ndarray, v: int, u: int) -> float:
    n = agg.shape[0]
    for x in (v, u):
        if not 0 <= x < n:
            raise IndexError(f"invalid node id {x} (table has {n} rows)")
    return cosine(agg[v], agg[u])


# ---------------------------------------------------------------------------
# binary cache: header (magic, version, rows, cols) + row-major little-endian float64


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_table(table: np.ndarray, path) -> None:
    table = np.ascontiguousarray(table, dtype="<f8")
    rows, cols = table.shape
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, rows, cols))
        fh.write(table.tobytes())


def read_table(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated table header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported table version {version}")
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows}x{cols} float64 values, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def sidecar_path(cache_path) -> Path:
    p = Path(cache_path)
    return p.with_name(p.name + ".json")


def write_cache(agg: np.ndarray, path, params: KsParams, checksums: dict[str, str]) -> dict:
    write_table(agg, path)
    meta = {
        "alpha": params.alpha,
        "hops": params.hops,
        "num_nodes": int(agg.shape[0]),
        "dim": int(agg.shape[1]),
        "checksums": dict(sorted(checksums.items())),
        "table_sha256": file_sha256(path),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_cache(path) -> tuple[np.ndarray, dict]:
    meta = json.loads(sidecar_path(path).read_text())
    if file_sha256(path) != meta["table_sha256"]:
        raise ValueError(f"{path}: table checksum does not match its sidecar")
    return read_table(path), meta
