"""``ce-forge`` command line.

Pipeline::

    ce-forge aggregate   --edges E --features F --out agg.bin
    ce-forge build-index --cache agg.bin --splits S --out index.json
    ce-forge query       --cache agg.bin --splits S --predictions P --num-classes C --all --out local.jsonl
    ce-forge analyze as  --results local.jsonl --k 10

Any flag can also come from ``--config FILE`` (``key = value`` lines, keys
spelled like the long flags without dashes); explicit flags win.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .ce_search import CeQueryResult, GcePair, Hit, SearchContext, all_local, global_ce, local_ce
from .graph_store import GraphFormatError, load_features, load_graph, load_splits, test_nodes, write_id_map
from .ks_kernel import KsParams, aggregated_vectors, file_sha256, read_cache, write_cache
from .model_runner import (PredictionTable, gcn_forward, load_predictions, load_weights, normalize_adjacency,
                           predict_labels, write_predictions)
from .spherical_index import IndexParams, build_index, load_index, save_index, weight_histogram

log = logging.getLogger("ce_forge")


class StaleArtifact(RuntimeError):
    pass


class PartialFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _thread_limit():
    n = os.environ.get("CE_FORGE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _check(cond: bool, msg: str, force: bool) -> None:
    if cond:
        return
    if force:
        log.warning("%s (continuing because of --force)", msg)
        return
    raise StaleArtifact(msg + " (rerun the producing step or pass --force)")


def _hit_line(r: CeQueryResult) -> str:
    hits = ",".join(f'{{"node":{h.node},"ks":{h.ks:.6f}}}' for h in r.hits)
    status = "" if r.status == "ok" else f',"status":"{r.status}"'
    return f'{{"query":{r.query},"mode":"{r.mode}","hits":[{hits}]{status}}}'


def _pair_line(p: GcePair) -> str:
    return f'{{"pair":[{p.u},{p.v}],"ks":{p.ks:.6f}}}'


def _write_lines(lines, out) -> None:
    text = "".join(line + "\n" for line in lines)
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_local(path) -> list[CeQueryResult]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "query" not in d:
            raise GraphFormatError(f"{path}: expected local results, found {line[:60]!r}")
        out.append(CeQueryResult(query=d["query"], mode=d["mode"], status=d.get("status", "ok"),
                                 hits=[Hit(h["node"], h["ks"]) for h in d["hits"]]))
    return out


def _read_global(path) -> list[GcePair]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "pair" not in d:
            raise GraphFormatError(f"{path}: expected global pairs, found {line[:60]!r}")
        out.append(GcePair(int(d["pair"][0]), int(d["pair"][1]), float(d["ks"])))
    return out


def _load_cache_checked(args) -> tuple[np.ndarray, dict]:
    agg, meta = read_cache(args.cache)
    force = getattr(args, "force", False)
    for key in ("edges", "features"):
        path = getattr(args, key, None)
        if path:
            _check(meta["checksums"].get(key) == file_sha256(path),
                   f"cache {args.cache} was not built from {path}", force)
    if getattr(args, "alpha", None) is not None:
        _check(math.isclose(meta["alpha"], args.alpha), f"cache alpha {meta['alpha']} != requested {args.alpha}", force)
    if getattr(args, "hops", None) is not None:
        _check(meta["hops"] == args.hops, f"cache hops {meta['hops']} != requested {args.hops}", force)
    return agg, meta


def _splits(args, num_nodes: int) -> np.ndarray:
    from .graph_store import Graph

    shell = Graph(num_nodes=num_nodes, indptr=np.zeros(num_nodes + 1, np.int64), indices=np.zeros(0, np.int64))
    return load_splits(args.splits, shell)


def _predictions(args, num_nodes: int, nodes) -> PredictionTable:
    if args.predictions:
        if args.num_classes is None:
            raise SystemExit("--num-classes is required with --predictions")
        return load_predictions(args.predictions, args.num_classes, num_nodes, required=nodes)
    if args.weights:
        if not (args.edges and args.features):
            raise SystemExit("--weights needs --edges and --features for the forward pass")
        graph = load_graph(args.edges)
        X = load_features(args.features, graph)
        return predict_labels(gcn_forward(X, normalize_adjacency(graph), load_weights(args.weights)))
    raise SystemExit("give --predictions or --weights")


# ---------------------------------------------------------------------------
# commands


def cmd_aggregate(args) -> int:
    graph = load_graph(args.edges, remap=args.remap)
    if args.remap:
        write_id_map(graph, args.id_map or Path(args.out).with_suffix(".idmap.csv"))
    X = load_features(args.features, graph)
    params = KsParams(alpha=args.alpha, hops=args.hops)
    agg = aggregated_vectors(X, graph, params)
    meta = write_cache(agg, args.out, params,
                       {"edges": file_sha256(args.edges), "features": file_sha256(args.features)})
    log.info("wrote %s (%d x %d, alpha=%g, hops=%d)", args.out, agg.shape[0], agg.shape[1], params.alpha, params.hops)
    print(json.dumps({"cache": str(args.out), "table_sha256": meta["table_sha256"]}, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    graph = load_graph(args.edges)
    X = load_features(args.features, graph)
    table = predict_labels(gcn_forward(X, normalize_adjacency(graph), load_weights(args.weights)))
    write_predictions(table, args.out)
    return 0


def cmd_build_index(args) -> int:
    agg, meta = read_cache(args.cache)
    nodes = test_nodes(_splits(args, agg.shape[0]))
    params = IndexParams(partitions=args.partitions, clusters=args.clusters, theta=args.theta, seed=args.seed,
                         kmeans_max_iters=args.max_iters, kmeans_tol=args.tol, weighted=not args.no_weighting)
    if nodes.size < params.clusters:
        raise SystemExit(f"{nodes.size} test nodes cannot fill {params.clusters} clusters")
    index = build_index(agg, nodes, params, metadata={
        "alpha": meta["alpha"], "L": meta["hops"],
        "checksums": {"cache": meta["table_sha256"], "splits": file_sha256(args.splits)},
    })
    save_index(index, args.out)
    unconverged = sum(not p.converged for p in index.partitions)
    if unconverged:
        log.warning("%d partition(s) hit the k-means iteration cap", unconverged)
    log.info("chosen-weight histogram: %s", weight_histogram(index))
    print(json.dumps({"index": str(args.out),
                      "params": {"p": params.partitions, "m": params.clusters, "theta": round(params.theta, 10)},
                      "storage_entries": index.storage_entries()}, sort_keys=True))
    return 0


def cmd_query(args) -> int:
    agg, meta = _load_cache_checked(args)
    nodes = test_nodes(_splits(args, agg.shape[0]))
    preds = _predictions(args, agg.shape[0], nodes)
    ctx = SearchContext(agg, preds, nodes)
    index = None
    if args.mode == "indexed":
        if not args.index:
            raise SystemExit("--mode indexed needs --index")
        index = load_index(args.index)
        sums = index.metadata.get("checksums", {})
        _check(sums.get("cache") == meta["table_sha256"], f"index {args.index} was built from another cache",
               args.force)
        _check(sums.get("splits") == file_sha256(args.splits), f"index {args.index} was built from other splits",
               args.force)
    elif args.index:
        log.warning("--index ignored in exact mode")

    summary: dict = {"mode": args.mode, "k": args.k}
    start = time.perf_counter()
    failures: list[str] = []
    if args.global_:
        pairs = global_ce(ctx, args.k, args.mode, args.strategy, index)
        _write_lines([_pair_line(p) for p in pairs], args.out)
        summary.update(kind="global", strategy=args.strategy, pairs=len(pairs))
    else:
        if args.all:
            results = all_local(ctx, args.k, args.mode, index)
        else:
            results = []
            for v in args.node:
                try:
                    results.append(local_ce(ctx, v, args.k, args.mode, index))
                except KeyError as exc:
                    failures.append(f"node {v}: {exc.args[0]}")
        _write_lines([_hit_line(r) for r in results], args.out)
        summary.update(kind="local", queries=len(results))
        if results:
            summary["as"] = round(analysis.average_similarity(results, args.k), 6)
            summary["mean_candidates_scanned"] = round(float(np.mean([r.scanned for r in results])), 6)
            summary["empty_results"] = sum(1 for r in results if not r.hits)
    elapsed = time.perf_counter() - start
    log.info("query finished in %.3fs", elapsed)
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(json.dumps({**summary, "seconds": round(elapsed, 6)}, sort_keys=True), file=sys.stderr)
    if failures:
        raise PartialFailure("; ".join(failures))
    return 0


def cmd_analyze_as(args) -> int:
    results = _read_local(args.results)
    value = analysis.average_similarity(results, args.k, effective_k=args.effective_k,
                                        exclude_empty=args.exclude_empty)
    report = analysis.MetricReport("average_similarity", value, args.k, len(results),
                                   {"effective_k": args.effective_k, "exclude_empty": args.exclude_empty})
    text = json.dumps(report.to_json(), sort_keys=True) + "\n"
    _emit(text, args.out)
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_analyze_ds(args) -> int:
    graph = load_graph(args.edges)
    X = load_features(args.features, graph)
    results = _read_local(args.results)
    preds = [analysis.FeatureValuePredicate.parse(p) for p in args.predicate]
    if args.binary_features:
        for f in range(X.shape[1]):
            if np.isin(X[:, f], (0.0, 1.0)).all():
                preds.append(analysis.FeatureValuePredicate(f, value=1.0))
    if not preds:
        raise SystemExit("no predicates (use --predicate or --binary-features)")
    rows = analysis.dataset_discrimination_table(preds, X, results, args.k, effective_k=args.effective_k)
    sys.stdout.write(analysis.format_table(rows, ["feature", "ds", "nodes"]))
    if args.out:
        _write_csv(args.out, ["feature", "ds", "nodes"], rows)
    return 0


def _write_csv(path, columns, rows) -> None:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_analyze_error_curve(args) -> int:
    pairs = _read_global(args.results)
    num_nodes = args.num_nodes
    if num_nodes is None:
        num_nodes = 1 + max([max(p.u, p.v) for p in pairs] + [_max_node_in(args.predictions)])
    preds = load_predictions(args.predictions, args.num_classes, num_nodes)
    grid = [int(x) for x in args.k_grid.split(",")]
    rows = analysis.error_curve(pairs, preds, grid)
    if args.out:
        _write_csv(args.out, ["k", "nodes", "accuracy"], rows)
    sys.stdout.write(analysis.format_table(rows, ["k", "nodes", "accuracy"]))
    return 0


def _max_node_in(pred_path) -> int:
    best = -1
    for line in Path(pred_path).read_text().splitlines():
        head = line.split(",", 1)[0].strip()
        if head.isdigit():
            best = max(best, int(head))
    return best


def cmd_analyze_export(args) -> int:
    pairs = _read_global(args.results)
    nodes = analysis.export_validation_set(pairs, args.k, args.out)
    if len(pairs) < args.k:
        log.warning("only %d pairs available for k=%d", len(pairs), args.k)
    print(json.dumps({"out": str(args.out), "nodes": len(nodes)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ce-forge", description="Counterfactual-evidence search over graph node classifiers.")
    ap.add_argument("--config", help="key=value file merged under explicit flags")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="propagate features and cache aggregated vectors")
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--remap", action="store_true", help="compact sparse node ids and write an id map")
    p.add_argument("--id-map")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("predict", help="label nodes with the built-in GCN forward pass")
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("build-index", help="build the spherical partition index over test nodes")
    p.add_argument("--cache", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--partitions", type=int, default=50)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--theta", type=float, default=math.pi / 3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--no-weighting", action="store_true", help="uniform weights in every partition")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="local or global counterfactual-evidence search")
    p.add_argument("--cache", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--predictions")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--weights")
    p.add_argument("--edges")
    p.add_argument("--features")
    p.add_argument("--alpha", type=float, help="expected cache alpha")
    p.add_argument("--hops", type=int, help="expected cache hops")
    p.add_argument("--index")
    p.add_argument("--mode", choices=("exact", "indexed"), default="exact")
    p.add_argument("--strategy", choices=("per-node-top1", "full-pairwise"), default="per-node-top1")
    p.add_argument("--k", type=int, default=10)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--node", type=int, nargs="+")
    target.add_argument("--all", action="store_true")
    target.add_argument("--global", dest="global_", action="store_true")
    p.add_argument("--out")
    p.add_argument("--summary")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("analyze", help="metrics over query results")
    asub = p.add_subparsers(dest="analysis", required=True)

    q = asub.add_parser("as", help="average similarity of local results")
    q.add_argument("--results", required=True)
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--effective-k", action="store_true")
    q.add_argument("--exclude-empty", action="store_true")
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_as)

    q = asub.add_parser("ds", help="discrimination score per feature value")
    q.add_argument("--results", required=True)
    q.add_argument("--edges", required=True)
    q.add_argument("--features", required=True)
    q.add_argument("--predicate", action="append", default=[], help="f3=1, f2>=0.5 or name:f3=1")
    q.add_argument("--binary-features", action="store_true", help="add f=1 for every 0/1 column")
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--effective-k", action="store_true")
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_ds)

    q = asub.add_parser("error-curve", help="accuracy within the top-k global pairs")
    q.add_argument("--results", required=True)
    q.add_argument("--predictions", required=True)
    q.add_argument("--num-classes", type=int, required=True)
    q.add_argument("--num-nodes", type=int)
    q.add_argument("--k-grid", default="1,5,10,20,50,100")
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_error_curve)

    q = asub.add_parser("export-ce", help="write the nodes of the top-k global pairs")
    q.add_argument("--results", required=True)
    q.add_argument("--k", type=int, default=1200)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_analyze_export)
    return ap


def read_config(path) -> list[tuple[str, str]]:
    items = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        items.append((key.replace("_", "-"), value.strip('"').strip("'")))
    return items


def _merge_config(argv: list[str]) -> list[str]:
    """Insert config entries as flags right after the (sub)command so later explicit flags override them."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    cfg = read_config(argv[i + 1])
    argv = argv[:i] + argv[i + 2:]
    commands = {"aggregate", "predict", "build-index", "query", "analyze"}
    pos = next((j for j, a in enumerate(argv) if a in commands), None)
    if pos is None:
        return argv
    if argv[pos] == "analyze" and pos + 1 < len(argv):
        pos += 1
    tokens: list[str] = []
    for key, value in cfg:
        if value.lower() in ("true", "yes", "on"):
            tokens.append(f"--{key}")
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [f"--{key}", *value.split()]
    return argv[:pos + 1] + tokens + argv[pos + 1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_merge_config(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (GraphFormatError, StaleArtifact, PartialFailure, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"ce-forge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
