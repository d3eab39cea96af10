"""Command-line pipeline: gen, preprocess, train, embed, augment, retrieve, evaluate, localize, gradcheck.

Results go to stdout as JSON (or to the declared ``--out`` file), logs to
stderr. Exit status is 0 on success, 1 on domain or data errors and 2 on
usage errors. Every command that writes ``--out`` also writes a run manifest
next to it (``<out>.run.json``).
"""
from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
import time
from dataclasses import MISSING, asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import FeatureEncoderConfig, GraphEncoderConfig, ModelParams, dumps_params, init_params
from .errors import Pix2MapError
from .fileio import atomic_write_bytes, atomic_write_dir, atomic_write_text, coerce, read_config
from .lanegraph import (EgoPose, dumps_graph, extract_window, read_graph, read_segment_graph, resample_graph,
                        segment_to_node_graph)
from .metrics import MetricReport, evaluate_pair
from .retrieval import (LocalizationGrid, augment_library, build_library, heatmap_csv, heatmap_pgm, load_library,
                        pix2map, save_library, unimodal_retrieve)
from .synthdata import SynthConfig, generate, gradcheck_batch, load_dataset, save_dataset
from .training import TrainConfig, history_csv, loss_gradient_errors, train

log = logging.getLogger("pix2map")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _config_values(path) -> dict:
    return read_config(path) if path else {}


def _build(cls, values: dict, used: set, **fixed):
    """Instantiate a config dataclass from string values, taking only its own fields."""
    kwargs = dict(fixed)
    for f in fields(cls):
        if f.name in values and f.name not in fixed:
            like = f.default if f.default is not MISSING else 0
            try:
                kwargs[f.name] = coerce(values[f.name], like)
            except ValueError as exc:
                raise UsageError(f"config key {f.name!r}: {exc}") from None
            used.add(f.name)
    return cls(**kwargs)


def _check_unused(values, used, source):
    extra = sorted(set(values) - used)
    if extra:
        raise UsageError(f"{source}: unknown config keys {', '.join(extra)}")


def _write_manifest(args, inputs, outputs, started):
    if not getattr(args, "out", None):
        return
    manifest = {
        "command": args.command,
        "config": args.config,
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "f64": bool(args.f64),
        "duration_s": round(time.monotonic() - started, 3),
    }
    atomic_write_text(f"{args.out}.run.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _load_params(path, f64):
    params = ModelParams.load(path)
    return params.astype(np.float64) if f64 else params


def _read_features(path, index=None):
    """Feature rows from a dataset ``features.bin``, a ``.npy`` file or whitespace text (one row per line)."""
    path = Path(path)
    if path.is_dir():
        path = path / "features.bin"
    if path.suffix == ".bin":
        blob = path.read_bytes()
        count, dim = struct.unpack_from("<2i", blob)
        rows = np.frombuffer(blob, dtype="<f8", offset=8).reshape(count, dim).astype(np.float64)
    elif path.suffix == ".npy":
        rows = np.atleast_2d(np.load(path)).astype(np.float64)
    else:
        rows = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    if index is not None:
        if not 0 <= index < len(rows):
            raise UsageError(f"--index {index} out of range for {len(rows)} feature rows")
        rows = rows[index:index + 1]
    return rows


def _graph_inputs(paths, split=None):
    """(ids, graphs, features or None, poses) from dataset directories, graph directories or graph files."""
    ids, graphs, feats, poses = [], [], [], []
    paired = True
    for p in map(Path, paths):
        if (p / "split.json").exists():
            ds = load_dataset(p)
            samples = getattr(ds, split) if split else ds.all_samples()
            for s in samples:
                ids.append(s.id)
                graphs.append(s.graph)
                feats.append(s.features)
                poses.append(s.pose)
            continue
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        if not files:
            raise UsageError(f"{p}: no graph JSON files found")
        for f in files:
            ids.append(f.stem)
            graphs.append(read_graph(f))
            poses.append(None)
        paired = False
    return ids, graphs, (np.stack(feats) if paired and feats else None), poses


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    out = _require_out(args)
    values = _config_values(args.config)
    used = set()
    fixed = {"seed": args.seed} if args.seed is not None else {}
    cfg = _build(SynthConfig, values, used, **fixed)
    counts = tuple(int(values.get(k, d)) for k, d in (("n_train", 64), ("n_update", 16), ("n_expand", 16)))
    used |= {"n_train", "n_update", "n_expand"}
    _check_unused(values, used, args.config)
    city, split = generate(cfg, counts)
    atomic_write_dir(out, lambda tmp: save_dataset(split, tmp, city))
    log.info("wrote dataset to %s", out)
    _emit({"out": str(out), "train": counts[0], "map_update": counts[1], "map_expand": counts[2],
           "city_nodes": city.nodes.num_nodes, "city_edges": city.nodes.num_edges})
    return [], [out]


def cmd_preprocess(args):
    out = _require_out(args)
    seg = read_segment_graph(args.input)
    g = segment_to_node_graph(seg) if args.no_resample else resample_graph(seg, args.spacing)
    if args.pose is not None:
        x, y, h = args.pose
        g = extract_window(g, EgoPose((x, y), h), args.half_extent)
    atomic_write_text(out, dumps_graph(g))
    _emit({"out": str(out), "nodes": g.num_nodes, "edges": g.num_edges})
    return [args.input], [out]


def cmd_train(args):
    out = _require_out(args)
    ds = load_dataset(args.dataset)
    if not ds.train:
        raise UsageError(f"{args.dataset}: empty train split")
    values = _config_values(args.config)
    used = set()
    input_dim = len(ds.train[0].features)
    gcfg = _build(GraphEncoderConfig, values, used)
    fcfg = _build(FeatureEncoderConfig, values, used, input_dim=input_dim, embed_dim=gcfg.embed_dim)
    fixed = {}
    if args.seed is not None:
        fixed["seed"] = args.seed
    if args.f64:
        fixed["dtype"] = "float64"
    tcfg = _build(TrainConfig, values, used, **fixed)
    used.add("embed_dim")
    _check_unused(values, used, args.config)
    log.info("training on %d pairs for %d epochs", len(ds.train), tcfg.epochs)

    def progress(epoch, row, params):
        log.info("epoch %d total %.6f", epoch, row.total)

    result = train(ds.train, gcfg, fcfg, tcfg, callback=progress if args.verbose else None)
    hist_path = Path(args.history) if args.history else Path(f"{out}.history.csv")
    atomic_write_bytes(out, dumps_params(result.params))
    atomic_write_text(hist_path, history_csv(result.history))
    last = result.history[-1].to_dict() if result.history else {}
    _emit({"out": str(out), "history": str(hist_path), "epochs": tcfg.epochs, "final": last})
    return [args.dataset], [out, hist_path]


def cmd_embed(args):
    out = _require_out(args)
    params = _load_params(args.params, args.f64)
    ids, graphs, feats, poses = _graph_inputs(args.inputs, args.split)
    lib = build_library(graphs, params, features=feats, poses=poses, ids=ids)
    atomic_write_dir(out, lambda tmp: save_library(lib, tmp))
    _emit({"out": str(out), "entries": len(lib), "paired": feats is not None})
    return [args.params, *args.inputs], [out]


def cmd_augment(args):
    out = _require_out(args)
    if not args.params:
        raise UsageError("augment: --params is required to encode the new graphs")
    params = _load_params(args.params, args.f64)
    lib = load_library(args.library, params)
    ids, graphs, _, poses = _graph_inputs(args.inputs, args.split)
    new = augment_library(lib, graphs, params, ids=ids, poses=poses)
    atomic_write_dir(out, lambda tmp: save_library(new, tmp))
    _emit({"out": str(out), "entries": len(new), "added": len(new) - len(lib)})
    return [args.library, args.params, *args.inputs], [out]


def cmd_retrieve(args):
    params = _load_params(args.params, args.f64)
    lib = load_library(args.library, params)
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    k = args.k
    if k > len(lib):
        log.warning("k=%d exceeds library size %d; clamping", k, len(lib))
        k = len(lib)
    src = Path(args.features)
    if (src / "split.json").exists():
        ds = load_dataset(src)
        samples = getattr(ds, args.split) if args.split else ds.all_samples()
        qids = [s.id for s in samples]
        rows = np.stack([s.features for s in samples])
        if args.index is not None:
            qids, rows = qids[args.index:args.index + 1], rows[args.index:args.index + 1]
    else:
        rows = _read_features(src, args.index)
        qids = [f"q{i:05d}" for i in range(len(rows))] if args.index is None else [f"q{args.index:05d}"]
    queries = []
    top_graphs = {}
    for qid, f in zip(qids, rows):
        if args.mode == "unimodal":
            eid, g = unimodal_retrieve(f, lib, params)
            results = [{"id": eid}]
        else:
            ranked = pix2map(f, lib, k, params)
            results = ranked.to_list()
            eid = ranked.ids[0]
        top_graphs[qid] = lib.graph(eid)
        queries.append({"query": qid, "results": results})
    doc = {"k": k, "mode": args.mode, "queries": queries}
    outputs = []
    if args.out_graphs:
        def write(tmp):
            for qid, g in top_graphs.items():
                (tmp / f"{qid}.json").write_text(dumps_graph(g))
        atomic_write_dir(args.out_graphs, write)
        outputs.append(args.out_graphs)
    if args.out:
        atomic_write_text(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
        outputs.append(args.out)
    _emit(doc)
    return [args.params, args.library, args.features], outputs


def _graph_set(path):
    p = Path(path)
    if (p / "split.json").exists():
        p = p / "graphs"
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    return {f.stem: read_graph(f) for f in files}


def cmd_evaluate(args):
    retrieved, truths = _graph_set(args.retrieved), _graph_set(args.truth)
    common = sorted(set(retrieved) & set(truths))
    if not common:
        raise UsageError("evaluate: no retrieval file matches a truth file by name")
    missing = sorted(set(retrieved) - set(truths))
    if missing:
        log.warning("%d retrieved graphs have no truth and are skipped", len(missing))
    reports = [evaluate_pair(retrieved[k], truths[k], args.sigma) for k in common]
    doc = {"pairs": [{"id": k, **r.to_dict()} for k, r in zip(common, reports)],
           "mean": MetricReport.mean(reports).to_dict()}
    if args.out:
        atomic_write_text(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _emit(doc)
    return [args.retrieved, args.truth], [args.out] if args.out else []


def cmd_localize(args):
    out = _require_out(args)
    params = _load_params(args.params, args.f64)
    mp = Path(args.map)
    city = read_graph(mp / "city_nodes.json" if mp.is_dir() else mp)
    feats = _read_features(args.features, args.index if args.index is not None else 0)[0]
    cells = LocalizationGrid(city, params, args.stride, args.half_extent).score(feats)
    atomic_write_text(out, heatmap_csv(cells))
    outputs = [out]
    if args.pgm:
        atomic_write_bytes(args.pgm, heatmap_pgm(cells))
        outputs.append(args.pgm)
    best = max(cells, key=lambda c: c.score)
    _emit({"out": str(out), "cells": len(cells), "best": asdict(best)})
    return [args.params, args.map, args.features], outputs


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    gcfg = GraphEncoderConfig(layers=2, embed_dim=8, heads=2, max_nodes=8)
    fcfg = FeatureEncoderConfig(input_dim=6, hidden_dims=(8,), embed_dim=8)
    worst = {}
    for b in range(args.batches):
        params = init_params(gcfg, fcfg, seed=seed + b)
        batch = gradcheck_batch(rng, int(rng.integers(2, 5)), params)
        errs = loss_gradient_errors(batch, params, max_components=args.max_components, seed=seed + b)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    ok = all(v <= GRADCHECK_TOL for v in worst.values())
    _emit({"max_relative_error": worst, "tolerance": GRADCHECK_TOL, "batches": args.batches, "pass": ok})
    return [], [], (0 if ok else 1)


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text key = value config file")
    common.add_argument("--seed", type=int, help="seed for every random choice the command makes")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--f64", action="store_true", help="64-bit checking mode")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="pix2map", description="Cross-modal lane-graph retrieval pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic city and paired dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("preprocess", parents=[common], help="segment graph JSON to node graph JSON")
    p.add_argument("input")
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--no-resample", action="store_true", help="one node per polyline point")
    p.add_argument("--pose", type=float, nargs=3, metavar=("X", "Y", "HEADING"), help="crop an ego window at this pose")
    p.add_argument("--half-extent", type=float, default=20.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train both encoders on a dataset's train split")
    p.add_argument("dataset")
    p.add_argument("--history", help="history CSV path (default <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="build a retrieval library")
    p.add_argument("params")
    p.add_argument("inputs", nargs="+", help="dataset directories, graph directories or graph files")
    p.add_argument("--split", choices=("train", "map_update", "map_expand"), default="train")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("augment", parents=[common], help="add unpaired graphs to a library")
    p.add_argument("library")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--params")
    p.add_argument("--split", choices=("train", "map_update", "map_expand"))
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("retrieve", parents=[common], help="rank library graphs for feature queries")
    p.add_argument("params")
    p.add_argument("library")
    p.add_argument("features", help="dataset directory, features .bin/.npy or text file")
    p.add_argument("-k", "--k", type=int, default=1)
    p.add_argument("--split", choices=("train", "map_update", "map_expand"))
    p.add_argument("--index", type=int, help="query only this row")
    p.add_argument("--mode", choices=("pix2map", "unimodal"), default="pix2map")
    p.add_argument("--out-graphs", help="directory receiving the top-1 graph of every query")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common], help="metric reports for retrieved vs truth graphs")
    p.add_argument("retrieved")
    p.add_argument("truth")
    p.add_argument("--sigma", type=float, default=5.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("localize", parents=[common], help="score every grid pose of a city for one query")
    p.add_argument("params")
    p.add_argument("map", help="city node graph JSON or dataset directory")
    p.add_argument("features")
    p.add_argument("--stride", type=float, default=10.0)
    p.add_argument("--half-extent", type=float, default=20.0)
    p.add_argument("--index", type=int, help="feature row to use (default 0)")
    p.add_argument("--pgm", help="also write a grayscale PGM heatmap")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss gradient")
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--max-components", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    started = time.monotonic()
    try:
        result = args.func(args)
    except UsageError as exc:
        parser.exit(2, f"pix2map {args.command}: error: {exc}\n")
    except (Pix2MapError, ValueError, OSError, KeyError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.filename else str(exc)
        sys.stderr.write(f"pix2map {args.command}: error: {msg}\n")
        return 1
    inputs, outputs = result[:2]
    _write_manifest(args, inputs, outputs, started)
    return result[2] if len(result) > 2 else 0


if __name__ == "__main__":
    sys.exit(main())
