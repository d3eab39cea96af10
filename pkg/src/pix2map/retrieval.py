"""Exhaustive cosine retrieval over graph libraries.

A :class:`RetrievalLibrary` stores graphs with their precomputed embeddings
(and, for paired entries, the embedding of the sensor features recorded with
them). Queries go either way: features -> graphs (``pix2map``), graph ->
paired entries (``map2pix``), or features -> nearest stored features
(``unimodal_retrieve``, the single-modality baseline).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import ModelParams, feature_embeddings, graph_embeddings
from .errors import DomainError, GraphFormatError, StructuralError
from .lanegraph import DEFAULT_HALF_EXTENT, EgoPose, NodeGraph, dumps_graph, extract_window, read_graph

DEFAULT_HEADINGS = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)


@dataclass(frozen=True)
class LibraryEntry:
    id: str
    graph: NodeGraph
    graph_embedding: np.ndarray
    feature_embedding: np.ndarray | None = None
    pose: EgoPose | None = None

    @property
    def paired(self):
        return self.feature_embedding is not None


@dataclass(frozen=True)
class RankedResult:
    ids: tuple
    scores: tuple

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.scores))

    @property
    def top(self):
        return self.ids[0]

    def to_list(self):
        return [{"id": i, "score": s} for i, s in self]


class RetrievalLibrary:
    """Immutable, ordered collection of library entries.

    ``params`` is the model the embeddings were computed with; it is used to
    encode queries when none is passed explicitly.
    """

    def __init__(self, entries, params: ModelParams | None = None):
        entries = tuple(entries)
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise StructuralError(f"duplicate library id {dup!r}")
        dims = {e.graph_embedding.shape for e in entries} | {e.feature_embedding.shape for e in entries if e.paired}
        if len(dims) > 1:
            raise StructuralError(f"inconsistent embedding sizes {sorted(dims)}")
        self.entries = entries
        self.params = params
        self._index = {e.id: k for k, e in enumerate(entries)}
        d = next(iter(dims))[0] if dims else 0
        self.graph_matrix = _frozen(np.array([e.graph_embedding for e in entries]).reshape(len(entries), d))
        self.paired_rows = np.array([k for k, e in enumerate(entries) if e.paired], dtype=np.int64)
        self.feature_matrix = _frozen(np.array([entries[k].feature_embedding for k in self.paired_rows]).reshape(len(self.paired_rows), d))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.entries[self._index[key]]
        return self.entries[key]

    @property
    def ids(self):
        return tuple(e.id for e in self.entries)

    @property
    def embed_dim(self):
        return self.graph_matrix.shape[1]

    def graph(self, entry_id):
        return self[entry_id].graph


def _frozen(a):
    a.setflags(write=False)
    return a


def _default_ids(start, count):
    return [f"{k:06d}" for k in range(start, start + count)]


def build_library(graphs, params: ModelParams, features=None, poses=None, ids=None, batch_size=64) -> RetrievalLibrary:
    """Encode every graph (and paired feature vector) once."""
    graphs = list(graphs)
    if not graphs:
        raise DomainError("cannot build a library from zero graphs")
    ids = list(ids) if ids is not None else _default_ids(0, len(graphs))
    if len(ids) != len(graphs):
        raise StructuralError("ids and graphs differ in length")
    if len(set(ids)) != len(ids):
        raise StructuralError("duplicate library ids")
    gemb = _encode_graphs_with_ids(params, graphs, ids, batch_size)
    femb = [None] * len(graphs)
    if features is not None:
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if len(feats) != len(graphs):
            raise StructuralError("features and graphs differ in length")
        femb = list(feature_embeddings(params, feats))
    poses = list(poses) if poses is not None else [None] * len(graphs)
    entries = [LibraryEntry(i, g, ge, fe, p) for i, g, ge, fe, p in zip(ids, graphs, gemb, femb, poses)]
    return RetrievalLibrary(entries, params)


def _encode_graphs_with_ids(params, graphs, ids, batch_size):
    try:
        return graph_embeddings(params, graphs, batch_size=batch_size)
    except Exception:
        # re-encode one by one to name the failing entry
        for i, g in zip(ids, graphs):
            try:
                graph_embeddings(params, [g])
            except Exception as exc:
                raise type(exc)(f"entry {i!r}: {exc}") from exc
        raise


def augment_library(lib: RetrievalLibrary, graphs, params: ModelParams | None = None, ids=None, poses=None) -> RetrievalLibrary:
    """New library with unpaired ``graphs`` appended; existing entries are reused untouched."""
    graphs = list(graphs)
    if not graphs:
        return RetrievalLibrary(lib.entries, lib.params)
    params = params or lib.params
    if params is None:
        raise DomainError("augmenting needs model parameters to encode the new graphs")
    ids = list(ids) if ids is not None else [f"aug{k:06d}" for k in range(len(lib), len(lib) + len(graphs))]
    clash = set(ids) & set(lib.ids)
    if clash:
        raise StructuralError(f"id collision with existing entries: {sorted(clash)[:3]}")
    extra = build_library(graphs, params, poses=poses, ids=ids)
    return RetrievalLibrary(lib.entries + extra.entries, lib.params or params)


def _normalize(m):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("zero-norm embedding")
    return m / norms


def rank(query_embedding, matrix, ids, k) -> RankedResult:
    """Top-``k`` rows of ``matrix`` by cosine similarity, ties broken by id."""
    if len(ids) == 0:
        raise DomainError("empty library")
    if k < 1:
        raise DomainError("k must be >= 1")
    scores = _normalize(np.asarray(matrix, dtype=np.float64)) @ _normalize(np.asarray(query_embedding, dtype=np.float64))
    order = sorted(range(len(ids)), key=lambda r: (-scores[r], ids[r]))[:k]
    return RankedResult(tuple(ids[r] for r in order), tuple(float(scores[r]) for r in order))


def _params(lib, params):
    params = params or lib.params
    if params is None:
        raise DomainError("no model parameters available to encode the query")
    return params


def pix2map(features, lib: RetrievalLibrary, k: int = 1, params: ModelParams | None = None) -> RankedResult:
    """Rank library graphs against the embedding of a feature vector."""
    if len(lib) == 0:
        raise DomainError("empty library")
    q = feature_embeddings(_params(lib, params), np.asarray(features, dtype=np.float64))[0]
    return rank(q, lib.graph_matrix, lib.ids, k)


def map2pix(g: NodeGraph, lib: RetrievalLibrary, k: int = 1, params: ModelParams | None = None) -> RankedResult:
    """Rank paired library entries by similarity of their feature embedding to a graph."""
    if len(lib.paired_rows) == 0:
        raise DomainError("library has no paired feature embeddings")
    q = graph_embeddings(_params(lib, params), [g])[0]
    ids = [lib.entries[r].id for r in lib.paired_rows]
    return rank(q, lib.feature_matrix, ids, k)


def unimodal_retrieve(features, lib: RetrievalLibrary, params: ModelParams | None = None):
    """Graph of the paired entry whose stored feature embedding is closest to the query's."""
    if len(lib.paired_rows) == 0:
        raise DomainError("library has no paired feature embeddings")
    q = feature_embeddings(_params(lib, params), np.asarray(features, dtype=np.float64))[0]
    ids = [lib.entries[r].id for r in lib.paired_rows]
    best = rank(q, lib.feature_matrix, ids, 1).top
    return best, lib.graph(best)


# --------------------------------------------------------------------------
# localization


@dataclass(frozen=True)
class HeatmapCell:
    x: float
    y: float
    heading: float
    score: float


def pose_grid(bounds, stride, headings=DEFAULT_HEADINGS):
    """Candidate poses centred on the bounding box at ``stride`` spacing."""
    if not stride > 0:
        raise DomainError("stride must be positive")
    xmin, ymin, xmax, ymax = bounds
    cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    kx = int(math.floor((xmax - cx) / stride + 1e-9))
    ky = int(math.floor((ymax - cy) / stride + 1e-9))
    xs = cx + stride * np.arange(-kx, kx + 1)
    ys = cy + stride * np.arange(-ky, ky + 1)
    return [EgoPose((x, y), h) for y in ys for x in xs for h in headings]


def city_bounds(city_map: NodeGraph):
    p = city_map.positions
    return float(p[:, 0].min()), float(p[:, 1].min()), float(p[:, 0].max()), float(p[:, 1].max())


class LocalizationGrid:
    """Encoded windows of a city map at every candidate pose; reusable across queries."""

    def __init__(self, city_map: NodeGraph, params: ModelParams, stride, half_extent=DEFAULT_HALF_EXTENT,
                 headings=DEFAULT_HEADINGS, min_nodes=1):
        if city_map.num_nodes == 0:
            raise DomainError("empty city map")
        poses, windows = [], []
        for pose in pose_grid(city_bounds(city_map), stride, headings):
            w = extract_window(city_map, pose, half_extent)
            if w.num_nodes >= min_nodes:
                poses.append(pose)
                windows.append(w)
        if not windows:
            raise DomainError("no candidate pose produced a non-empty window")
        self.poses = poses
        self.windows = windows
        self.params = params
        self.embeddings = graph_embeddings(params, windows)

    def score(self, features):
        q = feature_embeddings(self.params, np.asarray(features, dtype=np.float64))[0]
        scores = _normalize(self.embeddings) @ _normalize(q)
        return [HeatmapCell(p.position[0], p.position[1], p.heading, float(s)) for p, s in zip(self.poses, scores)]


def localize(features, city_map: NodeGraph, stride: float, half_extent: float = DEFAULT_HALF_EXTENT,
             params: ModelParams | None = None, headings=DEFAULT_HEADINGS):
    """Cosine score of the query against the window at every grid pose of the city."""
    if params is None:
        raise DomainError("localize needs model parameters")
    return LocalizationGrid(city_map, params, stride, half_extent, headings).score(features)


def heatmap_csv(cells) -> str:
    lines = ["x,y,heading,score"]
    lines += [f"{c.x!r},{c.y!r},{c.heading!r},{c.score!r}" for c in cells]
    return "\n".join(lines) + "\n"


def heatmap_pgm(cells) -> bytes:
    """8-bit grayscale raster of the best score per grid position (north up)."""
    xs = sorted({c.x for c in cells})
    ys = sorted({c.y for c in cells})
    best = np.full((len(ys), len(xs)), -np.inf)
    xi = {x: k for k, x in enumerate(xs)}
    yi = {y: k for k, y in enumerate(ys)}
    for c in cells:
        r, q = yi[c.y], xi[c.x]
        best[r, q] = max(best[r, q], c.score)
    finite = best[np.isfinite(best)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    img = np.where(np.isfinite(best), np.round(255 * (best - lo) / span), 0).astype(np.uint8)[::-1]
    return f"P5\n{len(xs)} {len(ys)}\n255\n".encode() + img.tobytes()


# --------------------------------------------------------------------------
# persistence


def _write_matrix(path, m):
    m = np.ascontiguousarray(m, dtype="<f4")
    count, d = m.shape
    Path(path).write_bytes(struct.pack("<2i", count, d) + m.tobytes())


def _read_matrix(path):
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise GraphFormatError(f"{path}: truncated embedding file")
    count, d = struct.unpack_from("<2i", blob)
    if len(blob) != 8 + 4 * count * d:
        raise GraphFormatError(f"{path}: expected {count}x{d} floats")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, d).astype(np.float64)


def save_library(lib: RetrievalLibrary, directory, extra=None):
    """Write ``manifest.json``, the embedding matrices and one JSON file per graph."""
    directory = Path(directory)
    (directory / "graphs").mkdir(parents=True, exist_ok=True)
    manifest = {"embed_dim": lib.embed_dim, "entries": []}
    if extra:
        manifest.update(extra)
    for k, e in enumerate(lib.entries):
        fname = f"graphs/{k:06d}.json"
        (directory / fname).write_text(dumps_graph(e.graph))
        item = {"id": e.id, "paired": e.paired, "graph": fname}
        if e.pose is not None:
            item["pose"] = [e.pose.position[0], e.pose.position[1], e.pose.heading]
        manifest["entries"].append(item)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _write_matrix(directory / "graph_embeddings.bin", lib.graph_matrix)
    _write_matrix(directory / "feature_embeddings.bin", lib.feature_matrix)


def load_library(directory, params: ModelParams | None = None) -> RetrievalLibrary:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{directory}/manifest.json:{exc.lineno}: {exc.msg}") from None
    gm = _read_matrix(directory / "graph_embeddings.bin")
    fm = _read_matrix(directory / "feature_embeddings.bin")
    items = manifest["entries"]
    if len(gm) != len(items) or len(fm) != sum(1 for it in items if it["paired"]):
        raise GraphFormatError(f"{directory}: manifest and embedding files disagree")
    entries, f_row = [], 0
    for k, it in enumerate(items):
        fe = None
        if it["paired"]:
            fe, f_row = fm[f_row], f_row + 1
        pose = EgoPose(tuple(it["pose"][:2]), it["pose"][2]) if "pose" in it else None
        entries.append(LibraryEntry(it["id"], read_graph(directory / it["graph"]), gm[k], fe, pose))
    return RetrievalLibrary(entries, params)
