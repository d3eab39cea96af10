"""Lane graph data model: segment graphs, node graphs, resampling and windows.

Two representations of a street map are used throughout the package:

* :class:`SegmentGraph` -- lanes stored as polylines with lane-level
  successor links (the form HD maps are usually distributed in).
* :class:`NodeGraph` -- every centerline point is a vertex and a directed
  binary adjacency matrix encodes reachability along traffic flow.

Positions are in meters. Node graphs handed to the encoders live in an
ego frame where the vehicle sits at the origin and drives along ``+x``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline

from .errors import DomainError, GraphFormatError, StructuralError

DEFAULT_SPACING = 2.0
DEFAULT_HALF_EXTENT = 20.0
JOIN_MERGE_TOL = 1e-6
# graphs larger than this keep a sparse adjacency (whole-city maps)
DENSE_LIMIT = 4096


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LaneSegment:
    polyline: np.ndarray

    def __post_init__(self):
        pts = np.array(self.polyline, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise StructuralError("lane segment needs at least 2 points")
        step = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(step <= 0.0):
            raise StructuralError("lane segment has repeated consecutive points")
        object.__setattr__(self, "polyline", _frozen(pts))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1).sum())


@dataclass(frozen=True)
class SegmentGraph:
    segments: tuple
    successors: tuple = ()

    def __post_init__(self):
        segs = tuple(s if isinstance(s, LaneSegment) else LaneSegment(s) for s in self.segments)
        pairs = tuple((int(a), int(b)) for a, b in self.successors)
        n = len(segs)
        for a, b in pairs:
            if not (0 <= a < n and 0 <= b < n):
                raise StructuralError(f"successor pair ({a}, {b}) references a missing segment (have {n})")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "successors", pairs)


@dataclass(frozen=True, eq=False)
class NodeGraph:
    """Lane nodes with ego-frame positions and a directed adjacency matrix.

    ``adjacency[i, j] == 1`` means an edge from node ``i`` to node ``j``.
    Construction does not validate; call :func:`validate` for a report.
    """

    positions: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        if sparse.issparse(self.adjacency):
            adj = sparse.csr_matrix(self.adjacency, dtype=np.uint8)
        else:
            adj = np.array(self.adjacency)
            if adj.size == 0 and len(pos) == 0:
                adj = adj.reshape(0, 0)
            if adj.dtype == bool:
                adj = adj.astype(np.uint8)
            _frozen(adj)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_edges(cls, positions, edges):
        pos = np.array(positions, dtype=np.float64).reshape(-1, 2)
        n = len(pos)
        e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
            raise StructuralError(f"edge ({bad[0]}, {bad[1]}) out of range for {n} nodes")
        if n > DENSE_LIMIT:
            adj = sparse.csr_matrix((np.ones(len(e), dtype=np.uint8), (e[:, 0], e[:, 1])), shape=(n, n))
            adj.data[:] = 1
            return cls(pos, adj)
        adj = np.zeros((n, n), dtype=np.uint8)
        adj[e[:, 0], e[:, 1]] = 1
        return cls(pos, adj)

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.adjacency)

    def dense_adjacency(self):
        return self.adjacency.toarray() if self.is_sparse else self.adjacency

    def subgraph(self, keep):
        """Induced subgraph on node indices ``keep`` (always dense)."""
        keep = np.asarray(keep, dtype=np.int64)
        if self.is_sparse:
            adj = self.adjacency[keep][:, keep].toarray()
        else:
            adj = self.adjacency[np.ix_(keep, keep)]
        return NodeGraph(self.positions[keep], adj)

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        if self.is_sparse:
            return int(self.adjacency.count_nonzero())
        return int(np.count_nonzero(self.adjacency))

    def edges(self):
        """Edge list ``[(i, j), ...]`` in lexicographic order."""
        if self.is_sparse:
            coo = self.adjacency.tocoo()
            order = np.lexsort((coo.col, coo.row))
            return list(zip(coo.row[order].tolist(), coo.col[order].tolist()))
        src, dst = np.nonzero(self.adjacency)
        return list(zip(src.tolist(), dst.tolist()))

    def permuted(self, perm):
        """Return the same graph with nodes reordered: new node k is old node perm[k]."""
        return self.subgraph(perm)

    def __eq__(self, other):
        if not isinstance(other, NodeGraph):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.dense_adjacency(), other.dense_adjacency())
        )

    __hash__ = None


@dataclass(frozen=True)
class EgoPose:
    position: tuple = (0.0, 0.0)
    heading: float = 0.0

    def __post_init__(self):
        x, y = self.position
        object.__setattr__(self, "position", (float(x), float(y)))
        object.__setattr__(self, "heading", wrap_angle(self.heading))


def wrap_angle(theta):
    """Map an angle to [-pi, pi)."""
    return float((theta + math.pi) % (2.0 * math.pi) - math.pi)


# --------------------------------------------------------------------------
# conversions


def segment_to_node_graph(seg: SegmentGraph) -> NodeGraph:
    """Turn each polyline point into a node.

    Successive points in a polyline are joined by a directed edge, and each
    successor pair ``(a, b)`` adds an edge from the last node of ``a`` to
    the first node of ``b``. Nodes are ordered segment by segment.
    """
    return _assemble([s.polyline for s in seg.segments], seg.successors, merge_tol=None)


def _assemble(polylines, successors, merge_tol):
    offsets = np.cumsum([0] + [len(p) for p in polylines])
    n = int(offsets[-1])
    positions = np.concatenate(polylines, axis=0) if polylines else np.zeros((0, 2))
    edges = []
    for k, p in enumerate(polylines):
        base = offsets[k]
        edges.extend((base + i, base + i + 1) for i in range(len(p) - 1))
    joins = []
    for a, b in successors:
        src, dst = int(offsets[a + 1] - 1), int(offsets[b])
        if merge_tol is not None and np.linalg.norm(positions[src] - positions[dst]) <= merge_tol:
            joins.append((src, dst))
        else:
            edges.append((src, dst))

    if not joins:
        return NodeGraph.from_edges(positions, edges)

    # union-find over coincident join endpoints; representative = smallest index
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in joins:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    keep = sorted(set(roots))
    new_index = {r: k for k, r in enumerate(keep)}
    remap = [new_index[r] for r in roots]
    merged = [(remap[i], remap[j]) for i, j in edges if remap[i] != remap[j]]
    return NodeGraph.from_edges(positions[keep], merged)


def _arc_length_targets(length, spacing):
    n_full = int(math.floor(length / spacing + 1e-9))
    targets = spacing * np.arange(n_full + 1, dtype=np.float64)
    if length - targets[-1] > 1e-9 * max(1.0, length):
        targets = np.append(targets, length)
    else:
        targets[-1] = length
    return targets


def _resample_linear(pts, spacing):
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    targets = _arc_length_targets(cum[-1], spacing)
    out = np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])
    out[0], out[-1] = pts[0], pts[-1]
    return out


def _resample_spline(pts, spacing, oversample=64):
    # chord-length parameterized cubic spline, then inverted arc length
    t = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    spline = CubicSpline(t, pts, axis=0)
    deriv = spline.derivative()
    fine = np.linspace(0.0, t[-1], oversample * (len(t) - 1) + 1)
    # 5-point Gauss-Legendre per fine interval
    gx, gw = np.polynomial.legendre.leggauss(5)
    a, b = fine[:-1], fine[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    nodes = mid[:, None] + half[:, None] * gx[None, :]
    speed = np.linalg.norm(deriv(nodes.ravel()), axis=1).reshape(nodes.shape)
    seg_len = half * (speed @ gw)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    length = cum[-1]
    if length <= 0.0:
        raise StructuralError("zero-length lane segment")
    targets = _arc_length_targets(length, spacing)
    params = np.interp(targets, cum, fine)
    out = spline(params)
    out[0], out[-1] = pts[0], pts[-1]
    return out


def resample_polyline(polyline, spacing=DEFAULT_SPACING):
    """Resample one polyline at (approximately) equal arc-length steps.

    Polylines with 4 or more points are fit with a cubic spline; shorter ones
    fall back to piecewise-linear interpolation. Both endpoints are kept
    exactly and the final step may be shorter than ``spacing``.
    """
    if spacing <= 0:
        raise DomainError("spacing must be positive")
    pts = np.asarray(polyline, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2 or np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() <= 0.0:
        raise StructuralError("zero-length lane segment")
    if len(pts) < 4:
        return _resample_linear(pts, spacing)
    return _resample_spline(pts, spacing)


def resample_graph(seg: SegmentGraph, spacing: float = DEFAULT_SPACING, merge_tol: float = JOIN_MERGE_TOL) -> NodeGraph:
    """Resample every lane at ``spacing`` meters and rebuild the node graph.

    Join endpoints closer than ``merge_tol`` are merged into one node so that
    successor links do not create zero-length edges.
    """
    if spacing <= 0:
        raise DomainError("spacing must be positive")
    polylines = [resample_polyline(s.polyline, spacing) for s in seg.segments]
    return _assemble(polylines, seg.successors, merge_tol=merge_tol)


# --------------------------------------------------------------------------
# ego-frame windows


def to_ego_frame(points, pose: EgoPose):
    """Translate by -pose.position and rotate by -pose.heading."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.asarray(points, dtype=np.float64).reshape(-1, 2) - np.asarray(pose.position)
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def from_ego_frame(points, pose: EgoPose):
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1]]) + np.asarray(pose.position)


def extract_window(city: NodeGraph, pose: EgoPose, half_extent: float = DEFAULT_HALF_EXTENT) -> NodeGraph:
    """Crop the square window of side ``2 * half_extent`` around ``pose``.

    Nodes come back in the ego frame. Edges to cropped nodes are dropped.
    """
    if half_extent <= 0:
        raise DomainError("half_extent must be positive")
    ego = to_ego_frame(city.positions, pose)
    keep = np.flatnonzero((np.abs(ego[:, 0]) <= half_extent) & (np.abs(ego[:, 1]) <= half_extent))
    return NodeGraph(ego[keep], city.subgraph(keep).adjacency)


# --------------------------------------------------------------------------
# validation and file I/O


def validate(g: NodeGraph) -> list[str]:
    """List every invariant violation; an empty list means the graph is valid."""
    problems = []
    n = len(g.positions)
    if not np.all(np.isfinite(g.positions)):
        problems.append("positions contain non-finite values")
    if g.is_sparse:
        adj = g.adjacency
        if adj.shape != (n, n):
            return problems + [f"adjacency shape {adj.shape} does not match {n} nodes"]
        if adj.nnz and not np.all(adj.data == 1):
            problems.append("adjacency has entries outside {0, 1}")
        if n and np.any(adj.diagonal() != 0):
            problems.append("adjacency diagonal is not zero")
        return problems
    adj = np.asarray(g.adjacency)
    if adj.ndim != 2 or adj.shape != (n, n):
        problems.append(f"adjacency shape {adj.shape} does not match {n} nodes")
        return problems
    if not np.all((adj == 0) | (adj == 1)):
        problems.append("adjacency has entries outside {0, 1}")
    if n and np.any(np.diagonal(adj) != 0):
        problems.append("adjacency diagonal is not zero")
    return problems


def _fmt(x):
    x = float(x)
    if x == 0.0:
        return "0.0"
    return repr(x)


def dumps_graph(g: NodeGraph) -> str:
    """Canonical JSON text for a node graph (edges sorted, round-trip floats)."""
    nodes = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in g.positions)
    edges = ",".join(f"[{i},{j}]" for i, j in g.edges())
    return f'{{"nodes":[{nodes}],"edges":[{edges}]}}\n'


def _parse_json(text, source):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1][:120] if 0 < exc.lineno <= len(lines) else ""
        raise GraphFormatError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}: {context!r}") from None


def loads_graph(text: str, source: str = "<string>") -> NodeGraph:
    doc = _parse_json(text, source)
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise GraphFormatError(f"{source}: expected an object with 'nodes' and 'edges'")
    try:
        pos = np.array(doc["nodes"], dtype=np.float64)
    except (TypeError, ValueError):
        pos = None
    if pos is None or (pos.size and (pos.ndim != 2 or pos.shape[1] != 2)):
        raise GraphFormatError(f"{source}: 'nodes' must be a list of [x, y] pairs")
    pos = pos.reshape(-1, 2)
    n = len(pos)
    adj = np.zeros((n, n), dtype=np.uint8)
    for k, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise GraphFormatError(f"{source}: edges[{k}] must be a pair of integers")
        i, j = e
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"{source}: edges[{k}] = {e} out of range for {n} nodes")
        if i == j:
            raise GraphFormatError(f"{source}: edges[{k}] = {e} is a self-loop")
        adj[i, j] = 1
    return NodeGraph(pos, adj)


def write_graph(g: NodeGraph, path) -> None:
    Path(path).write_text(dumps_graph(g))


def read_graph(path) -> NodeGraph:
    path = Path(path)
    return loads_graph(path.read_text(), source=str(path))


def dumps_segment_graph(seg: SegmentGraph) -> str:
    segs = ",".join("[" + ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in s.polyline) + "]" for s in seg.segments)
    succ = ",".join(f"[{a},{b}]" for a, b in sorted(seg.successors))
    return f'{{"segments":[{segs}],"successors":[{succ}]}}\n'


def loads_segment_graph(text: str, source: str = "<string>") -> SegmentGraph:
    doc = _parse_json(text, source)
    if not isinstance(doc, dict) or "segments" not in doc:
        raise GraphFormatError(f"{source}: expected an object with 'segments' and 'successors'")
    try:
        return SegmentGraph(tuple(LaneSegment(s) for s in doc["segments"]), tuple(tuple(p) for p in doc.get("successors", [])))
    except (StructuralError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{source}: {exc}") from None


def write_segment_graph(seg: SegmentGraph, path) -> None:
    Path(path).write_text(dumps_segment_graph(seg))


def read_segment_graph(path) -> SegmentGraph:
    path = Path(path)
    return loads_segment_graph(path.read_text(), source=str(path))
