"""Seeded synthetic cities and paired (features, graph) samples.

A city is a jittered grid of two-way streets. Every street carries one lane
per direction; intersections connect each incoming lane to every outgoing
lane of the other streets (straight, left and right turns). A fraction of
streets is bowed and a fraction of intersections uses arc-shaped turn
connectors instead of bent chords.

The "sensor" side of a sample is a fixed random projection of a soft
occupancy raster of the ego window plus Gaussian noise, so both modalities
describe the same local geometry without any image pipeline.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .encoders import relu_margin
from .errors import DomainError, GraphFormatError
from .lanegraph import (EgoPose, NodeGraph, SegmentGraph, dumps_graph, dumps_segment_graph, extract_window,
                        read_graph, read_segment_graph, resample_graph, validate)
from .training import PairedSample, loss_gradient_resolution


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    grid_rows: int = 6
    grid_cols: int = 8
    block_size: float = 70.0
    lane_jitter: float = 0.15
    curve_fraction: float = 0.3
    feature_dim: int = 128
    feature_noise: float = 0.05
    projection_seed: int = 0
    block_jitter: float = 0.15
    drop_fraction: float = 0.1
    lane_offset: float = 1.75
    setback: float = 7.0
    lane_points: int = 10
    spacing: float = 2.0
    half_extent: float = 20.0
    raster_size: int = 16
    max_nodes: int = 256
    min_separation: float = 4.0

    def __post_init__(self):
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise DomainError("grid needs at least 2 rows and 2 columns")
        if self.block_size <= 2 * self.setback + 1.0:
            raise DomainError("block_size too small for the intersection setback")
        if min(self.lane_jitter, self.feature_noise, self.block_jitter, self.drop_fraction) < 0:
            raise DomainError("noise and jitter must be non-negative")
        if not 0 <= self.curve_fraction <= 1 or self.block_jitter >= 0.5:
            raise DomainError("curve_fraction must lie in [0, 1] and block_jitter below 0.5")
        if self.feature_dim < 1 or self.raster_size < 2 or self.lane_points < 2:
            raise DomainError("feature_dim, raster_size and lane_points must be positive")


@dataclass
class City:
    segments: SegmentGraph
    bounds: tuple
    spacing: float = 2.0
    # segment index -> "lane" or "connector"
    kinds: tuple = ()

    @cached_property
    def nodes(self) -> NodeGraph:
        return resample_graph(self.segments, self.spacing)

    @cached_property
    def node_headings(self) -> np.ndarray:
        """Driving direction at each node (from its first outgoing edge, else its incoming one)."""
        g = self.nodes
        adj = g.adjacency.tocsr() if g.is_sparse else g.adjacency
        heading = np.zeros(g.num_nodes)
        src, dst = (adj.nonzero())
        first_out = {}
        first_in = {}
        for s, d in zip(src.tolist(), dst.tolist()):
            first_out.setdefault(s, d)
            first_in.setdefault(d, s)
        p = g.positions
        for v in range(g.num_nodes):
            if v in first_out:
                d = p[first_out[v]] - p[v]
            elif v in first_in:
                d = p[v] - p[first_in[v]]
            else:
                continue
            heading[v] = math.atan2(d[1], d[0])
        return heading


@dataclass
class DatasetSplit:
    train: list
    map_update: list
    map_expand: list
    train_region: tuple = ()
    config: SynthConfig | None = None

    def all_samples(self):
        return self.train + self.map_update + self.map_expand


# --------------------------------------------------------------------------
# city generation


def _bow(u, t0, t1):
    s = np.clip((u - t0) / (t1 - t0), 0.0, 1.0)
    return np.sin(np.pi * s) ** 2, np.pi * np.sin(2 * np.pi * s) / (t1 - t0)


def _street_lanes(a, b, amp, cfg, rng):
    """Two opposing lanes along the (optionally bowed) street from a to b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = float(np.linalg.norm(b - a))
    axis = (b - a) / length
    left = np.array([-axis[1], axis[0]])
    t0, t1 = cfg.setback / length, 1.0 - cfg.setback / length
    u = np.linspace(t0, t1, cfg.lane_points)
    bulge, dbulge = _bow(u, t0, t1)
    center = a + np.outer(u, b - a) + np.outer(amp * bulge, left)
    tangent = np.outer(np.ones_like(u), b - a) + np.outer(amp * dbulge, left)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    right = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    fwd = center + cfg.lane_offset * right
    bwd = (center - cfg.lane_offset * right)[::-1]
    lanes = []
    for lane in (fwd, bwd):
        lane = lane.copy()
        if cfg.lane_jitter > 0 and len(lane) > 2:
            lane[1:-1] += rng.normal(0.0, cfg.lane_jitter, size=(len(lane) - 2, 2))
        lanes.append(lane)
    return lanes


def _connector(p_in, d_in, p_out, d_out, arc):
    if abs(d_in @ d_out) > 0.9:
        return np.array([p_in, p_out])
    # corner where the incoming and outgoing lane axes cross
    m = np.column_stack([d_in, -d_out])
    s, _ = np.linalg.solve(m, p_out - p_in)
    corner = p_in + s * d_in
    if not arc:
        # bent chord; a true L would retrace the straight-through connector
        mid = 0.5 * (p_in + p_out)
        return np.array([p_in, mid + 0.4 * (corner - mid), p_out])
    t = np.linspace(0.0, 1.0, 7)[:, None]
    return (1 - t) ** 2 * p_in + 2 * (1 - t) * t * corner + t ** 2 * p_out


def gen_city(cfg: SynthConfig) -> City:
    """Generate a jittered street grid; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    bj = cfg.block_jitter * cfg.block_size
    xs = cfg.block_size * np.arange(cfg.grid_cols) + rng.uniform(-bj, bj, cfg.grid_cols)
    ys = cfg.block_size * np.arange(cfg.grid_rows) + rng.uniform(-bj, bj, cfg.grid_rows)
    node = {(i, j): np.array([xs[j], ys[i]]) for i in range(cfg.grid_rows) for j in range(cfg.grid_cols)}

    streets = []
    for i in range(cfg.grid_rows):
        for j in range(cfg.grid_cols):
            if j + 1 < cfg.grid_cols:
                streets.append(((i, j), (i, j + 1)))
            if i + 1 < cfg.grid_rows:
                streets.append(((i, j), (i + 1, j)))

    polylines, kinds, succ = [], [], []
    incoming, outgoing = {}, {}
    for k, (a, b) in enumerate(streets):
        drop, bowed, amp_frac, sign = rng.random(), rng.random(), rng.uniform(0.08, 0.18), rng.choice([-1.0, 1.0])
        if drop < cfg.drop_fraction:
            continue
        length = float(np.linalg.norm(node[b] - node[a]))
        amp = sign * amp_frac * length if bowed < cfg.curve_fraction else 0.0
        fwd, bwd = _street_lanes(node[a], node[b], amp, cfg, rng)
        for lane, start, end in ((fwd, a, b), (bwd, b, a)):
            idx = len(polylines)
            polylines.append(lane)
            kinds.append("lane")
            d_end = lane[-1] - lane[-2] if cfg.lane_jitter == 0 else (node[end] - node[start])
            d_start = lane[1] - lane[0] if cfg.lane_jitter == 0 else (node[end] - node[start])
            incoming.setdefault(end, []).append((idx, k, d_end / np.linalg.norm(d_end)))
            outgoing.setdefault(start, []).append((idx, k, d_start / np.linalg.norm(d_start)))

    arc_style = {key: rng.random() < cfg.curve_fraction for key in sorted(node)}
    for key in sorted(node):
        for lin, street_in, d_in in incoming.get(key, []):
            for lout, street_out, d_out in outgoing.get(key, []):
                if street_in == street_out:
                    continue
                conn = _connector(polylines[lin][-1], d_in, polylines[lout][0], d_out, arc_style[key])
                idx = len(polylines)
                polylines.append(conn)
                kinds.append("connector")
                succ += [(lin, idx), (idx, lout)]

    pts = np.concatenate(polylines)
    bounds = (float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()))
    return City(SegmentGraph(tuple(polylines), tuple(succ)), bounds, cfg.spacing, tuple(kinds))


# --------------------------------------------------------------------------
# samples


def projection_matrix(cfg: SynthConfig) -> np.ndarray:
    cells = cfg.raster_size * cfg.raster_size
    rng = np.random.default_rng(cfg.projection_seed)
    return rng.normal(0.0, 1.0 / math.sqrt(cells), size=(cfg.feature_dim, cells))


def occupancy_raster(g: NodeGraph, cfg: SynthConfig) -> np.ndarray:
    """Soft ``R x R`` occupancy of nodes and edge midpoints, bilinearly splatted."""
    r, he = cfg.raster_size, cfg.half_extent
    pts = [g.positions]
    src, dst = np.nonzero(g.dense_adjacency())
    if len(src):
        pts.append(0.5 * (g.positions[src] + g.positions[dst]))
    pts = np.concatenate(pts)
    cell = 2.0 * he / r
    u = (pts + he) / cell - 0.5
    i0 = np.floor(u).astype(int)
    f = u - i0
    acc = np.zeros((r + 1, r + 1))
    for dx in (0, 1):
        for dy in (0, 1):
            w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
            ix, iy = np.clip(i0[:, 0] + dx, 0, r), np.clip(i0[:, 1] + dy, 0, r)
            np.add.at(acc, (iy, ix), w)
    return 1.0 - np.exp(-acc[:r, :r])


def window_features(g: NodeGraph, cfg: SynthConfig, noise_seed=None, projection=None) -> np.ndarray:
    proj = projection if projection is not None else projection_matrix(cfg)
    feats = proj @ occupancy_raster(g, cfg).ravel()
    if cfg.feature_noise > 0:
        rng = np.random.default_rng(noise_seed if noise_seed is not None else cfg.seed)
        feats = feats + rng.normal(0.0, cfg.feature_noise, size=feats.shape)
    return feats


def gen_paired_sample(city: City, pose: EgoPose, cfg: SynthConfig, noise_seed=None, sample_id="", projection=None) -> PairedSample:
    """Window of the city at ``pose`` plus its synthetic sensor features."""
    g = extract_window(city.nodes, pose, cfg.half_extent)
    if g.num_nodes == 0:
        raise DomainError(f"empty window at pose {pose}")
    return PairedSample(window_features(g, cfg, noise_seed, projection), g, sample_id, pose)


def sample_poses(city: City, cfg: SynthConfig, count, rng, x_range=(-np.inf, np.inf), avoid=(), max_tries=None):
    """Random on-lane poses with ``x`` in ``x_range`` and usable windows.

    Poses closer than ``cfg.min_separation`` to an accepted pose (or to one in
    ``avoid``) with a heading within 45 degrees are rejected.
    """
    pos = city.nodes.positions
    candidates = np.flatnonzero((pos[:, 0] > x_range[0]) & (pos[:, 0] < x_range[1]))
    if len(candidates) == 0:
        raise DomainError("no lane nodes in the requested region")
    headings = city.node_headings
    accepted = list(avoid)
    poses = []
    tries, max_tries = 0, max_tries or 200 * count + 1000
    while len(poses) < count:
        tries += 1
        if tries > max_tries:
            raise DomainError(f"could only place {len(poses)} of {count} poses; region too small")
        v = int(candidates[rng.integers(len(candidates))])
        pose = EgoPose(tuple(pos[v]), headings[v])
        if any(_too_close(pose, q, cfg.min_separation) for q in accepted):
            continue
        w = extract_window(city.nodes, pose, cfg.half_extent)
        if w.num_nodes < 2 or w.num_nodes > cfg.max_nodes:
            continue
        poses.append(pose)
        accepted.append(pose)
    return poses


def _too_close(p, q, sep):
    dx, dy = p.position[0] - q.position[0], p.position[1] - q.position[1]
    dh = abs((p.heading - q.heading + math.pi) % (2 * math.pi) - math.pi)
    return dx * dx + dy * dy < sep * sep and dh < math.pi / 4


SPLIT_CODES = {"train": 1, "map_update": 2, "map_expand": 3}


def make_splits(city: City, cfg: SynthConfig, counts=(64, 16, 16)) -> DatasetSplit:
    """Train and MapUpdate poses from the left half of the city, MapExpand from the right.

    MapExpand poses keep a margin of one window half-extent from the split
    line so their windows do not overlap training geometry.
    """
    n_train, n_update, n_expand = counts
    xmin, ymin, xmax, ymax = city.bounds
    x_mid = 0.5 * (xmin + xmax)
    if x_mid + cfg.half_extent >= xmax:
        raise DomainError("city too small to hold disjoint train and expand regions")
    proj = projection_matrix(cfg)
    out = {}
    ranges = {"train": (-np.inf, x_mid), "map_update": (-np.inf, x_mid), "map_expand": (x_mid + cfg.half_extent, np.inf)}
    for name, count in zip(("train", "map_update", "map_expand"), counts):
        code = SPLIT_CODES[name]
        rng = np.random.default_rng([cfg.seed, code])
        poses = sample_poses(city, cfg, count, rng, ranges[name])
        out[name] = [
            gen_paired_sample(city, p, cfg, noise_seed=[cfg.seed, code, k], sample_id=f"{name}-{k:05d}", projection=proj)
            for k, p in enumerate(poses)
        ]
    return DatasetSplit(out["train"], out["map_update"], out["map_expand"], (xmin, ymin, x_mid, ymax), cfg)


def generate(cfg: SynthConfig, counts=(64, 16, 16)):
    city = gen_city(cfg)
    return city, make_splits(city, cfg, counts)


def random_node_graph(rng, n, edge_prob=0.2, extent=20.0) -> NodeGraph:
    """Unstructured random graph: uniform positions in the window, Bernoulli edges."""
    pos = rng.uniform(-extent, extent, size=(n, 2))
    adj = (rng.random((n, n)) < edge_prob).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return NodeGraph(pos, adj)


def random_batch(rng, size, feature_dim, n_range=(3, 8), edge_prob=0.3):
    """Random paired samples (unrelated features and graphs) for gradient checks."""
    return [PairedSample(rng.normal(size=feature_dim), random_node_graph(rng, int(rng.integers(n_range[0], n_range[1] + 1)), edge_prob),
                         f"r{k}") for k in range(size)]


def smooth_random_batch(rng, size, params, margin=1e-3, n_range=(3, 8), edge_prob=0.3, max_tries=1000):
    """Like :func:`random_batch`, redrawn until no rectifier input lies within ``margin`` of its kink."""
    for _ in range(max_tries):
        batch = random_batch(rng, size, params.feature_cfg.input_dim, n_range, edge_prob)
        if relu_margin(params, [s.graph for s in batch], np.stack([s.features for s in batch])) > margin:
            return batch
    raise DomainError(f"no batch with rectifier margin {margin} in {max_tries} draws")


def gradcheck_batch(rng, size, params, step=1e-5, tol=1e-4, margin=1e-3, n_range=(3, 8), edge_prob=0.3, max_tries=1000):
    """A :func:`smooth_random_batch` on which a central-difference check at ``step`` can resolve ``tol``.

    Batches where some loss gradient component is within ``1 / tol`` of the
    rounding floor of the difference quotient are redrawn, as are batches on
    which the loss is undefined. Only the analytic gradient is consulted,
    never the finite differences themselves.
    """
    for _ in range(max_tries):
        batch = smooth_random_batch(rng, size, params, margin, n_range, edge_prob, max_tries)
        try:
            if loss_gradient_resolution(batch, params, step=step) >= 1.0 / tol:
                return batch
        except DomainError:
            # an all-zero embedding leaves the loss undefined; draw again
            continue
    raise DomainError(f"no batch resolvable to {tol} at step {step} in {max_tries} draws")


# --------------------------------------------------------------------------
# persistence


def _config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)} if cfg is not None else None


def save_dataset(split: DatasetSplit, directory, city: City | None = None):
    """Graph JSON per sample, ``features.bin`` (float64 rows) and ``split.json``."""
    directory = Path(directory)
    (directory / "graphs").mkdir(parents=True, exist_ok=True)
    samples = split.all_samples()
    for s in samples:
        (directory / "graphs" / f"{s.id}.json").write_text(dumps_graph(s.graph))
    feats = np.ascontiguousarray(np.stack([s.features for s in samples]), dtype="<f8")
    (directory / "features.bin").write_bytes(struct.pack("<2i", *feats.shape) + feats.tobytes())
    doc = {
        "train": [s.id for s in split.train],
        "map_update": [s.id for s in split.map_update],
        "map_expand": [s.id for s in split.map_expand],
        "order": [s.id for s in samples],
        "poses": {s.id: [s.pose.position[0], s.pose.position[1], s.pose.heading] for s in samples if s.pose is not None},
        "train_region": list(split.train_region),
        "config": _config_dict(split.config),
    }
    (directory / "split.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if city is not None:
        (directory / "city.json").write_text(dumps_segment_graph(city.segments))
        (directory / "city_nodes.json").write_text(dumps_graph(city.nodes))


def load_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "split.json").read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{directory}/split.json:{exc.lineno}: {exc.msg}") from None
    blob = (directory / "features.bin").read_bytes()
    count, dim = struct.unpack_from("<2i", blob)
    if len(blob) != 8 + 8 * count * dim or count != len(doc["order"]):
        raise GraphFormatError(f"{directory}/features.bin does not match split.json")
    feats = np.frombuffer(blob, dtype="<f8", offset=8).reshape(count, dim).astype(np.float64)
    row = {sid: k for k, sid in enumerate(doc["order"])}

    def load(sid):
        p = doc["poses"].get(sid)
        pose = EgoPose(tuple(p[:2]), p[2]) if p is not None else None
        return PairedSample(feats[row[sid]], read_graph(directory / "graphs" / f"{sid}.json"), sid, pose)

    cfg = SynthConfig(**doc["config"]) if doc.get("config") else None
    return DatasetSplit([load(s) for s in doc["train"]], [load(s) for s in doc["map_update"]],
                        [load(s) for s in doc["map_expand"]], tuple(doc.get("train_region", ())), cfg)


def load_city_nodes(directory) -> NodeGraph:
    return read_graph(Path(directory) / "city_nodes.json")
