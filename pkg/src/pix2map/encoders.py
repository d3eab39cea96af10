"""Graph and feature encoders mapping both modalities into one embedding space.

The graph encoder is a post-norm transformer over lane nodes whose attention
is restricted by the lane adjacency; output node states are mean pooled into
a single vector. The feature encoder is a plain ReLU MLP over fixed-length
sensor feature vectors (early fusion: views concatenated; late fusion: shared
MLP per view, then averaged).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CapacityError, DomainError, GraphFormatError, StructuralError
from .lanegraph import DEFAULT_HALF_EXTENT, NodeGraph

MAGIC = b"P2M1"


@dataclass(frozen=True)
class GraphEncoderConfig:
    layers: int = 7
    embed_dim: int = 64
    heads: int = 4
    use_attention_mask: bool = True
    use_adjacency_input: bool = True
    use_positional_encoding: bool = False
    mask_self_loops: bool = True
    mask_symmetrize: bool = True
    max_nodes: int = 256
    ffn_mult: int = 2
    pos_dim: int = 16
    half_extent: float = DEFAULT_HALF_EXTENT

    def __post_init__(self):
        if self.layers < 1:
            raise DomainError("graph encoder needs at least one layer")
        if self.embed_dim % self.heads:
            raise DomainError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.pos_dim % 2:
            raise DomainError("pos_dim must be even")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def input_width(self):
        width = 2
        if self.use_adjacency_input:
            width += self.max_nodes
        if self.use_positional_encoding:
            width += self.pos_dim
        return width


@dataclass(frozen=True)
class FeatureEncoderConfig:
    input_dim: int
    hidden_dims: tuple = (128,)
    embed_dim: int = 64
    fusion: str = "early"
    n_views: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.fusion not in ("early", "late"):
            raise DomainError(f"unknown fusion mode {self.fusion!r}")
        if self.n_views < 1 or self.input_dim % self.n_views:
            raise DomainError(f"input_dim {self.input_dim} does not split into {self.n_views} views")

    @property
    def view_dim(self):
        return self.input_dim // self.n_views

    @property
    def layer_dims(self):
        first = self.input_dim if self.fusion == "early" else self.view_dim
        return (first,) + self.hidden_dims + (self.embed_dim,)


def check_compatible(gcfg: GraphEncoderConfig, fcfg: FeatureEncoderConfig):
    if gcfg.embed_dim != fcfg.embed_dim:
        raise StructuralError(f"embedding sizes differ: graph {gcfg.embed_dim}, features {fcfg.embed_dim}")


# --------------------------------------------------------------------------
# parameters


def parameter_shapes(gcfg: GraphEncoderConfig, fcfg: FeatureEncoderConfig):
    """Ordered ``(name, shape)`` list; this order is the serialization order."""
    d, f = gcfg.embed_dim, gcfg.embed_dim * gcfg.ffn_mult
    shapes = [("node_in.W", (gcfg.input_width, d)), ("node_in.b", (d,))]
    for l in range(gcfg.layers):
        p = f"layer{l}."
        for proj in ("q", "k", "v", "o"):
            shapes.append((p + f"W{proj}", (d, d)))
            # no key bias: it shifts every score of a row equally and cancels in the softmax
            if proj != "k":
                shapes.append((p + f"b{proj}", (d,)))
        shapes += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,))]
        shapes += [(p + "W1", (d, f)), (p + "b1", (f,)), (p + "W2", (f, d)), (p + "b2", (d,))]
        shapes += [(p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
    dims = fcfg.layer_dims
    for k in range(len(dims) - 1):
        shapes += [(f"feat{k}.W", (dims[k], dims[k + 1])), (f"feat{k}.b", (dims[k + 1],))]
    return shapes


@dataclass
class ModelParams:
    graph_cfg: GraphEncoderConfig
    feature_cfg: FeatureEncoderConfig
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        check_compatible(self.graph_cfg, self.feature_cfg)
        expected = parameter_shapes(self.graph_cfg, self.feature_cfg)
        if [n for n, _ in expected] != list(self.arrays):
            raise StructuralError("parameter names do not match the configuration")
        for name, shape in expected:
            if self.arrays[name].shape != shape:
                raise StructuralError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype):
        return ModelParams(self.graph_cfg, self.feature_cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self):
        return self.astype(self.dtype)

    def num_parameters(self):
        return sum(v.size for v in self.arrays.values())

    def tensors(self, requires_grad=False):
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def save(self, path):
        Path(path).write_bytes(dumps_params(self))

    @classmethod
    def load(cls, path):
        return loads_params(Path(path).read_bytes())


def init_params(gcfg: GraphEncoderConfig, fcfg: FeatureEncoderConfig, seed=0, dtype=np.float64) -> ModelParams:
    """Glorot-normal weights, zero biases, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(gcfg, fcfg):
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[1])), size=shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(gcfg, fcfg, arrays)


def _config_words(gcfg, fcfg):
    words = []
    for f in fields(GraphEncoderConfig):
        v = getattr(gcfg, f.name)
        words.append(("f", float(v)) if f.type in ("float", float) else ("i", int(v)))
    words += [("i", fcfg.input_dim), ("i", fcfg.n_views), ("i", len(fcfg.hidden_dims))]
    words += [("i", h) for h in fcfg.hidden_dims]
    words += [("i", fcfg.embed_dim), ("i", 0 if fcfg.fusion == "early" else 1)]
    return words


def dumps_params(params: ModelParams) -> bytes:
    out = [MAGIC]
    for kind, v in _config_words(params.graph_cfg, params.feature_cfg):
        out.append(struct.pack("<" + kind, v))
    out.append(struct.pack("<i", len(params.arrays)))
    for arr in params.arrays.values():
        out.append(struct.pack("<i", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads_params(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise GraphFormatError("not a parameter file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise GraphFormatError("parameter file truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    gvals = {}
    for f in fields(GraphEncoderConfig):
        if f.type in ("float", float):
            gvals[f.name] = take("<f")[0]
        elif f.type in ("bool", bool):
            gvals[f.name] = bool(take("<i")[0])
        else:
            gvals[f.name] = take("<i")[0]
    input_dim, n_views, n_hidden = take("<3i")
    hidden = take(f"<{n_hidden}i") if n_hidden else ()
    embed_dim, fusion = take("<2i")
    try:
        gcfg = GraphEncoderConfig(**gvals)
        fcfg = FeatureEncoderConfig(input_dim, hidden, embed_dim, "early" if fusion == 0 else "late", n_views)
    except (DomainError, TypeError) as exc:
        raise GraphFormatError(f"invalid configuration block: {exc}") from None
    (count,) = take("<i")
    arrays = {}
    expected = parameter_shapes(gcfg, fcfg)
    if count != len(expected):
        raise GraphFormatError(f"expected {len(expected)} tensors, found {count}")
    for name, shape in expected:
        (rank,) = take("<i")
        dims = take(f"<{rank}i") if rank else ()
        if tuple(dims) != shape:
            raise GraphFormatError(f"{name}: stored shape {dims}, expected {shape}")
        n = int(np.prod(shape))
        if pos + 4 * n > len(blob):
            raise GraphFormatError("parameter file truncated")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
    return ModelParams(gcfg, fcfg, arrays)


# --------------------------------------------------------------------------
# graph side


def build_attention_mask(adjacency, cfg: GraphEncoderConfig) -> np.ndarray:
    adj = np.asarray(adjacency).astype(bool)
    n = adj.shape[0]
    if not cfg.use_attention_mask:
        return np.ones((n, n), dtype=bool)
    mask = adj.copy()
    if cfg.mask_symmetrize:
        mask |= adj.T
    if cfg.mask_self_loops:
        mask |= np.eye(n, dtype=bool)
    if n and not mask.any(axis=1).all():
        raise DomainError("attention mask has a row with no admitted entries (isolated node without self-loops)")
    return mask


def positional_encoding(n, dim):
    idx = np.arange(n, dtype=np.float64)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    enc = np.zeros((n, dim))
    enc[:, 0::2] = np.sin(idx * freq)
    enc[:, 1::2] = np.cos(idx * freq)
    return enc


def node_input_features(g: NodeGraph, cfg: GraphEncoderConfig) -> np.ndarray:
    """Raw per-node inputs before the learned projection: scaled (x, y) [+ adjacency row] [+ index encoding]."""
    n = g.num_nodes
    parts = [g.positions / cfg.half_extent]
    if cfg.use_adjacency_input:
        if n > cfg.max_nodes:
            raise CapacityError(f"graph has {n} nodes, adjacency input supports at most {cfg.max_nodes}")
        rows = np.zeros((n, cfg.max_nodes))
        rows[:, :n] = g.dense_adjacency()
        parts.append(rows)
    if cfg.use_positional_encoding:
        parts.append(positional_encoding(n, cfg.pos_dim))
    return np.concatenate(parts, axis=1)


def _batch_inputs(graphs, cfg, dtype):
    if not graphs:
        raise DomainError("no graphs to encode")
    sizes = [g.num_nodes for g in graphs]
    if min(sizes) == 0:
        raise DomainError("cannot encode an empty graph")
    b, n = len(graphs), max(sizes)
    x = np.zeros((b, n, cfg.input_width), dtype=dtype)
    mask = np.zeros((b, n, n), dtype=bool)
    weights = np.zeros((b, n), dtype=dtype)
    for k, g in enumerate(graphs):
        m = sizes[k]
        x[k, :m] = node_input_features(g, cfg)
        mask[k, :m, :m] = build_attention_mask(g.dense_adjacency(), cfg)
        # padded tokens only see themselves and are excluded from pooling
        mask[k, np.arange(m, n), np.arange(m, n)] = True
        weights[k, :m] = 1.0
    return x, mask, weights


def encode_graphs(tp: dict, graphs, cfg: GraphEncoderConfig, chunk: int | None = None) -> ad.Tensor:
    """Encode a padded batch of graphs; returns a ``(B, d)`` tensor.

    ``tp`` maps parameter names to tensors (see :meth:`ModelParams.tensors`).
    With ``chunk`` set, graphs are sorted by size and padded in groups of at
    most ``chunk`` so that a few large windows do not inflate the whole batch.
    """
    graphs = list(graphs)
    if chunk is not None and len(graphs) > chunk:
        order = np.argsort([g.num_nodes for g in graphs], kind="stable")
        parts = [_encode_padded(tp, [graphs[i] for i in order[s:s + chunk]], cfg) for s in range(0, len(graphs), chunk)]
        return ad.row_select(ad.concat(parts, axis=0), np.argsort(order))
    return _encode_padded(tp, graphs, cfg)


def _encode_padded(tp, graphs, cfg, record=None):
    h, weights = _encode_nodes(tp, graphs, cfg, record)
    return ad.mean_pool_rows(h, weights)


def _encode_nodes(tp, graphs, cfg, record=None):
    dtype = tp["node_in.W"].dtype
    x, mask, weights = _batch_inputs(graphs, cfg, dtype)
    b, n, _ = x.shape
    d, heads, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    head_mask = mask[:, None, :, :]
    h = ad.add(ad.matmul(x, tp["node_in.W"]), tp["node_in.b"])

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    for l in range(cfg.layers):
        p = f"layer{l}."
        q = split(ad.add(ad.matmul(h, tp[p + "Wq"]), tp[p + "bq"]))
        k = split(ad.matmul(h, tp[p + "Wk"]))
        v = split(ad.add(ad.matmul(h, tp[p + "Wv"]), tp[p + "bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
        attn = ad.masked_softmax_rows(scores, head_mask)
        mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        out = ad.add(ad.matmul(mixed, tp[p + "Wo"]), tp[p + "bo"])
        h = ad.layer_norm_rows(ad.add(h, out), tp[p + "ln1.g"], tp[p + "ln1.b"])
        pre = ad.add(ad.matmul(h, tp[p + "W1"]), tp[p + "b1"])
        if record is not None:
            record.append(pre.data[weights > 0])
        ff = ad.relu(pre)
        ff = ad.add(ad.matmul(ff, tp[p + "W2"]), tp[p + "b2"])
        h = ad.layer_norm_rows(ad.add(h, ff), tp[p + "ln2.g"], tp[p + "ln2.b"])
    return h, weights


def graph_encode(params: ModelParams, g: NodeGraph) -> np.ndarray:
    """Embedding of a single graph as a plain array."""
    return encode_graphs(params.tensors(), [g], params.graph_cfg).data[0]


def node_outputs(params: ModelParams, g: NodeGraph) -> np.ndarray:
    """Per-node outputs of the last layer, before pooling (``|V| x d``)."""
    return _encode_nodes(params.tensors(), [g], params.graph_cfg)[0].data[0]


def relu_margin(params: ModelParams, graphs, features) -> float:
    """Smallest |pre-activation| entering any rectifier for these inputs (padding excluded).

    Finite differences are only meaningful when this exceeds the step by a
    wide margin, since a rectifier kink inside the step breaks the difference.
    """
    record = []
    tp = params.tensors()
    _encode_padded(tp, list(graphs), params.graph_cfg, record)
    encode_features(tp, np.atleast_2d(features), params.feature_cfg, record)
    return min((float(np.abs(r).min()) for r in record if r.size), default=math.inf)


def graph_embeddings(params: ModelParams, graphs, batch_size=64) -> np.ndarray:
    tp = params.tensors()
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, params.graph_cfg.embed_dim))
    # similar sizes share a padded batch
    order = np.argsort([g.num_nodes for g in graphs], kind="stable")
    out = np.empty((len(graphs), params.graph_cfg.embed_dim), dtype=params.dtype)
    for i in range(0, len(graphs), batch_size):
        idx = order[i:i + batch_size]
        out[idx] = encode_graphs(tp, [graphs[j] for j in idx], params.graph_cfg).data
    return out


# --------------------------------------------------------------------------
# feature side


def _mlp(tp, x, n_layers, record=None):
    h = x
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, tp[f"feat{k}.W"]), tp[f"feat{k}.b"])
        if k < n_layers - 1:
            if record is not None:
                record.append(h.data)
            h = ad.relu(h)
    return h


def encode_features(tp: dict, features, cfg: FeatureEncoderConfig, record=None) -> ad.Tensor:
    """Encode a ``(B, input_dim)`` batch of feature vectors; returns ``(B, d)``."""
    dtype = tp["feat0.W"].dtype
    x = np.asarray(features, dtype=dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise StructuralError(f"feature vectors must have length {cfg.input_dim}, got shape {np.shape(features)}")
    n_layers = len(cfg.layer_dims) - 1
    if cfg.fusion == "early":
        return _mlp(tp, x, n_layers, record)
    b = x.shape[0]
    per_view = _mlp(tp, x.reshape(b * cfg.n_views, cfg.view_dim), n_layers, record)
    return ad.mean_pool_rows(ad.reshape(per_view, (b, cfg.n_views, cfg.embed_dim)))


def feature_encode(params: ModelParams, features) -> np.ndarray:
    out = encode_features(params.tensors(), features, params.feature_cfg).data
    return out[0] if np.ndim(features) == 1 else out


def feature_embeddings(params: ModelParams, features) -> np.ndarray:
    return encode_features(params.tensors(), np.atleast_2d(features), params.feature_cfg).data


