"""Contrastive objective with graph-similarity partial credit, and the training loop.

The batch loss has three parts, combined as
``omega1 * contrastive + omega2 * chamfer + omega3 * edge``:

* contrastive -- symmetric InfoNCE over the cosine-similarity matrix.
* chamfer -- for every ground-truth graph of the batch, softmax weights over
  the candidates (its column of the similarity matrix) times the mean
  distance from each of its vertices to the nearest vertex of the candidate.
* edge -- BCE between the ground-truth adjacency and the softmax-weighted
  adjacency of the candidates, read through the same vertex correspondence.

Correspondences and distances are data, not parameters, so gradients flow
only through the softmax weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .encoders import (FeatureEncoderConfig, GraphEncoderConfig, ModelParams, encode_features,
                       encode_graphs, init_params)
from .errors import DomainError, StructuralError, TrainingError
from .lanegraph import EgoPose, NodeGraph
from .metrics import vertex_correspondence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    omega1: float = 1.0
    omega2: float = 1.0
    omega3: float = 0.1
    bce_epsilon: float = 1e-6
    logit_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    # evaluate each epoch's history row on fixed, unshuffled batches after the updates
    eval_fixed: bool = False
    # graphs padded together per encoder call (sorted by size); 0 pads the whole batch at once
    graph_chunk: int = 8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0 or self.adam_eps <= 0 or self.logit_scale <= 0:
            raise DomainError("rates must be positive")
        if min(self.omega1, self.omega2, self.omega3) < 0:
            raise DomainError("loss weights must be non-negative")
        if not 0 < self.bce_epsilon < 0.5:
            raise DomainError("bce_epsilon must lie in (0, 0.5)")
        if self.graph_chunk < 0:
            raise DomainError("graph_chunk must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise DomainError("dtype must be float32 or float64")

    @property
    def omegas(self):
        return self.omega1, self.omega2, self.omega3


@dataclass(frozen=True)
class PairedSample:
    features: np.ndarray
    graph: NodeGraph
    id: str = ""
    pose: EgoPose | None = None


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    chamfer: float
    edge: float
    total: float

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# loss terms


def similarity_matrix(img_embs, graph_embs) -> ad.Tensor:
    """Cosine similarity between every image embedding (rows) and graph embedding (columns)."""
    a, b = ad._as_tensor(img_embs), ad._as_tensor(graph_embs)
    if a.ndim != 2 or a.shape != b.shape:
        raise StructuralError(f"similarity_matrix: shapes {a.shape} and {b.shape} must be equal N x d")
    return ad.matmul(ad.l2_normalize_rows(a), ad.transpose(ad.l2_normalize_rows(b)))


def _diag(p):
    n = p.shape[0]
    return ad.matmul(ad.mul(p, np.eye(n, dtype=p.dtype)), np.ones((n, 1), dtype=p.dtype))


def contrastive_loss(alpha) -> ad.Tensor:
    """Symmetric InfoNCE: mean of image->graph and graph->image cross-entropies."""
    alpha = ad._as_tensor(alpha)
    if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
        raise StructuralError("contrastive_loss needs a square matrix")
    n = alpha.shape[0]
    rows = ad.log(_diag(ad.masked_softmax_rows(alpha)))
    cols = ad.log(_diag(ad.masked_softmax_rows(ad.transpose(alpha))))
    return ad.scale(ad.add(ad.sum_all(rows), ad.sum_all(cols)), -1.0 / (2 * n))


class BatchGeometry:
    """Vertex correspondences between every pair of graphs in a batch.

    ``distances[b, i]`` is the mean distance from the vertices of graph ``b``
    to their nearest vertices in graph ``i``. ``edge_targets[b]`` holds, for
    every ordered vertex pair of graph ``b``, the candidate adjacencies read
    through the correspondence (``N x n_b^2``), the ground-truth labels and
    the mask of pairs that enter the BCE.
    """

    def __init__(self, graphs, need_edges=True, keys=None, cache=None):
        graphs = list(graphs)
        if not graphs:
            raise DomainError("empty batch")
        if any(g.num_nodes == 0 for g in graphs):
            raise DomainError("batch contains an empty graph")
        n = len(graphs)
        self.size = n
        adjs = [g.dense_adjacency().astype(np.float64) for g in graphs]
        self.distances = np.zeros((n, n))
        self.edge_targets = []
        for b, gb in enumerate(graphs):
            m = gb.num_nodes
            stack = np.empty((n, m * m)) if need_edges else None
            for i, gi in enumerate(graphs):
                if i == b:
                    pi = np.arange(m)
                elif cache is not None and keys is not None:
                    pair = (keys[b], keys[i])
                    if pair not in cache:
                        cache[pair] = vertex_correspondence(gb, gi)
                    pi = cache[pair]
                else:
                    pi = vertex_correspondence(gb, gi)
                self.distances[b, i] = np.linalg.norm(gb.positions - gi.positions[pi], axis=1).mean()
                if need_edges:
                    stack[i] = adjs[i][np.ix_(pi, pi)].reshape(-1)
            if need_edges:
                truth = adjs[b].reshape(-1)
                keep = ~np.eye(m, dtype=bool).reshape(-1) & ((truth > 0) | stack.any(axis=0))
                self.edge_targets.append((stack, truth, keep))


def _candidate_weights(alpha):
    # row b = softmax over candidates i of alpha[i, b]
    return ad.masked_softmax_rows(ad.transpose(ad._as_tensor(alpha)))


def chamfer_credit_loss(graphs_or_geometry, alpha) -> ad.Tensor:
    geom = graphs_or_geometry if isinstance(graphs_or_geometry, BatchGeometry) else BatchGeometry(graphs_or_geometry, need_edges=False)
    alpha = ad._as_tensor(alpha)
    if alpha.shape != (geom.size, geom.size):
        raise StructuralError("alpha must be N x N for a batch of N graphs")
    w = _candidate_weights(alpha)
    return ad.scale(ad.sum_all(ad.mul(w, geom.distances.astype(alpha.dtype))), 1.0 / geom.size)


def edge_loss(graphs_or_geometry, alpha, epsilon=1e-6) -> ad.Tensor:
    if not 0 < epsilon < 0.5:
        raise DomainError("epsilon must lie in (0, 0.5)")
    geom = graphs_or_geometry if isinstance(graphs_or_geometry, BatchGeometry) else BatchGeometry(graphs_or_geometry)
    alpha = ad._as_tensor(alpha)
    if alpha.shape != (geom.size, geom.size):
        raise StructuralError("alpha must be N x N for a batch of N graphs")
    dtype = alpha.dtype
    w = _candidate_weights(alpha)
    terms = []
    for b, (stack, truth, keep) in enumerate(geom.edge_targets):
        m = int(round(np.sqrt(truth.size)))
        if m < 2 or not keep.any():
            continue
        cols = np.flatnonzero(keep)
        y = truth[cols].astype(dtype)[None, :]
        prob = ad.matmul(ad.row_select(w, [b]), stack[:, cols].astype(dtype))
        prob = ad.clamp(ad.add(prob, epsilon), epsilon, 1.0 - epsilon)
        bce = ad.add(ad.mul(ad.log(prob), y), ad.mul(ad.log(ad.add(ad.scale(prob, -1.0), 1.0)), 1.0 - y))
        terms.append(ad.scale(ad.sum_all(bce), -1.0 / (m * (m - 1))))
    if not terms:
        return ad.Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / geom.size)


def loss_terms(tp, features, graphs, gcfg, fcfg, tcfg: TrainConfig, geometry=None):
    """Differentiable loss terms for one batch; returns ``(total, contrastive, chamfer, edge)`` tensors."""
    if len(graphs) == 0:
        raise DomainError("empty batch")
    img = encode_features(tp, features, fcfg)
    gra = encode_graphs(tp, graphs, gcfg, chunk=tcfg.graph_chunk or None)
    alpha = ad.scale(similarity_matrix(img, gra), tcfg.logit_scale)
    w1, w2, w3 = tcfg.omegas
    geom = geometry if geometry is not None else BatchGeometry(graphs, need_edges=True)
    con = contrastive_loss(alpha)
    cha = chamfer_credit_loss(geom, alpha)
    edg = edge_loss(geom, alpha, tcfg.bce_epsilon)
    total = ad.add(ad.add(ad.scale(con, w1), ad.scale(cha, w2)), ad.scale(edg, w3))
    return total, con, cha, edg


def _breakdown(total, con, cha, edg):
    return LossBreakdown(float(con.data), float(cha.data), float(edg.data), float(total.data))


def total_loss(batch, params: ModelParams, tcfg: TrainConfig | None = None) -> LossBreakdown:
    """Evaluate the three loss terms and their weighted sum on a batch of paired samples."""
    tcfg = tcfg or TrainConfig(dtype="float64")
    if not batch:
        raise DomainError("empty batch")
    tp = params.tensors()
    feats = np.stack([s.features for s in batch])
    return _breakdown(*loss_terms(tp, feats, [s.graph for s in batch], params.graph_cfg, params.feature_cfg, tcfg))


# --------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, arrays: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arrays[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(arrays[k].dtype)


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def train(dataset, gcfg: GraphEncoderConfig, fcfg: FeatureEncoderConfig, tcfg: TrainConfig,
          init: ModelParams | None = None, callback=None) -> TrainResult:
    """Adam over seeded shuffled minibatches.

    Returns the final parameters and one :class:`LossBreakdown` per epoch
    (mean over that epoch's batches, or the fixed-batch evaluation when
    ``tcfg.eval_fixed`` is set).
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("empty training set")
    if tcfg.batch_size > len(dataset):
        raise DomainError(f"batch_size {tcfg.batch_size} exceeds dataset size {len(dataset)}")
    dtype = np.dtype(tcfg.dtype)
    rng = np.random.default_rng(tcfg.seed)
    params = (init if init is not None else init_params(gcfg, fcfg, seed=tcfg.seed)).astype(dtype)
    arrays = params.arrays
    opt = Adam(arrays, tcfg.learning_rate, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    feats = np.stack([np.asarray(s.features, dtype=dtype) for s in dataset])
    graphs = [s.graph for s in dataset]
    history = []
    # correspondences depend only on the data, so they are reused across epochs
    pi_cache = {}

    def run_batch(idx, step):
        tp = {k: ad.Tensor(v, requires_grad=step) for k, v in arrays.items()}
        batch_graphs = [graphs[i] for i in idx]
        geom = BatchGeometry(batch_graphs, keys=[int(i) for i in idx], cache=pi_cache)
        out = loss_terms(tp, feats[idx], batch_graphs, gcfg, fcfg, tcfg, geometry=geom)
        if step:
            out[0].backward()
            opt.step(arrays, {k: t.grad for k, t in tp.items()})
        return _breakdown(*out)

    for epoch in range(tcfg.epochs):
        rows = []
        for b, idx in enumerate(_batches(rng.permutation(len(dataset)), tcfg.batch_size)):
            row = run_batch(idx, step=True)
            if not np.isfinite(row.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            rows.append((len(idx), row))
        if tcfg.eval_fixed:
            rows = [(len(idx), run_batch(idx, step=False)) for idx in _batches(np.arange(len(dataset)), tcfg.batch_size)]
        weight = sum(n for n, _ in rows)
        mean = LossBreakdown(*(sum(n * getattr(r, k) for n, r in rows) / weight for k in ("contrastive", "chamfer", "edge", "total")))
        history.append(mean)
        log.debug("epoch %d total %.6f", epoch, mean.total)
        if callback is not None:
            callback(epoch, mean, params)
    return TrainResult(params, history)


def history_csv(history) -> str:
    lines = ["epoch,contrastive,chamfer,edge,total"]
    for k, h in enumerate(history):
        lines.append(f"{k},{h.contrastive!r},{h.chamfer!r},{h.edge!r},{h.total!r}")
    return "\n".join(lines) + "\n"


LOSS_TERMS = ("total", "contrastive", "chamfer", "edge")


def loss_gradient_errors(batch, params: ModelParams, tcfg: TrainConfig | None = None, step=1e-5,
                         max_components=None, seed=0) -> dict:
    """Worst finite-difference relative error of each loss term's parameter gradient (64-bit)."""
    tcfg = tcfg or TrainConfig(dtype="float64")
    params = params.astype(np.float64)
    names = list(params.arrays)
    feats = np.stack([np.asarray(s.features, dtype=np.float64) for s in batch])
    graphs = [s.graph for s in batch]
    geom = BatchGeometry(graphs)

    def f(*leaves):
        return loss_terms(dict(zip(names, leaves)), feats, graphs, params.graph_cfg, params.feature_cfg, tcfg, geom)

    errs = ad.gradient_check_many(f, [params.arrays[n] for n in names], step, max_components, seed)
    return dict(zip(LOSS_TERMS, errs))


def loss_gradient_resolution(batch, params: ModelParams, tcfg: TrainConfig | None = None, step=1e-5) -> float:
    """Smallest ratio, over terms and components, of |gradient| to the central-difference rounding floor.

    A central difference cannot see below ``ulps * spacing(loss) / (2 * step)``:
    the loss itself is only known to a few ulps. A component whose gradient
    sits at ratio r of that floor can only be checked to relative error ~1/r.
    Exactly-zero components are skipped.
    """
    ulps = 4
    tcfg = tcfg or TrainConfig(dtype="float64")
    params = params.astype(np.float64)
    feats = np.stack([np.asarray(s.features, dtype=np.float64) for s in batch])
    graphs = [s.graph for s in batch]
    geom = BatchGeometry(graphs)
    worst = math.inf
    for k in range(len(LOSS_TERMS)):
        tp = params.tensors(requires_grad=True)
        out = loss_terms(tp, feats, graphs, params.graph_cfg, params.feature_cfg, tcfg, geom)[k]
        out.backward()
        floor = ulps * np.spacing(abs(float(out.data))) / (2.0 * step)
        # exact zeros (say, behind a rectifier dead on the whole batch) stay exact under
        # perturbation, so only nonzero components are held to the floor
        mags = np.concatenate([np.abs(t.grad).ravel() for t in tp.values() if t.grad is not None])
        mags = mags[mags > 0]
        if mags.size:
            worst = min(worst, float(mags.min()) / floor)
    return worst
