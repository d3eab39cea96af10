"""Graph comparison metrics: point-set discrepancy, edge agreement, urban statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .lanegraph import NodeGraph

DEFAULT_MMD_SIGMA = 5.0


@dataclass(frozen=True)
class MetricReport:
    chamfer: float
    rand_loss: float
    mmd: float
    urban_density_err: float
    urban_reach_err: float
    urban_connectivity_err: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def mean(cls, reports):
        reports = list(reports)
        if not reports:
            raise DomainError("cannot average an empty list of reports")
        keys = cls.__dataclass_fields__
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _points(v):
    pts = np.asarray(v.positions if isinstance(v, NodeGraph) else v, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise DomainError("point set is empty")
    return pts


def pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def chamfer_distance(v1, v2) -> float:
    """Mean nearest-neighbour distance from v1 to v2 plus the reverse direction."""
    a, b = _points(v1), _points(v2)
    d = pairwise_distances(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def mmd(v1, v2, sigma: float = DEFAULT_MMD_SIGMA) -> float:
    """Squared MMD between two point sets under a Gaussian kernel (biased estimator)."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    a, b = _points(v1), _points(v2)

    def kmean(p, q):
        d = p[:, None, :] - q[None, :, :]
        return np.exp(-np.einsum("ijk,ijk->ij", d, d) / (2.0 * sigma * sigma)).mean()

    value = kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b)
    return float(max(value, 0.0))


def vertex_correspondence(g0, gi) -> np.ndarray:
    """For each vertex of ``g0`` the index of its nearest vertex in ``gi``.

    Ties resolve to the smallest index.
    """
    a, b = _points(g0), _points(gi)
    diff = a[:, None, :] - b[None, :, :]
    return np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)


def rand_loss_count(g1: NodeGraph, g2: NodeGraph) -> int:
    """Number of ordered vertex pairs of g1 whose edge label disagrees with g2 under the correspondence."""
    n = g1.num_nodes
    if n < 2:
        raise DomainError("rand loss needs at least 2 vertices in the first graph")
    pi = vertex_correspondence(g1, g2)
    e1 = g1.dense_adjacency().astype(bool)
    e2 = g2.dense_adjacency().astype(bool)[np.ix_(pi, pi)]
    mismatch = e1 != e2
    np.fill_diagonal(mismatch, False)
    return int(mismatch.sum())


def rand_loss(g1: NodeGraph, g2: NodeGraph) -> float:
    n = g1.num_nodes
    return rand_loss_count(g1, g2) / (n * (n - 1))


def urban_metrics(g: NodeGraph) -> dict:
    """Connectivity (edges per node), density (edges over n(n-1)) and reach (total edge length, m)."""
    n = g.num_nodes
    if n < 2:
        raise DomainError("urban metrics need at least 2 nodes")
    src, dst = np.nonzero(g.dense_adjacency())
    n_edges = len(src)
    # correctly rounded sum: long maps otherwise drift with summation order
    reach = math.fsum(np.linalg.norm(g.positions[src] - g.positions[dst], axis=1)) if n_edges else 0.0
    connectivity = n_edges / n
    # written as connectivity / (n - 1) so the two agree bit for bit
    return {"connectivity": connectivity, "density": connectivity / (n - 1), "reach": reach}


def relative_error(pred: float, gt: float) -> float:
    if gt == 0:
        raise DomainError("relative error undefined for a zero reference value")
    return abs(pred - gt) / abs(gt)


def evaluate_pair(retrieved: NodeGraph, truth: NodeGraph, sigma: float = DEFAULT_MMD_SIGMA) -> MetricReport:
    """Full metric suite for a retrieved graph against its ground truth."""
    if retrieved.num_nodes < 2 or truth.num_nodes < 2:
        raise DomainError("both graphs need at least 2 nodes")
    ur, ut = urban_metrics(retrieved), urban_metrics(truth)
    return MetricReport(
        chamfer=chamfer_distance(retrieved, truth),
        rand_loss=rand_loss(retrieved, truth),
        mmd=mmd(retrieved, truth, sigma),
        urban_density_err=_urban_error(ur["density"], ut["density"]),
        urban_reach_err=_urban_error(ur["reach"], ut["reach"]),
        urban_connectivity_err=_urban_error(ur["connectivity"], ut["connectivity"]),
    )


def _urban_error(pred, gt):
    # an edgeless truth is only comparable to an edgeless prediction
    if gt == 0 and pred == 0:
        return 0.0
    return relative_error(pred, gt)
