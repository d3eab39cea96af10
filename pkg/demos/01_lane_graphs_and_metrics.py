"""
Lane graphs, resampling and graph metrics
=========================================

A small road piece is written as lane segments, turned into a node graph
with points about 2 m apart, cut to an ego window and compared against a
perturbed copy with every metric of the evaluation suite.
"""
import math

import numpy as np

from pix2map.lanegraph import (EgoPose, LaneSegment, SegmentGraph, extract_window, resample_graph,
                               segment_to_node_graph, validate)
from pix2map.metrics import chamfer_distance, evaluate_pair, mmd, rand_loss, urban_metrics

# two lanes meeting a curved right turn
straight = LaneSegment([(-30.0, 0.0), (0.0, 0.0)])
turn = LaneSegment([(0.0, 0.0), (6.0, -1.5), (9.0, -6.0), (10.0, -12.0)])
onward = LaneSegment([(0.0, 0.0), (30.0, 0.0)])
seg = SegmentGraph((straight, turn, onward), ((0, 1), (0, 2)))

raw = segment_to_node_graph(seg)
print("raw polyline points:", raw.num_nodes)

# arc-length resampling with a cubic spline, shared joins merged
g = resample_graph(seg, spacing=2.0)
print("resampled nodes:", g.num_nodes, "problems:", validate(g))
src, dst = g.adjacency.nonzero()
gaps = np.linalg.norm(g.positions[src] - g.positions[dst], axis=1)
print(f"edge lengths {gaps.min():.3f} .. {gaps.max():.3f} m")

# the ego window: 40 m square around the vehicle, driving direction +x
pose = EgoPose((5.0, -2.0), -0.25 * math.pi)
win = extract_window(g, pose, half_extent=20.0)
print("window nodes:", win.num_nodes)

# a shifted copy keeps its topology: small chamfer and mmd, and rand loss only where
# the shift changes which node is nearest
moved = type(win)(win.positions + [0.7, -0.4], win.adjacency)
print(f"chamfer {chamfer_distance(win, moved):.3f} m   mmd {mmd(win, moved):.4f}   rand {rand_loss(win, moved):.3f}")
print("urban:", {k: round(v, 3) for k, v in urban_metrics(win).items()})
print(evaluate_pair(moved, win))
