"""
Localization heatmap
====================

A view's feature embedding is compared with the graph embedding of a
window at every grid pose of the city map. The true pose should score near
the top. The heatmap is written as a PGM image next to this script.
"""
from pathlib import Path

import numpy as np

from pix2map.encoders import FeatureEncoderConfig, GraphEncoderConfig
from pix2map.lanegraph import EgoPose
from pix2map.retrieval import LocalizationGrid, heatmap_pgm
from pix2map.synthdata import SynthConfig, gen_paired_sample, generate
from pix2map.training import TrainConfig, train

cfg = SynthConfig(seed=3, grid_rows=4, grid_cols=5)
city, split = generate(cfg, (96, 8, 8))
gcfg = GraphEncoderConfig(layers=2, embed_dim=32)
fcfg = FeatureEncoderConfig(input_dim=cfg.feature_dim, hidden_dims=(64,), embed_dim=32)
params = train(split.train, gcfg, fcfg, TrainConfig(epochs=40, logit_scale=10.0)).params

grid = LocalizationGrid(city.nodes, params, stride=20.0, half_extent=cfg.half_extent, min_nodes=2)
print("candidate poses:", len(grid.poses))

# a query taken where a lane crosses a grid cell, facing along the lane
k = int(np.argmax([w.num_nodes for w in grid.windows]))
pose = grid.poses[k]
query = gen_paired_sample(city, EgoPose(pose.position, pose.heading), cfg, noise_seed=1)
cells = grid.score(query.features)
scores = np.array([c.score for c in cells])
print(f"true cell rank {int(np.sum(scores > scores[k]))} of {len(scores)}")

out = Path(__file__).with_name("heatmap.pgm")
out.write_bytes(heatmap_pgm(cells))
print("wrote", out)
