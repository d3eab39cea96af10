"""
Training a cross-modal embedding and retrieving lane graphs
===========================================================

A synthetic city supplies paired (sensor features, lane graph) windows.
A graph transformer and a feature MLP are trained so that matching pairs
score highest, then the trained model retrieves graphs for unseen views,
with and without an enlarged library of unpaired graphs.
Runs in about a minute.
"""
import numpy as np

from pix2map.encoders import FeatureEncoderConfig, GraphEncoderConfig
from pix2map.metrics import chamfer_distance
from pix2map.retrieval import augment_library, build_library, map2pix, pix2map, unimodal_retrieve
from pix2map.synthdata import SynthConfig, generate
from pix2map.training import TrainConfig, train

cfg = SynthConfig(seed=0, grid_rows=5, grid_cols=6)
city, split = generate(cfg, (96, 24, 24))
print("train / update / expand:", len(split.train), len(split.map_update), len(split.map_expand))

gcfg = GraphEncoderConfig(layers=2, embed_dim=32)
fcfg = FeatureEncoderConfig(input_dim=cfg.feature_dim, hidden_dims=(64,), embed_dim=32)
result = train(split.train, gcfg, fcfg, TrainConfig(epochs=40, logit_scale=10.0, batch_size=32))
h = result.history
print(f"loss {h[0].total:.3f} -> {h[-1].total:.3f}")

lib = build_library([s.graph for s in split.train], result.params,
                    features=np.stack([s.features for s in split.train]), ids=[s.id for s in split.train])

r1 = np.mean([pix2map(s.features, lib).top == s.id for s in split.train])
back = np.mean([map2pix(s.graph, lib).top == s.id for s in split.train])
print(f"train recall@1 pix2map {r1:.2f}, map2pix {back:.2f}")


def mean_chamfer(samples, fn):
    return np.mean([chamfer_distance(fn(s), s.graph) for s in samples])


p2m = lambda s, lib=lib: lib.graph(pix2map(s.features, lib).top)
print(f"MapUpdate chamfer: pix2map {mean_chamfer(split.map_update, p2m):.2f} m, "
      f"unimodal {mean_chamfer(split.map_update, lambda s: unimodal_retrieve(s.features, lib)[1]):.2f} m")
print(f"MapExpand chamfer: pix2map {mean_chamfer(split.map_expand, p2m):.2f} m")

# unpaired graphs can join the library without sensor data
bigger = augment_library(lib, [s.graph for s in split.map_update], ids=[f"map-{s.id}" for s in split.map_update])
p2m_big = lambda s: bigger.graph(pix2map(s.features, bigger).top)
print(f"MapUpdate chamfer with the region's map added: {mean_chamfer(split.map_update, p2m_big):.2f} m")
