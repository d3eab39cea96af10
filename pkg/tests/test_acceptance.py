"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line in ``conftest.ACCEPTANCE``; the lines
are printed in the terminal summary. The two training fixtures (one
full-size converged model, and three seeds of a smaller model trained with
and without the geometric loss terms) are shared across criteria.
"""
import math
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

import oracles
from conftest import ACCEPTANCE
from pix2map.encoders import FeatureEncoderConfig, GraphEncoderConfig, ModelParams, graph_encode, init_params
from pix2map.lanegraph import resample_polyline, wrap_angle
from pix2map.metrics import chamfer_distance, mmd, rand_loss, urban_metrics
from pix2map.retrieval import LocalizationGrid, augment_library, build_library, map2pix, pix2map, unimodal_retrieve
from pix2map.synthdata import SynthConfig, gen_city, gen_paired_sample, generate, gradcheck_batch, random_node_graph
from pix2map.training import TrainConfig, loss_gradient_errors, train
from test_cli import _declared_outputs, pipeline

pytestmark = pytest.mark.slow

# logit scale 10 rather than the default 1; see the decisions ledger
BIG_EPOCHS, BIG_SCALE = 120, 10.0
SMALL = dict(layers=3, embed_dim=32, epochs=60, n_train=128, n_eval=32)
SEEDS = (0, 1, 2)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


def paired_library(samples, params):
    return build_library([s.graph for s in samples], params, features=np.stack([s.features for s in samples]),
                         ids=[s.id for s in samples])


def mean_chamfer(samples, retrieve):
    return float(np.mean([chamfer_distance(retrieve(s), s.graph) for s in samples]))


# --------------------------------------------------------------------------
# shared training runs


@pytest.fixture(scope="session")
def converged():
    cfg = SynthConfig(seed=0)
    city, split = generate(cfg, (256, 64, 64))
    gcfg = GraphEncoderConfig(layers=7, embed_dim=64)
    fcfg = FeatureEncoderConfig(input_dim=cfg.feature_dim, embed_dim=64)
    t0 = time.perf_counter()
    result = train(split.train, gcfg, fcfg, TrainConfig(epochs=BIG_EPOCHS, learning_rate=2e-4, logit_scale=BIG_SCALE))
    seconds = time.perf_counter() - t0
    return dict(cfg=cfg, city=city, split=split, params=result.params, seconds=seconds,
                library=paired_library(split.train, result.params))


@pytest.fixture(scope="session")
def seed_runs():
    runs = []
    for seed in SEEDS:
        cfg = SynthConfig(seed=seed)
        _, split = generate(cfg, (SMALL["n_train"], SMALL["n_eval"], SMALL["n_eval"]))
        gcfg = GraphEncoderConfig(layers=SMALL["layers"], embed_dim=SMALL["embed_dim"])
        fcfg = FeatureEncoderConfig(input_dim=cfg.feature_dim, hidden_dims=(128,), embed_dim=SMALL["embed_dim"])
        run = {}
        for name, omega in (("full", (1.0, 1.0, 0.1)), ("contrastive", (1.0, 0.0, 0.0))):
            tcfg = TrainConfig(epochs=SMALL["epochs"], logit_scale=BIG_SCALE, seed=seed,
                               omega1=omega[0], omega2=omega[1], omega3=omega[2])
            params = train(split.train, gcfg, fcfg, tcfg).params
            lib = paired_library(split.train, params)

            def p2m(s, lib=lib):
                return lib.graph(pix2map(s.features, lib).top)

            run[name] = dict(update=mean_chamfer(split.map_update, p2m), expand=mean_chamfer(split.map_expand, p2m),
                             unimodal=mean_chamfer(split.map_update, lambda s, lib=lib: unimodal_retrieve(s.features, lib)[1]))
        runs.append(run)
    return runs


def _fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# --------------------------------------------------------------------------
# 1-4: exact properties


def test_01_metric_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        a = random_node_graph(rng, int(rng.integers(2, 21)), 0.3)
        b = random_node_graph(rng, int(rng.integers(2, 21)), 0.3)
        worst = max(worst, abs(chamfer_distance(a, b) - oracles.chamfer(a, b)),
                    abs(mmd(a, b) - oracles.mmd(a, b)), abs(rand_loss(a, b) - oracles.rand_loss(a, b)))
        for g in (a, b):
            u, o = urban_metrics(g), oracles.urban(g)
            worst = max(worst, *(abs(u[k] - o[k]) for k in o))
    seconds = time.perf_counter() - t0
    record("01 metric oracles", worst <= 1e-12 and seconds < 10,
           f"max deviation {worst:.2e} (<= 1e-12), {seconds:.1f} s (< 10 s)")


def test_02_gradient_check():
    rng = np.random.default_rng(0)
    gcfg = GraphEncoderConfig(layers=2, embed_dim=8, heads=2, max_nodes=8)
    fcfg = FeatureEncoderConfig(input_dim=6, hidden_dims=(8,), embed_dim=8)
    t0 = time.perf_counter()
    worst = {}
    for b in range(20):
        params = init_params(gcfg, fcfg, seed=b)
        batch = gradcheck_batch(rng, int(rng.integers(2, 5)), params)
        for term, err in loss_gradient_errors(batch, params, TrainConfig(dtype="float64"), step=1e-5, seed=b).items():
            worst[term] = max(worst.get(term, 0.0), err)
    seconds = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("02 gradient check", max(worst.values()) <= 1e-4 and seconds < 120,
           f"{detail} (<= 1e-4), {seconds:.1f} s (< 120 s)")


def test_03_permutation_invariance():
    rng = np.random.default_rng(3)
    base = init_params(GraphEncoderConfig(use_adjacency_input=False), FeatureEncoderConfig(8), seed=3)
    arrays = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in base.arrays.items()}
    params = ModelParams(base.graph_cfg, base.feature_cfg, arrays)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 41))
        g = random_node_graph(rng, n, 0.15)
        worst = max(worst, float(np.max(np.abs(graph_encode(params, g) - graph_encode(params, g.permuted(rng.permutation(n)))))))
    record("03 permutation invariance", worst <= 1e-10, f"max |diff| {worst:.2e} (<= 1e-10)")


def test_04_resampling():
    rng = np.random.default_rng(4)
    segments = [s for seed in range(3) for s in gen_city(SynthConfig(seed=seed)).segments.segments]
    lo, hi, end_err = math.inf, 0.0, 0.0
    for k in rng.choice(len(segments), 100, replace=False):
        src = segments[k].polyline
        out = resample_polyline(src, 2.0)
        gaps = np.linalg.norm(np.diff(out, axis=0), axis=1)[:-1]
        if len(gaps):
            lo, hi = min(lo, gaps.min()), max(hi, gaps.max())
        end_err = max(end_err, np.abs(out[0] - src[0]).max(), np.abs(out[-1] - src[-1]).max())
    record("04 resampling", 1.8 <= lo and hi <= 2.2 and end_err <= 1e-9,
           f"intervals in [{lo:.3f}, {hi:.3f}] (within [1.8, 2.2]), endpoint error {end_err:.1e} (<= 1e-9)")


# --------------------------------------------------------------------------
# 5, 7, 10: the converged full-size model


def test_05_convergence(converged):
    split, lib = converged["split"], converged["library"]
    r1 = np.mean([pix2map(s.features, lib).top == s.id for s in split.train])
    big = augment_library(lib, [s.graph for s in split.map_update], ids=[s.id for s in split.map_update])
    r10 = np.mean([s.id in pix2map(s.features, big, 10).ids for s in split.map_update])
    chance = 10 / len(big)
    minutes = converged["seconds"] / 60
    record("05 convergence", r1 >= 0.9 and r10 >= 5 * chance and minutes < 15,
           f"train recall@1 {r1:.3f} (>= 0.9), MapUpdate recall@10 {r10:.3f} vs 5x chance {5 * chance:.3f}, "
           f"{BIG_EPOCHS} epochs in {minutes:.1f} min (< 15)")


def test_map2pix_symmetric(converged):
    split, lib = converged["split"], converged["library"]
    rate = np.mean([map2pix(s.graph, lib).top == s.id for s in split.train])
    record("05b map2pix symmetric check", rate >= 0.8, f"train map2pix rank-1 rate {rate:.3f} (>= 0.8)")


def test_07_library_augmentation(converged):
    split, lib = converged["split"], converged["library"]
    queries = split.map_update
    planted = augment_library(lib, [s.graph for s in queries], ids=[f"plant-{s.id}" for s in queries])
    before = [chamfer_distance(lib.graph(pix2map(s.features, lib).top), s.graph) for s in queries]
    tops = [pix2map(s.features, planted).top for s in queries]
    after = [chamfer_distance(planted.graph(t), s.graph) for t, s in zip(tops, queries)]
    exact = [a for a, t, s in zip(after, tops, queries) if t == f"plant-{s.id}"]
    ok = np.mean(after) < np.mean(before) and len(exact) > 0 and max(exact) <= 1e-9
    record("07 library augmentation", ok,
           f"mean chamfer {np.mean(before):.3f} -> {np.mean(after):.3f} (strict decrease); "
           f"{len(exact)}/{len(queries)} queries retrieve their planted truth, max chamfer {max(exact, default=math.nan):.1e} (<= 1e-9)")


def test_10_localization(converged):
    cfg, city, params = converged["cfg"], converged["city"], converged["params"]
    grid = LocalizationGrid(city.nodes, params, stride=20.0, half_extent=cfg.half_extent, min_nodes=2)
    # planted poses: grid cells centred on a lane and facing along it
    tree = cKDTree(city.nodes.positions)
    on_lane = []
    for k, pose in enumerate(grid.poses):
        d, v = tree.query(pose.position)
        if d < 1.5 and abs(wrap_angle(pose.heading - city.node_headings[v])) < 0.2:
            on_lane.append(k)
    picks = np.random.default_rng(7).choice(on_lane, 20, replace=False)
    hits, ranks = 0, []
    for k in picks:
        query = gen_paired_sample(city, grid.poses[k], cfg, noise_seed=int(k))
        scores = np.array([c.score for c in grid.score(query.features)])
        rank = int(np.sum(scores > scores[k]))
        ranks.append(rank)
        hits += rank < 0.05 * len(scores)
    record("10 localization", hits >= 16,
           f"{hits}/20 true cells in the top 5% of {len(grid.poses)} cells (>= 16); worst rank {max(ranks)}")


# --------------------------------------------------------------------------
# 6, 8, 9: directional trends over three seeds


def test_06_cross_modal_beats_unimodal(seed_runs):
    p2m = [r["full"]["update"] for r in seed_runs]
    uni = [r["full"]["unimodal"] for r in seed_runs]
    record("06 cross-modal <= unimodal", np.mean(p2m) <= np.mean(uni),
           f"MapUpdate chamfer pix2map {np.mean(p2m):.3f} {_fmt(p2m)} vs unimodal {np.mean(uni):.3f} {_fmt(uni)}")


def test_08_loss_ablation(seed_runs):
    full = [r["full"]["update"] for r in seed_runs]
    con = [r["contrastive"]["update"] for r in seed_runs]
    record("08 full loss <= contrastive only", np.mean(full) <= np.mean(con),
           f"MapUpdate chamfer full {np.mean(full):.3f} {_fmt(full)} vs contrastive-only {np.mean(con):.3f} {_fmt(con)}")


def test_09_expand_harder(seed_runs):
    upd = [r["full"]["update"] for r in seed_runs]
    exp = [r["full"]["expand"] for r in seed_runs]
    record("09 MapExpand >= MapUpdate", np.mean(exp) >= np.mean(upd),
           f"chamfer MapExpand {np.mean(exp):.3f} {_fmt(exp)} vs MapUpdate {np.mean(upd):.3f} {_fmt(upd)}")


# --------------------------------------------------------------------------
# 11


def test_11_cli_determinism(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    fa = _declared_outputs(pipeline(tmp_path / "a", capsys))
    fb = _declared_outputs(pipeline(tmp_path / "b", capsys))
    same = sorted(fa) == sorted(fb) and all(fa[k] == fb[k] for k in fa)
    record("11 CLI determinism", same, f"{len(fa)} declared output files, byte-identical: {same}")
