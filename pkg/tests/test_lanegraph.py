import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pix2map.errors import DomainError, GraphFormatError, StructuralError
from pix2map.lanegraph import (DEFAULT_SPACING, EgoPose, LaneSegment, NodeGraph, SegmentGraph, dumps_graph,
                               dumps_segment_graph, extract_window, from_ego_frame, loads_graph, loads_segment_graph,
                               read_graph, resample_graph, resample_polyline, segment_to_node_graph, to_ego_frame,
                               validate, write_graph)
from pix2map.synthdata import random_node_graph


def edge_set(g):
    return set(g.edges())


# --- types


def test_lane_segment_rejects_short_and_repeated():
    with pytest.raises(StructuralError):
        LaneSegment([(0, 0)])
    with pytest.raises(StructuralError):
        LaneSegment([(0, 0), (0, 0), (1, 0)])


def test_segment_graph_bad_successor_index():
    with pytest.raises(StructuralError):
        SegmentGraph(([(0, 0), (1, 0)],), ((0, 3),))


def test_pose_heading_wrapped():
    assert EgoPose((0, 0), math.pi).heading == pytest.approx(-math.pi)
    assert EgoPose((0, 0), 3 * math.pi / 2).heading == pytest.approx(-math.pi / 2)
    assert -math.pi <= EgoPose((0, 0), 1e3).heading < math.pi


# --- segment_to_node_graph


def test_single_chain():
    g = segment_to_node_graph(SegmentGraph(([(0, 0), (1, 0), (2, 0)],)))
    assert g.num_nodes == 3
    assert edge_set(g) == {(0, 1), (1, 2)}


def test_two_segments_with_successor():
    g = segment_to_node_graph(SegmentGraph(([(0, 0), (1, 0)], [(1, 0), (2, 0)]), ((0, 1),)))
    assert g.num_nodes == 4
    assert edge_set(g) == {(0, 1), (1, 2), (2, 3)}


def test_y_junction_out_degree():
    # trunk ends at (2,0); two branches leave from there
    seg = SegmentGraph(([(0, 0), (1, 0), (2, 0)], [(2, 0), (3, 1)], [(2, 0), (3, -1)]), ((0, 1), (0, 2)))
    g = segment_to_node_graph(seg)
    # hand enumeration: 0->1, 1->2, 2->3, 3->4, 2->5, 5->6
    assert edge_set(g) == {(0, 1), (1, 2), (2, 3), (3, 4), (2, 5), (5, 6)}
    assert g.dense_adjacency()[2].sum() == 2


@given(st.lists(st.integers(2, 6), min_size=1, max_size=5), st.integers(0, 10_000))
def test_node_count_is_sum_of_polyline_lengths(lengths, seed):
    rng = np.random.default_rng(seed)
    segs = [np.cumsum(rng.uniform(0.5, 2.0, size=(n, 2)), axis=0) for n in lengths]
    succ = [(k, k + 1) for k in range(len(segs) - 1)]
    g = segment_to_node_graph(SegmentGraph(tuple(segs), tuple(succ)))
    assert g.num_nodes == sum(lengths)
    assert validate(g) == []


# --- resample_graph


def test_straight_line_spacing_two():
    g = resample_graph(SegmentGraph(([(0, 0), (10, 0)],)), 2.0)
    assert np.allclose(g.positions[:, 0], [0, 2, 4, 6, 8, 10], atol=1e-12)
    assert np.allclose(g.positions[:, 1], 0)


def test_default_spacing_is_two_meters():
    assert DEFAULT_SPACING == 2.0
    g = resample_graph(SegmentGraph(([(0, 0), (4, 0)],)))
    assert g.num_nodes == 3


def test_quarter_circle_chords_near_spacing():
    t = np.linspace(0, math.pi / 2, 10)
    arc = np.column_stack([10 * np.cos(t), 10 * np.sin(t)])
    pts = resample_polyline(arc, 2.0)
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    # independent arc length of the true circle: 5*pi, so 7 full steps and a short one
    assert len(pts) == math.floor(5 * math.pi / 2) + 2
    assert np.all(np.abs(chords[:-1] - 2.0) <= 0.2)
    assert np.allclose(pts[0], arc[0], atol=1e-12) and np.allclose(pts[-1], arc[-1], atol=1e-12)


def test_final_interval_may_be_short():
    pts = resample_polyline([(0, 0), (5, 0)], 2.0)
    assert np.allclose(pts[:, 0], [0, 2, 4, 5])


def test_zero_length_segment_rejected():
    with pytest.raises(StructuralError):
        resample_polyline(np.array([(1.0, 1.0), (1.0, 1.0)]), 2.0)


def test_nonpositive_spacing_rejected():
    with pytest.raises(DomainError):
        resample_graph(SegmentGraph(([(0, 0), (4, 0)],)), 0.0)


def test_join_points_merged_after_resampling():
    seg = SegmentGraph(([(0, 0), (4, 0)], [(4, 0), (8, 0)]), ((0, 1),))
    g = resample_graph(seg, 2.0)
    assert g.num_nodes == 5
    assert edge_set(g) == {(0, 1), (1, 2), (2, 3), (3, 4)}


def test_join_not_merged_when_apart():
    seg = SegmentGraph(([(0, 0), (4, 0)], [(5, 0), (9, 0)]), ((0, 1),))
    g = resample_graph(seg, 2.0)
    assert g.num_nodes == 6
    assert (2, 3) in edge_set(g)


def random_polyline(rng, n):
    # smooth-ish curve: random heading walk with unit-ish steps
    heading = np.cumsum(rng.normal(0, 0.3, n - 1))
    steps = rng.uniform(3.0, 8.0, n - 1)[:, None] * np.column_stack([np.cos(heading), np.sin(heading)])
    return np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)]) + rng.uniform(-50, 50, 2)


@given(st.integers(2, 12), st.integers(0, 100_000))
def test_resample_spacing_and_endpoints(n, seed):
    rng = np.random.default_rng(seed)
    poly = random_polyline(rng, n)
    pts = resample_polyline(poly, 2.0)
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.all((gaps[:-1] >= 1.8) & (gaps[:-1] <= 2.2))
    assert np.max(np.abs(pts[0] - poly[0])) <= 1e-9
    assert np.max(np.abs(pts[-1] - poly[-1])) <= 1e-9


# --- extract_window


def test_window_identity_transform():
    city = NodeGraph([[100.0, 100.0]], [[0]])
    w = extract_window(city, EgoPose((100, 100), 0.0))
    assert np.allclose(w.positions, [[0, 0]])


def test_window_rotation():
    city = NodeGraph([[101.0, 100.0]], [[0]])
    w = extract_window(city, EgoPose((100, 100), math.pi / 2))
    assert np.allclose(w.positions, [[0, -1]], atol=1e-12)


def test_window_drops_outside():
    city = NodeGraph.from_edges([[25.0, 0.0], [0.0, 0.0]], [(1, 0)])
    w = extract_window(city, EgoPose((0, 0), 0.0), 20.0)
    assert w.num_nodes == 1 and w.num_edges == 0


def test_window_empty_is_legal():
    city = NodeGraph([[500.0, 0.0]], [[0]])
    w = extract_window(city, EgoPose((0, 0), 0.0))
    assert w.num_nodes == 0 and validate(w) == []


def test_ego_frame_round_trip(rng):
    pose = EgoPose((3.0, -4.0), 0.7)
    pts = rng.normal(size=(10, 2)) * 30
    assert np.allclose(from_ego_frame(to_ego_frame(pts, pose), pose), pts, atol=1e-12)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi), st.integers(0, 10_000))
def test_window_equivariance(px, py, heading, seed):
    rng = np.random.default_rng(seed)
    city = random_node_graph(rng, 30, 0.1, extent=60.0)
    pose = EgoPose((px, py), heading)
    direct = extract_window(city, pose, 20.0)
    moved = NodeGraph(to_ego_frame(city.positions, pose), city.adjacency)
    ident = extract_window(moved, EgoPose((0, 0), 0.0), 20.0)
    assert direct.num_nodes == ident.num_nodes
    assert np.max(np.abs(direct.positions - ident.positions), initial=0.0) <= 1e-9
    assert np.array_equal(direct.dense_adjacency(), ident.dense_adjacency())
    assert validate(direct) == []


def test_sparse_city_window_matches_dense(rng):
    n = 5000
    pos = rng.uniform(0, 400, size=(n, 2))
    edges = [(i, i + 1) for i in range(n - 1)]
    city = NodeGraph.from_edges(pos, edges)
    assert city.is_sparse and validate(city) == []
    dense = NodeGraph(pos, city.dense_adjacency())
    pose = EgoPose((200, 200), 0.3)
    assert extract_window(city, pose) == extract_window(dense, pose)


# --- validate


def test_validate_reports():
    assert validate(NodeGraph.from_edges([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])) == []
    diag = np.zeros((3, 3), dtype=np.uint8)
    diag[1, 1] = 1
    assert len(validate(NodeGraph(np.zeros((3, 2)), diag))) == 1
    assert len(validate(NodeGraph(np.zeros((3, 2)), np.zeros((2, 2))))) == 1
    two = np.zeros((2, 2))
    two[0, 1] = 2
    assert len(validate(NodeGraph(np.zeros((2, 2)), two))) == 1


# --- file I/O


def test_graph_round_trip(tmp_path, rng):
    g = random_node_graph(rng, 17, 0.2)
    path = tmp_path / "g.json"
    write_graph(g, path)
    back = read_graph(path)
    assert np.max(np.abs(back.positions - g.positions)) <= 1e-9
    assert np.array_equal(back.dense_adjacency(), g.dense_adjacency())
    # canonical output is byte-stable
    assert dumps_graph(back) == path.read_text()


def test_graph_edges_sorted_in_output():
    g = NodeGraph.from_edges([[0, 0], [1, 0], [2, 0]], [(2, 0), (0, 2), (0, 1)])
    assert '"edges":[[0,1],[0,2],[2,0]]' in dumps_graph(g)


def test_edge_out_of_range_is_parse_error():
    with pytest.raises(GraphFormatError):
        loads_graph('{"nodes": [[0, 0]], "edges": [[0, 3]]}')


def test_malformed_json_reports_line():
    with pytest.raises(GraphFormatError, match=r":2:"):
        loads_graph('{"nodes": [[0, 0]],\n "edges": [[0, 1]')


def test_empty_graph_parses():
    g = loads_graph('{"nodes": [], "edges": []}')
    assert g.num_nodes == 0 and validate(g) == []


def test_segment_graph_round_trip():
    seg = SegmentGraph(([(0, 0), (1.5, 0.25)], [(1.5, 0.25), (3, 1)]), ((0, 1),))
    back = loads_segment_graph(dumps_segment_graph(seg))
    assert back.successors == seg.successors
    for a, b in zip(back.segments, seg.segments):
        assert np.array_equal(a.polyline, b.polyline)


def test_permuted_graph_equality():
    g = NodeGraph.from_edges([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])
    p = g.permuted([2, 0, 1])
    assert edge_set(p) == {(1, 2), (2, 0)}
    assert p != g and p.permuted([1, 2, 0]) == g
