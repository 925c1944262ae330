import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mhdepth import diffcore as dc
from mhdepth.skeleton import SkeletonTopology, bones_from_pose, build_dual_graph, root_center

coords = st.floats(-2e3, 2e3, allow_nan=False)


def chain3():
    return SkeletonTopology(("a", "b", "c"), ((0, 1), (1, 2)), np.array([1.0, 1.0]))


def star3():
    return SkeletonTopology(("hub", "x", "y", "z"), ((0, 1), (0, 2), (0, 3)), np.ones(3))


def test_default_topology():
    t = SkeletonTopology.default()
    assert t.j == 18 and len(t.edges) == 17 and t.names[t.root] == "pelvis"
    assert SkeletonTopology.from_dict(t.to_dict()).to_dict() == t.to_dict()


@pytest.mark.parametrize("edges", [((0, 1),), ((0, 1), (0, 1)), ((0, 1), (2, 1)), ((0, 1), (1, 0))])
def test_invalid_trees_rejected(edges):
    with pytest.raises(ValueError):
        SkeletonTopology(("a", "b", "c"), edges, np.ones(len(edges)))


def test_nonpositive_length_rejected():
    with pytest.raises(ValueError):
        SkeletonTopology(("a", "b"), ((0, 1),), np.array([0.0]))


def test_bones_examples(rng):
    t = SkeletonTopology.default()
    np.testing.assert_array_equal(bones_from_pose(np.zeros((18, 3)), t), 0.0)
    two = SkeletonTopology(("a", "b"), ((0, 1),), np.array([100.0]))
    np.testing.assert_array_equal(bones_from_pose(np.array([[0, 0, 0], [0, 0, 100.0]]), two), [[0, 0, 100]])
    pose = rng.normal(size=(18, 3)) * 300
    lengths = np.linalg.norm(bones_from_pose(pose, t), axis=1)
    for e, (p, c) in enumerate(t.edges):
        assert lengths[e] == pytest.approx(np.linalg.norm(pose[c] - pose[p]), rel=1e-14)


def test_bones_pose_shape_checked():
    with pytest.raises(ValueError):
        bones_from_pose(np.zeros((17, 3)), SkeletonTopology.default())


@given(hnp.arrays(np.float64, (18, 3), elements=coords), hnp.arrays(np.float64, (3,), elements=coords))
def test_bones_translation_invariant(pose, v):
    t = SkeletonTopology.default()
    np.testing.assert_allclose(bones_from_pose(pose + v, t), bones_from_pose(pose, t), atol=1e-9)


def test_chain_and_star_graphs():
    g = build_dual_graph(np.zeros((3, 3)), chain3())
    assert {tuple(e) for e in np.argwhere(np.triu(g.keypoint_adjacency))} == {(0, 1), (1, 2)}
    np.testing.assert_array_equal(g.bone_adjacency, [[0, 1], [1, 0]])
    star = build_dual_graph(np.zeros((4, 3)), star3())
    np.testing.assert_array_equal(star.bone_adjacency, 1 - np.eye(3))


def test_default_bone_degrees_follow_line_graph_rule():
    t = SkeletonTopology.default()
    deg = t.degrees()
    bone_deg = t.bone_adjacency().sum(axis=1)
    for e, (p, c) in enumerate(t.edges):
        assert bone_deg[e] == deg[p] + deg[c] - 2


def test_adjacency_symmetric_and_pose_independent(rng):
    t = SkeletonTopology.default()
    a = build_dual_graph(rng.normal(size=(18, 3)), t)
    b = build_dual_graph(rng.normal(size=(18, 3)), t)
    for m in (a.keypoint_adjacency, a.bone_adjacency):
        assert (m == m.T).all() and not m.diagonal().any()
    np.testing.assert_array_equal(a.keypoint_adjacency, b.keypoint_adjacency)
    np.testing.assert_array_equal(a.bone_adjacency, b.bone_adjacency)


def test_graph_nodes(rng):
    t = SkeletonTopology.default()
    pose = rng.normal(size=(18, 3))
    g = build_dual_graph(pose, t)
    np.testing.assert_array_equal(g.keypoint_nodes[t.root], 0.0)
    for e, (p, c) in enumerate(t.edges):
        np.testing.assert_allclose(g.bone_nodes[e], pose[c] - pose[p])


def test_root_center(rng):
    pose = rng.normal(size=(18, 3))
    pose0 = pose - pose[0]
    np.testing.assert_array_equal(root_center(pose0, 0), pose0)
    v = np.array([5.0, -3.0, 100.0])
    np.testing.assert_allclose(root_center(pose + v, 0), root_center(pose, 0), atol=1e-12)
    assert np.all(root_center(pose, 3)[3] == 0.0)
    with pytest.raises(IndexError):
        root_center(pose, 18)


def test_tensor_paths_match_arrays(rng):
    t = SkeletonTopology.default()
    pose = rng.normal(size=(2, 18, 3))
    np.testing.assert_allclose(bones_from_pose(dc.Tensor(pose), t).data, bones_from_pose(pose, t))
    np.testing.assert_allclose(root_center(dc.Tensor(pose), 0).data, root_center(pose, 0))


def test_traversal_order_parents_first():
    t = SkeletonTopology.default()
    order = t.traversal_order()
    pos = {j: i for i, j in enumerate(order)}
    assert sorted(order) == list(range(18))
    assert all(pos[p] < pos[c] for p, c in t.edges)


def test_load_from_file(tmp_path):
    t = chain3()
    import json
    path = tmp_path / "chain.json"
    path.write_text(json.dumps(t.to_dict()))
    assert SkeletonTopology.load(path).edges == t.edges
