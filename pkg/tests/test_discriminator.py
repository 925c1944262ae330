import numpy as np
import pytest
from hypothesis import given, strategies as st

from mhdepth import diffcore as dc
from mhdepth.discriminator import (DiscriminatorDims, discriminator_forward, graph_block, init_params,
                                   mean_aggregator, sage_conv, score_poses)
from mhdepth.losses import lsgan_discriminator_loss
from mhdepth.sampler import KinematicTemplate, PoseParams, forward_kinematics
from mhdepth.skeleton import SkeletonTopology, build_dual_graph

SMALL = dict(hidden=8, n_blocks=2, out_dim=4, header_hidden=8)


def random_graph(rng, n, p=0.4):
    a = rng.uniform(size=(n, n)) < p
    a = np.triu(a, 1)
    return a | a.T


def naive_sage(x, adj, ws, wn, b):
    out = np.zeros((x.shape[0], ws.shape[1]))
    for v in range(x.shape[0]):
        nbrs = [u for u in range(x.shape[0]) if adj[v, u]]
        mean = np.zeros(x.shape[1])
        for u in nbrs:
            mean += x[u]
        if nbrs:
            mean /= len(nbrs)
        out[v] = x[v] @ ws + mean @ wn + b
    return out


@given(st.integers(0, 10_000))
def test_sage_conv_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    n, din, dout = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 5)
    x = rng.normal(size=(n, din))
    adj = random_graph(rng, n)
    ws, wn, b = rng.normal(size=(din, dout)), rng.normal(size=(din, dout)), rng.normal(size=dout)
    got = sage_conv(x, adj, ws, wn, b).data
    assert np.allclose(got, naive_sage(x, adj, ws, wn, b), atol=1e-12)


def test_sage_identity_map(rng):
    x = rng.normal(size=(5, 3))
    out = sage_conv(x, random_graph(rng, 5), np.eye(3), np.zeros((3, 3)), np.zeros(3))
    assert np.allclose(out.data, x)


def test_sage_complete_graph_identical_features(rng):
    n, d = 6, 4
    x = np.tile(rng.normal(size=d), (n, 1))
    adj = ~np.eye(n, dtype=bool)
    ws, wn, b = rng.normal(size=(d, 2)), rng.normal(size=(d, 2)), rng.normal(size=2)
    out = sage_conv(x, adj, ws, wn, b).data
    assert np.allclose(out, x[0] @ (ws + wn) + b)


def test_isolated_node_has_zero_neighbour_term():
    agg = mean_aggregator(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    assert np.all(agg[2] == 0)
    assert np.allclose(agg[:2].sum(axis=1), 1.0)


def test_sage_shape_mismatch_rejected(rng):
    with pytest.raises(dc.ShapeError):
        sage_conv(rng.normal(size=(4, 2)), np.zeros((3, 3)), np.eye(2), np.eye(2), np.zeros(2))


def _block_params(rng, d, zero=False):
    p = {}
    for s in (1, 2):
        for k in ("w_self", "w_neigh"):
            p[f"b.sage{s}.{k}"] = np.zeros((d, d)) if zero else rng.normal(size=(d, d))
        p[f"b.sage{s}.b"] = np.zeros(d) if zero else rng.normal(size=d)
        p[f"b.ln{s}.gamma"] = np.zeros(d) if zero else rng.normal(size=d)
        p[f"b.ln{s}.beta"] = np.zeros(d) if zero else rng.normal(size=d)
    return p


def test_graph_block_zero_weights_is_identity(rng):
    x = rng.normal(size=(7, 5))
    out = graph_block(x, random_graph(rng, 7), _block_params(rng, 5, zero=True), "b")
    assert np.allclose(out.data, x)


def test_graph_block_dim_mismatch_rejected(rng):
    p = _block_params(rng, 4)
    with pytest.raises(dc.ShapeError):
        graph_block(rng.normal(size=(3, 5)), random_graph(rng, 3), p, "b")


@given(st.integers(0, 10_000))
def test_graph_block_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n, d = 6, 4
    x = rng.normal(size=(n, d))
    adj = random_graph(rng, n)
    p = _block_params(rng, d)
    perm = rng.permutation(n)
    out = graph_block(x, adj, p, "b").data
    out_perm = graph_block(x[perm], adj[np.ix_(perm, perm)], p, "b").data
    assert np.allclose(out_perm, out[perm], atol=1e-10)


def test_graph_block_gradient_two_blocks(rng):
    adj = random_graph(rng, 5, 0.6)
    p1, p2 = _block_params(rng, 3), _block_params(rng, 3)
    w = rng.normal(size=(5, 3))

    def f(x):
        h = graph_block(graph_block(x, adj, p1, "b"), adj, p2, "b")
        return dc.sum_(h * w)
    assert dc.grad_check(f, rng.normal(size=(5, 3))) < 1e-5


def _pose(rng, noise=30.0):
    topo = SkeletonTopology.default()
    rest = forward_kinematics(PoseParams.rest(topo.names), KinematicTemplate.default())
    return rest + rng.normal(scale=noise, size=rest.shape)


def test_zero_parameters_give_constant_score(rng):
    dims = DiscriminatorDims(**SMALL)
    params = init_params(dims, seed=0)
    arrays = {k: np.zeros_like(v) for k, v in params.to_arrays().items()}
    arrays["head.fc2.b"] = np.array([0.37])
    zero = type(params).from_arrays(dims, arrays)
    topo = SkeletonTopology.default()
    scores = [score_poses(_pose(rng), topo, zero).item() for _ in range(3)]
    assert np.allclose(scores, 0.37)


def test_translation_invariant_score(rng):
    topo = SkeletonTopology.default()
    params = init_params(DiscriminatorDims(**SMALL), seed=1)
    pose = _pose(rng)
    a = discriminator_forward(build_dual_graph(pose, topo), params).item()
    b = discriminator_forward(build_dual_graph(pose + [250.0, -40.0, 900.0], topo), params).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_batched_scores_match_single(rng):
    topo = SkeletonTopology.default()
    params = init_params(DiscriminatorDims(**SMALL), seed=2)
    poses = np.stack([_pose(rng) for _ in range(4)])
    batched = score_poses(poses, topo, params).data
    single = [score_poses(p, topo, params).item() for p in poses]
    assert batched.shape == (4,)
    assert np.allclose(batched, single, atol=1e-12)


def test_topology_mismatch_rejected(rng):
    params = init_params(DiscriminatorDims(**SMALL), seed=0)
    topo = SkeletonTopology.default()
    g = build_dual_graph(_pose(rng), topo)
    g.keypoint_nodes = g.keypoint_nodes[:-1]
    with pytest.raises(ValueError):
        discriminator_forward(g, params)


def test_score_gradient_wrt_joints(rng):
    topo = SkeletonTopology.default()
    params = init_params(DiscriminatorDims(**SMALL), seed=4)
    assert dc.grad_check(lambda x: score_poses(x, topo, params), _pose(rng)) < 1e-4


def test_init_deterministic_and_bounded():
    dims = DiscriminatorDims(**SMALL)
    a, b, c = init_params(dims, seed=5), init_params(dims, seed=5), init_params(dims, seed=6)
    for name, t in a.items():
        assert np.array_equal(t.data, b[name].data)
        if name.endswith((".w", ".w_self", ".w_neigh")):
            fan_in, fan_out = t.shape
            assert np.all(np.abs(t.data) <= np.sqrt(6.0 / (fan_in + fan_out)))
            assert not np.array_equal(t.data, c[name].data)
        elif name.endswith(".b") or name.endswith(".beta"):
            assert np.all(t.data == 0)


def test_no_dead_parameters(rng):
    topo = SkeletonTopology.default()
    params = init_params(DiscriminatorDims(**SMALL), seed=7)
    real = np.stack([_pose(rng, 5.0) for _ in range(6)])
    fake = np.stack([_pose(rng, 200.0) for _ in range(6)])
    loss = lsgan_discriminator_loss(score_poses(real, topo, params),
                                    dc.reshape(score_poses(fake, topo, params), (6, 1)),
                                    np.ones(6, dtype=int))
    params.zero_grad()
    loss.backward()
    for name, t in params.items():
        assert t.grad is not None and np.any(t.grad != 0), name
