"""Dual-branch GraphSAGE discriminator over keypoint and bone graphs.

Each branch: one-hot node index appended to the node features, a linear
lift, ``n_blocks`` residual graph blocks (two SAGE-LayerNorm-ReLU stages
each), and a final SAGE refinement. Both branches are flattened,
concatenated and scored by a Linear-ReLU-Linear header.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .skeleton import DualGraphInput, SkeletonTopology, bones_from_pose, root_center

BRANCHES = ("kp", "bone")


@dataclass(frozen=True)
class DiscriminatorDims:
    n_joints: int = 18
    in_dim: int = 3
    hidden: int = 64
    n_blocks: int = 2
    out_dim: int = 16
    header_hidden: int = 128

    def nodes(self, branch: str) -> int:
        return self.n_joints if branch == "kp" else self.n_joints - 1


class DiscriminatorParams:
    """Named parameter tensors plus the dimensions they were built for."""

    def __init__(self, dims: DiscriminatorDims, tensors: dict[str, dc.Tensor]):
        self.dims = dims
        self.tensors = tensors

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.tensors[name]

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, dims: DiscriminatorDims, arrays: dict[str, np.ndarray]):
        return cls(dims, {k: dc.Tensor.param(v, name=k) for k, v in arrays.items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_params(dims: DiscriminatorDims = DiscriminatorDims(), seed: int = 0) -> DiscriminatorParams:
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        arrays[f"{name}.w"] = _xavier(rng, fan_in, fan_out)
        arrays[f"{name}.b"] = np.zeros(fan_out)

    def sage(name, fan_in, fan_out):
        arrays[f"{name}.w_self"] = _xavier(rng, fan_in, fan_out)
        arrays[f"{name}.w_neigh"] = _xavier(rng, fan_in, fan_out)
        arrays[f"{name}.b"] = np.zeros(fan_out)

    flat = 0
    for br in BRANCHES:
        n = dims.nodes(br)
        linear(f"{br}.lift", dims.in_dim + n, dims.hidden)
        for k in range(dims.n_blocks):
            for s in (1, 2):
                sage(f"{br}.block{k}.sage{s}", dims.hidden, dims.hidden)
                arrays[f"{br}.block{k}.ln{s}.gamma"] = np.ones(dims.hidden)
                arrays[f"{br}.block{k}.ln{s}.beta"] = np.zeros(dims.hidden)
        sage(f"{br}.final", dims.hidden, dims.out_dim)
        flat += n * dims.out_dim
    linear("head.fc1", flat, dims.header_hidden)
    linear("head.fc2", dims.header_hidden, 1)
    return DiscriminatorParams.from_arrays(dims, arrays)


def mean_aggregator(adjacency) -> np.ndarray:
    """Row-normalised adjacency; isolated nodes get an all-zero row."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def sage_conv(x, adjacency, w_self, w_neigh, bias) -> dc.Tensor:
    """``out[v] = x[v] W_self + mean_{u ~ v} x[u] W_neigh + b`` for ``x`` of shape (..., nodes, d)."""
    x = dc.as_tensor(x)
    agg = mean_aggregator(adjacency)
    if agg.shape[0] != x.shape[-2]:
        raise dc.ShapeError(f"adjacency has {agg.shape[0]} nodes, features have {x.shape[-2]}")
    neigh = dc.matmul(agg, x)
    return dc.matmul(x, w_self) + dc.matmul(neigh, w_neigh) + bias


def _layernorm(x, gamma, beta):
    return dc.layernorm(x) * gamma + beta


def graph_block(x, adjacency, params: dict, prefix: str) -> dc.Tensor:
    x = dc.as_tensor(x)
    if params[f"{prefix}.sage2.w_self"].shape[1] != x.shape[-1]:
        raise dc.ShapeError("residual block needs equal input and output widths")
    h = x
    for s in (1, 2):
        h = sage_conv(h, adjacency, params[f"{prefix}.sage{s}.w_self"],
                      params[f"{prefix}.sage{s}.w_neigh"], params[f"{prefix}.sage{s}.b"])
        h = dc.relu(_layernorm(h, params[f"{prefix}.ln{s}.gamma"], params[f"{prefix}.ln{s}.beta"]))
    return x + h


def branch_trunk(nodes, adjacency, params, branch: str, n_blocks: int) -> dc.Tensor:
    """Lift, residual blocks and final refinement for one graph; (..., nodes, out_dim)."""
    nodes = dc.as_tensor(nodes)
    n = nodes.shape[-2]
    onehot = np.broadcast_to(np.eye(n), nodes.shape[:-2] + (n, n))
    h = dc.concat([nodes, onehot], axis=-1)
    h = dc.matmul(h, params[f"{branch}.lift.w"]) + params[f"{branch}.lift.b"]
    for k in range(n_blocks):
        h = graph_block(h, adjacency, params, f"{branch}.block{k}")
    return sage_conv(h, adjacency, params[f"{branch}.final.w_self"],
                     params[f"{branch}.final.w_neigh"], params[f"{branch}.final.b"])


def discriminator_forward(g: DualGraphInput, p: DiscriminatorParams) -> dc.Tensor:
    """Realism score per pose; node arrays may carry leading batch axes."""
    kp = dc.as_tensor(g.keypoint_nodes)
    bone = dc.as_tensor(g.bone_nodes)
    if kp.shape[-2] != p.dims.n_joints or bone.shape[-2] != p.dims.n_joints - 1:
        raise ValueError(
            f"graph with {kp.shape[-2]} joints does not match a discriminator for {p.dims.n_joints}")
    lead = kp.shape[:-2]
    feats = []
    for br, nodes, adj in (("kp", kp, g.keypoint_adjacency), ("bone", bone, g.bone_adjacency)):
        h = branch_trunk(nodes, adj, p.tensors, br, p.dims.n_blocks)
        feats.append(dc.reshape(h, lead + (h.shape[-2] * h.shape[-1],)))
    z = dc.concat(feats, axis=-1)
    if not lead:
        z = dc.reshape(z, (1, z.shape[0]))
    z = dc.relu(dc.matmul(z, p["head.fc1.w"]) + p["head.fc1.b"])
    z = dc.matmul(z, p["head.fc2.w"]) + p["head.fc2.b"]
    return dc.reshape(z, lead)


def score_poses(poses, topo: SkeletonTopology, p: DiscriminatorParams, scale: float = 1e-3) -> dc.Tensor:
    """Score (..., J, 3) poses in mm: root-centred, scaled to metres, both graphs built inside."""
    poses = dc.as_tensor(poses)
    centred = root_center(poses, topo.root) * scale
    g = DualGraphInput(
        keypoint_nodes=centred,
        keypoint_adjacency=topo.adjacency(),
        bone_nodes=bones_from_pose(centred, topo),
        bone_adjacency=topo.bone_adjacency(),
    )
    return discriminator_forward(g, p)
