"""Skeleton topology, bone vectors and the keypoint/bone graph pair."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc

DEFAULT_SKELETON = "skeleton_h36m18.json"


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]  # (parent, child)
    template_bone_lengths: np.ndarray  # mm, one per edge
    root: int = 0

    def __post_init__(self):
        j = len(self.names)
        if len(self.edges) != j - 1:
            raise ValueError(f"a tree over {j} joints needs {j - 1} edges, got {len(self.edges)}")
        lengths = np.asarray(self.template_bone_lengths, dtype=np.float64)
        if lengths.shape != (len(self.edges),) or np.any(lengths <= 0):
            raise ValueError("need one positive template length per edge")
        object.__setattr__(self, "template_bone_lengths", lengths)
        seen_child = set()
        for parent, child in self.edges:
            if not (0 <= parent < j and 0 <= child < j) or parent == child:
                raise ValueError(f"bad edge ({parent}, {child})")
            if child in seen_child or child == self.root:
                raise ValueError(f"joint {child} has more than one parent")
            seen_child.add(child)
        if len(_reachable(self.root, self.adjacency())) != j:
            raise ValueError("edges do not connect every joint to the root")

    @property
    def j(self) -> int:
        return len(self.names)

    @property
    def parents(self) -> np.ndarray:
        return np.array([p for p, _ in self.edges], dtype=np.intp)

    @property
    def children(self) -> np.ndarray:
        return np.array([c for _, c in self.edges], dtype=np.intp)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.j, self.j), dtype=bool)
        for p, c in self.edges:
            a[p, c] = a[c, p] = True
        return a

    def bone_adjacency(self) -> np.ndarray:
        """Line graph of the skeleton: bones touching a common joint."""
        n = len(self.edges)
        a = np.zeros((n, n), dtype=bool)
        for e, (p1, c1) in enumerate(self.edges):
            for f in range(e + 1, n):
                p2, c2 = self.edges[f]
                if {p1, c1} & {p2, c2}:
                    a[e, f] = a[f, e] = True
        return a

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)

    def traversal_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        kids: dict[int, list[int]] = {}
        for p, c in self.edges:
            kids.setdefault(p, []).append(c)
        order, stack = [], [self.root]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(kids.get(node, [])))
        return order

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "edges": [list(e) for e in self.edges],
            "bone_lengths_mm": self.template_bone_lengths.tolist(),
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SkeletonTopology":
        return cls(
            names=tuple(obj["names"]),
            edges=tuple((int(p), int(c)) for p, c in obj["edges"]),
            template_bone_lengths=np.asarray(obj["bone_lengths_mm"], dtype=np.float64),
            root=int(obj.get("root", 0)),
        )

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "SkeletonTopology":
        text = resources.files("mhdepth.data").joinpath(DEFAULT_SKELETON).read_text()
        return cls.from_dict(json.loads(text))


def _reachable(start: int, adjacency: np.ndarray) -> set[int]:
    seen, stack = {start}, [start]
    while stack:
        node = stack.pop()
        for nb in np.flatnonzero(adjacency[node]):
            if nb not in seen:
                seen.add(int(nb))
                stack.append(int(nb))
    return seen


@dataclass
class DualGraphInput:
    keypoint_nodes: np.ndarray  # (..., J, 3)
    keypoint_adjacency: np.ndarray  # (J, J) bool
    bone_nodes: np.ndarray  # (..., J-1, 3)
    bone_adjacency: np.ndarray  # (J-1, J-1) bool


def _check_pose(pose, topo: SkeletonTopology):
    if pose.shape[-2:] != (topo.j, 3):
        raise ValueError(f"pose shape {pose.shape} does not match a {topo.j}-joint topology")


def bones_from_pose(pose, topo: SkeletonTopology):
    """Child minus parent for every edge; works on arrays and on diffcore tensors."""
    _check_pose(pose, topo)
    if isinstance(pose, dc.Tensor):
        axis = pose.ndim - 2
        return dc.gather(pose, topo.children, axis) - dc.gather(pose, topo.parents, axis)
    pose = np.asarray(pose, dtype=np.float64)
    return pose[..., topo.children, :] - pose[..., topo.parents, :]


def root_center(pose, root_index: int = 0):
    j = pose.shape[-2]
    if not -j <= root_index < j:
        raise IndexError(f"root index {root_index} out of range for {j} joints")
    if isinstance(pose, dc.Tensor):
        root = dc.gather(pose, [root_index], pose.ndim - 2)
        return pose - root
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., root_index:root_index + 1, :]


def build_dual_graph(pose, topo: SkeletonTopology) -> DualGraphInput:
    _check_pose(pose, topo)
    centred = root_center(pose, topo.root)
    return DualGraphInput(
        keypoint_nodes=centred,
        keypoint_adjacency=topo.adjacency(),
        bone_nodes=bones_from_pose(pose, topo),
        bone_adjacency=topo.bone_adjacency(),
    )
