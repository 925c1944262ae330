"""Synthetic pose generation: truncated-Gaussian parameters, a kinematic
chain body model, pinhole cameras and soft skeleton masks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .skeleton import SkeletonTopology

DEFAULT_POSE_SPEC = "pose_spec_default.json"
DEFAULT_TEMPLATE = "template_h36m18.json"

# body frame (x right, y up, z backward) -> camera frame (x right, y down, z forward)
BODY_TO_CAMERA = np.diag([-1.0, -1.0, 1.0])


class SamplingError(RuntimeError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers (order matters)."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(state.generate_state(1, dtype=np.uint64)[0]) >> 1


# -- truncated Gaussians -------------------------------------------------------
@dataclass(frozen=True)
class TruncatedGaussianSpec:
    mu: float
    sigma: float
    gamma_l: float
    gamma_u: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.gamma_l < 0 or self.gamma_u < 0:
            raise ValueError("truncation offsets must be non-negative")
        if self.gamma_l + self.gamma_u <= 0:
            raise ValueError("truncation interval has zero width")

    @classmethod
    def from_widths(cls, lower: float, upper: float, mu: float = 0.0) -> "TruncatedGaussianSpec":
        """Interval ``[mu - lower, mu + upper]`` with +-2 sigma spanning it."""
        width = lower + upper
        return cls(mu=mu, sigma=width / 4.0 if width > 0 else 1.0, gamma_l=lower, gamma_u=upper)

    @property
    def low(self) -> float:
        return self.mu - self.gamma_l

    @property
    def high(self) -> float:
        return self.mu + self.gamma_u

    def acceptance(self) -> float:
        a = (self.low - self.mu) / (self.sigma * math.sqrt(2.0))
        b = (self.high - self.mu) / (self.sigma * math.sqrt(2.0))
        return 0.5 * (math.erf(b) - math.erf(a))


MIN_ACCEPTANCE = 1e-6


def sample_truncated_gaussian(spec: TruncatedGaussianSpec, seed, size=None):
    """Rejection sampling from N(mu, sigma) restricted to the spec's interval."""
    rng = as_rng(seed)
    n = 1 if size is None else int(np.prod(size))
    p = spec.acceptance()
    if not p >= MIN_ACCEPTANCE:
        raise SamplingError(f"truncation interval carries too little mass for rejection ({p:.3g})")
    out = np.empty(0)
    while out.size < n:
        need = n - out.size
        batch = min(int(need / p * 1.2) + 16, 10_000_000)
        draws = rng.normal(spec.mu, spec.sigma, batch)
        keep = draws[(draws >= spec.low) & (draws <= spec.high)]
        out = np.concatenate([out, keep[:need]])
    if size is None:
        return float(out[0])
    return out.reshape(size)


# -- pose parameter space --------------------------------------------------------
@dataclass(frozen=True)
class PoseParamSpec:
    joint_names: tuple[str, ...]  # articulated joints, in parameter order
    rotation_specs: tuple[tuple[TruncatedGaussianSpec, ...], ...]  # 3 per joint, degrees
    rest_probability: float
    shape_spec: TruncatedGaussianSpec
    n_shape: int
    global_rotation_spec: tuple[TruncatedGaussianSpec, ...]  # degrees

    def __post_init__(self):
        if not 0.0 <= self.rest_probability <= 1.0:
            raise ValueError("rest_probability must lie in [0, 1]")
        if any(len(t) != 3 for t in self.rotation_specs) or len(self.global_rotation_spec) != 3:
            raise ValueError("every articulation needs three axis specs")

    @classmethod
    def from_dict(cls, obj: dict) -> "PoseParamSpec":
        names, specs = [], []
        for name, triplet in obj["articulations"].items():
            names.append(name)
            specs.append(tuple(TruncatedGaussianSpec.from_widths(a, b) for a, b in triplet))
        shape = obj.get("shape", {"count": 2, "width": [1.5, 1.5]})
        return cls(
            joint_names=tuple(names),
            rotation_specs=tuple(specs),
            rest_probability=float(obj.get("rest_probability", 0.4)),
            shape_spec=TruncatedGaussianSpec.from_widths(*shape["width"]),
            n_shape=int(shape["count"]),
            global_rotation_spec=tuple(
                TruncatedGaussianSpec.from_widths(a, b) for a, b in obj["global_rotation"]),
        )

    @classmethod
    def load(cls, path) -> "PoseParamSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls) -> "PoseParamSpec":
        text = resources.files("mhdepth.data").joinpath(DEFAULT_POSE_SPEC).read_text()
        return cls.from_dict(json.loads(text))

    def with_global_widths(self, widths) -> "PoseParamSpec":
        return replace(self, global_rotation_spec=tuple(
            TruncatedGaussianSpec.from_widths(a, b) for a, b in widths))


@dataclass
class PoseParams:
    joint_names: tuple[str, ...]
    rotations: np.ndarray  # (n_articulations, 3) axis-angle components, degrees
    global_rotation: np.ndarray  # (3,) degrees
    shape: np.ndarray  # (n_shape,)
    at_rest: np.ndarray  # (n_articulations, 3) bool

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotations.ravel(), self.global_rotation, self.shape])

    @classmethod
    def rest(cls, joint_names, n_shape: int = 2) -> "PoseParams":
        n = len(joint_names)
        return cls(joint_names=tuple(joint_names), rotations=np.zeros((n, 3)),
                   global_rotation=np.zeros(3), shape=np.zeros(n_shape),
                   at_rest=np.ones((n, 3), dtype=bool))


def sample_pose_params(spec: PoseParamSpec, seed) -> PoseParams:
    rng = as_rng(seed)
    n = len(spec.joint_names)
    rest = rng.random((n, 3)) < spec.rest_probability
    rotations = np.empty((n, 3))
    for i, triplet in enumerate(spec.rotation_specs):
        for axis, s in enumerate(triplet):
            drawn = sample_truncated_gaussian(s, rng)
            rotations[i, axis] = s.mu if rest[i, axis] else drawn
    global_rot = np.array([sample_truncated_gaussian(s, rng) for s in spec.global_rotation_spec])
    shape = sample_truncated_gaussian(spec.shape_spec, rng, size=(spec.n_shape,))
    return PoseParams(joint_names=spec.joint_names, rotations=rotations,
                      global_rotation=global_rot, shape=shape, at_rest=rest)


# -- kinematic chain ---------------------------------------------------------------
def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (radians)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite rotation vector")
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


@dataclass(frozen=True, eq=False)
class KinematicTemplate:
    topology: SkeletonTopology
    rest_directions: np.ndarray  # (J-1, 3) unit vectors, body frame
    shape_basis: np.ndarray  # (n_shape, J-1) relative length change per unit coefficient
    shape_bound: float = 1.5

    def __post_init__(self):
        dirs = np.asarray(self.rest_directions, dtype=np.float64)
        if dirs.shape != (len(self.topology.edges), 3):
            raise ValueError("need one rest direction per bone")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rest directions must be unit vectors")
        basis = np.atleast_2d(np.asarray(self.shape_basis, dtype=np.float64))
        worst = 1.0 - self.shape_bound * np.abs(basis).sum(axis=0)
        if np.any(worst <= 0):
            raise ValueError("shape basis can drive a bone length to zero within bounds")
        object.__setattr__(self, "rest_directions", dirs)
        object.__setattr__(self, "shape_basis", basis)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    def bone_lengths(self, shape_coeffs=None) -> np.ndarray:
        lengths = self.topology.template_bone_lengths
        if shape_coeffs is None:
            return lengths.copy()
        beta = np.asarray(shape_coeffs, dtype=np.float64)
        return lengths * (1.0 + beta @ self.shape_basis)

    @classmethod
    def from_dict(cls, obj: dict, topology: SkeletonTopology) -> "KinematicTemplate":
        return cls(topology=topology, rest_directions=np.asarray(obj["rest_directions"], float),
                   shape_basis=np.asarray(obj["shape_basis"], float))

    @classmethod
    def default(cls) -> "KinematicTemplate":
        data = resources.files("mhdepth.data")
        obj = json.loads(data.joinpath(DEFAULT_TEMPLATE).read_text())
        topo = SkeletonTopology.from_dict(json.loads(data.joinpath(obj["skeleton"]).read_text()))
        return cls.from_dict(obj, topo)


def forward_kinematics(params: PoseParams, template: KinematicTemplate,
                       shape_coeffs=None) -> np.ndarray:
    """Joint positions (mm, body frame, root at origin) from axis-angle parameters.

    The rotation attached to a joint turns every bone that leaves it; the
    global rotation is attached to the root.
    """
    topo = template.topology
    if shape_coeffs is None:
        shape_coeffs = params.shape
    local = [np.eye(3) for _ in range(topo.j)]
    for name, rot in zip(params.joint_names, params.rotations):
        local[topo.index(name)] = rodrigues(np.radians(rot))
    local[topo.root] = rodrigues(np.radians(params.global_rotation)) @ local[topo.root]

    lengths = template.bone_lengths(shape_coeffs)
    edge_of = {c: e for e, (_, c) in enumerate(topo.edges)}
    parent_of = {c: p for p, c in topo.edges}
    world = [None] * topo.j
    joints = np.zeros((topo.j, 3))
    for k in topo.traversal_order():
        if k == topo.root:
            world[k] = local[k]
            continue
        p = parent_of[k]
        e = edge_of[k]
        joints[k] = joints[p] + world[p] @ (lengths[e] * template.rest_directions[e])
        world[k] = world[p] @ local[k]
    return joints


# -- camera ------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def project(pose_cam, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of camera-frame points (mm) to pixels."""
    p = np.asarray(pose_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise SamplingError("point at or behind the camera plane")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


# -- skeleton mask -------------------------------------------------------------------
_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(height: int, width: int):
    key = (height, width)
    if key not in _GRID_CACHE:
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        _GRID_CACHE[key] = (xs.ravel(), ys.ravel())
    return _GRID_CACHE[key]


def render_skeleton_mask(pose2d, topology: SkeletonTopology, thickness: float,
                         image_size) -> dc.Tensor | np.ndarray:
    """Soft capsule rendering of every bone, combined by a per-pixel max.

    ``pose2d`` is ``(..., J, 2)`` in pixel units; pixel centres sit on integer
    coordinates. Intensity is ``exp(-d^2 / (2 thickness^2))`` with ``d`` the
    distance from the pixel to the bone segment. Pass a diffcore tensor to
    get a differentiable result; arrays give arrays back.
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    height, width = image_size
    differentiable = isinstance(pose2d, dc.Tensor)
    pose = pose2d if differentiable else dc.Tensor(np.asarray(pose2d, dtype=np.float64))
    axis = pose.ndim - 2
    a = dc.gather(pose, topology.parents, axis)
    b = dc.gather(pose, topology.children, axis)
    ab = b - a
    lead = a.shape[:-1]
    ax = dc.reshape(dc.gather(a, [0], -1), lead + (1,))
    ay = dc.reshape(dc.gather(a, [1], -1), lead + (1,))
    abx = dc.reshape(dc.gather(ab, [0], -1), lead + (1,))
    aby = dc.reshape(dc.gather(ab, [1], -1), lead + (1,))
    px, py = _pixel_grid(height, width)
    apx = dc.sub(px, ax)
    apy = dc.sub(py, ay)
    len2 = dc.square(abx) + dc.square(aby) + 1e-12
    t = dc.clip((apx * abx + apy * aby) / len2, 0.0, 1.0)
    dx = apx - t * abx
    dy = apy - t * aby
    d2 = dc.square(dx) + dc.square(dy)
    intensity = dc.exp(d2 * (-0.5 / thickness ** 2))
    mask = dc.max_(intensity, axis=-2)
    mask = dc.reshape(mask, mask.shape[:-1] + (height, width))
    return mask if differentiable else mask.data


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary 8-bit PGM of a [0, 1] mask."""
    img = np.clip(np.round(np.asarray(mask) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# -- synthetic pairs ---------------------------------------------------------------------
@dataclass(frozen=True)
class CameraSpec:
    distance_mm: tuple[float, float] = (4500.0, 5500.0)
    pixels_per_metre: float = 26.0  # apparent scale at the root depth
    max_tilt_deg: float = 5.0
    max_offset_px: float = 2.0


@dataclass(frozen=True)
class HeatmapGrid:
    depth: int = 64
    height: int = 64
    width: int = 64
    depth_range_mm: float = 1000.0  # root-relative depth covered by +- half the bins

    def depth_to_bin(self, dz_mm):
        return (np.asarray(dz_mm) / self.depth_range_mm + 1.0) * 0.5 * (self.depth - 1)

    def bin_to_depth(self, z_bin):
        return (np.asarray(z_bin) / (self.depth - 1) * 2.0 - 1.0) * self.depth_range_mm

    def mm_per_bin(self) -> float:
        return 2.0 * self.depth_range_mm / (self.depth - 1)


@dataclass
class SynthSample:
    pose3d: np.ndarray  # (J, 3) mm, camera frame
    pose2d: np.ndarray  # (J, 2) pixels
    mask: np.ndarray  # (S, S)
    heatmap_coords: np.ndarray  # (J, 3) heatmap units
    seed: int
    camera: CameraModel
    image_size: int


def pose_to_heatmap(pose3d, pose2d, root: int, image_size: int, grid: HeatmapGrid) -> np.ndarray:
    pose3d = np.asarray(pose3d)
    out = np.empty(pose3d.shape)
    out[..., 0] = np.asarray(pose2d)[..., 0] * grid.width / image_size
    out[..., 1] = np.asarray(pose2d)[..., 1] * grid.height / image_size
    out[..., 2] = grid.depth_to_bin(pose3d[..., 2] - pose3d[..., root:root + 1, 2])
    return out


def heatmap_to_pose(coords, cam: CameraModel, root_depth_mm: float, image_size: int,
                    grid: HeatmapGrid) -> np.ndarray:
    """Inverse of :func:`pose_to_heatmap` given the camera and the root depth."""
    coords = np.asarray(coords, dtype=np.float64)
    u = coords[..., 0] * image_size / grid.width
    v = coords[..., 1] * image_size / grid.height
    z = root_depth_mm + grid.bin_to_depth(coords[..., 2])
    return np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=-1)


def random_camera(rng: np.random.Generator, spec: CameraSpec, image_size: int) -> CameraModel:
    distance = rng.uniform(*spec.distance_mm)
    f = spec.pixels_per_metre * distance / 1000.0
    tilt = np.radians(rng.uniform(-spec.max_tilt_deg, spec.max_tilt_deg))
    rot = rodrigues([tilt, 0.0, 0.0]) @ BODY_TO_CAMERA
    offset = rng.uniform(-spec.max_offset_px, spec.max_offset_px, 2) * distance / f
    centre = (image_size - 1) / 2.0
    # lift the root a little so the body (mostly below it in y-down) stays centred
    lift = 0.15 * image_size * distance / f
    return CameraModel(fx=f, fy=f, cx=centre, cy=centre, rotation=rot,
                       translation=np.array([offset[0], offset[1] - lift, distance]))


def _inside(pose2d: np.ndarray, image_size: int, margin: float = 0.05) -> bool:
    lo = margin * image_size
    hi = (1.0 - margin) * image_size - 1.0
    return bool(np.all(pose2d >= lo) and np.all(pose2d <= hi))


def finish_sample(pose_cam: np.ndarray, cam: CameraModel, template: KinematicTemplate,
                  seed: int, image_size: int, thickness: float, grid: HeatmapGrid) -> SynthSample | None:
    """Project, check visibility and render; ``None`` when the pose is rejected."""
    if np.any(pose_cam[:, 2] <= 0):
        return None
    pose2d = project(pose_cam, cam)
    if not _inside(pose2d, image_size):
        return None
    mask = render_skeleton_mask(pose2d, template.topology, thickness, image_size)
    coords = pose_to_heatmap(pose_cam, pose2d, template.topology.root, image_size, grid)
    return SynthSample(pose3d=pose_cam, pose2d=pose2d, mask=mask, heatmap_coords=coords,
                       seed=seed, camera=cam, image_size=image_size)


def make_synthetic_pair(spec: PoseParamSpec, template: KinematicTemplate, cam_spec: CameraSpec,
                        seed: int, image_size: int = 64, thickness: float = 1.5,
                        grid: HeatmapGrid = HeatmapGrid(), max_attempts: int = 100) -> SynthSample:
    for attempt in range(max_attempts):
        rng = np.random.default_rng(derive_seed(seed, attempt))
        params = sample_pose_params(spec, rng)
        body = forward_kinematics(params, template)
        cam = random_camera(rng, cam_spec, image_size)
        sample = finish_sample(cam.to_camera(body), cam, template, seed, image_size, thickness, grid)
        if sample is not None:
            return sample
    raise SamplingError(f"seed {seed}: {max_attempts} consecutive rejections")


def reflect_depth(sample: SynthSample, template: KinematicTemplate, thickness: float = 1.5,
                  grid: HeatmapGrid = HeatmapGrid()) -> SynthSample | None:
    """Mirror every joint's depth about the root's depth plane.

    Bone lengths and the orthographic projection are unchanged; only the
    sign of each joint's root-relative depth flips.
    """
    root = template.topology.root
    pose = sample.pose3d.copy()
    pose[:, 2] = 2.0 * pose[root, 2] - pose[:, 2]
    return finish_sample(pose, sample.camera, template, sample.seed, sample.image_size,
                         thickness, grid)
