"""Synthetic dataset generation and the binary record format.

A dataset directory holds ``records.bin`` (fixed-size little-endian records,
layout given by ``dtype`` in the index) and ``index.json``. Ambiguity pairs
are a base sample and its depth reflection, stored next to each other and
cross-referenced through the ``partner`` field.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from ..sampler import (CameraModel, KinematicTemplate, PoseParamSpec, SamplingError,
                       SynthSample, derive_seed, make_synthetic_pair, reflect_depth)

FORMAT = "mhdepth-records"
VERSION = 1
RECORDS = "records.bin"
INDEX = "index.json"


def record_dtype(n_joints: int, image_size: int) -> np.dtype:
    return np.dtype([
        ("seed", "<i8"),
        ("partner", "<i8"),
        ("pose3d", "<f8", (n_joints, 3)),
        ("pose2d", "<f8", (n_joints, 2)),
        ("heatmap", "<f8", (n_joints, 3)),
        ("camera", "<f8", (16,)),  # fx fy cx cy, R row-major, t
        ("mask", "<f4", (image_size, image_size)),
    ])


def camera_to_row(cam: CameraModel) -> np.ndarray:
    return np.concatenate([[cam.fx, cam.fy, cam.cx, cam.cy], cam.rotation.ravel(), cam.translation])


def camera_from_row(row) -> CameraModel:
    row = np.asarray(row, dtype=np.float64)
    return CameraModel(fx=row[0], fy=row[1], cx=row[2], cy=row[3],
                       rotation=row[4:13].reshape(3, 3), translation=row[13:16])


def pose_spec_for(cfg: ExperimentConfig) -> PoseParamSpec:
    spec = PoseParamSpec.load(cfg.data.pose_spec) if cfg.data.pose_spec else PoseParamSpec.default()
    if cfg.data.global_yaw_deg > 0:
        yaw = cfg.data.global_yaw_deg
        widths = [(g.gamma_l, g.gamma_u) for g in spec.global_rotation_spec]
        widths[1] = (yaw, yaw)
        spec = spec.with_global_widths(widths)
    return spec


def orthographic_gap(a: SynthSample, b: SynthSample, root: int) -> float:
    """Largest 2D disagreement (pixels) of two root-aligned orthographic projections."""
    f = a.camera.fx / a.pose3d[root, 2]
    pa = (a.pose3d[:, :2] - a.pose3d[root, :2]) * f
    pb = (b.pose3d[:, :2] - b.pose3d[root, :2]) * f
    return float(np.abs(pa - pb).max())


def generate_samples(cfg: ExperimentConfig, n: int, seed: int):
    """Regular samples followed by ambiguity pairs; returns ``(samples, partners)``."""
    spec = pose_spec_for(cfg)
    template = KinematicTemplate.default()
    root = template.topology.root
    kw = dict(image_size=cfg.data.image_size, thickness=cfg.data.thickness, grid=cfg.grid)
    n_pairs = int(round(n * cfg.data.ambiguity_fraction / 2.0))
    n_regular = n - 2 * n_pairs
    samples: list[SynthSample] = []
    partners: list[int] = []
    for i in range(n_regular):
        samples.append(make_synthetic_pair(spec, template, cfg.camera, derive_seed(seed, 0, i), **kw))
        partners.append(-1)
    for k in range(n_pairs):
        for attempt in range(100):
            base = make_synthetic_pair(spec, template, cfg.camera, derive_seed(seed, 1, k, attempt), **kw)
            mirror = reflect_depth(base, template, cfg.data.thickness, cfg.grid)
            if mirror is None:
                continue
            if orthographic_gap(base, mirror, root) >= 1e-6 * cfg.data.image_size:
                raise SamplingError("reflected pose changed its orthographic projection")
            break
        else:
            raise SamplingError(f"ambiguity pair {k}: 100 consecutive rejections")
        i = len(samples)
        samples += [base, mirror]
        partners += [i + 1, i]
    return samples, partners


def to_records(samples, partners, n_joints: int, image_size: int) -> np.ndarray:
    rec = np.zeros(len(samples), dtype=record_dtype(n_joints, image_size))
    for i, (s, p) in enumerate(zip(samples, partners)):
        rec[i]["seed"] = s.seed
        rec[i]["partner"] = p
        rec[i]["pose3d"] = s.pose3d
        rec[i]["pose2d"] = s.pose2d
        rec[i]["heatmap"] = s.heatmap_coords
        rec[i]["camera"] = camera_to_row(s.camera)
        rec[i]["mask"] = s.mask
    return rec


def generate_dataset(cfg: ExperimentConfig, n_samples: int, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = KinematicTemplate.default()
    j = template.topology.j
    samples, partners = generate_samples(cfg, n_samples, seed) if n_samples > 0 else ([], [])
    index = {
        "format": FORMAT,
        "version": VERSION,
        "count": len(samples),
        "seed": seed,
        "n_joints": j,
        "image_size": cfg.data.image_size,
        "grid": {"depth": cfg.grid.depth, "height": cfg.grid.height, "width": cfg.grid.width,
                 "depth_range_mm": cfg.grid.depth_range_mm},
        "root": template.topology.root,
        "ambiguity_pairs": [[i, p] for i, p in enumerate(partners) if 0 <= i < p],
        "config_hash": cfg.hash(),
    }
    records_path = out / RECORDS
    if samples:
        rec = to_records(samples, partners, j, cfg.data.image_size)
        blob = rec.tobytes()
        records_path.write_bytes(blob)
        index["dtype"] = [list(field) for field in _descr(rec.dtype)]
        index["record_size"] = rec.dtype.itemsize
        index["sha256"] = hashlib.sha256(blob).hexdigest()
    elif records_path.exists():
        records_path.unlink()
    (out / INDEX).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return out


def _descr(dtype: np.dtype):
    for name in dtype.names:
        sub = dtype.fields[name][0]
        if sub.subdtype is not None:
            base, shape = sub.subdtype
            yield name, base.str, list(shape)
        else:
            yield name, sub.str, []


@dataclass
class Dataset:
    records: np.ndarray
    index: dict

    def __len__(self) -> int:
        return len(self.records)

    @property
    def masks(self) -> np.ndarray:
        return self.records["mask"].astype(np.float64)

    @property
    def pose3d(self) -> np.ndarray:
        return self.records["pose3d"]

    @property
    def heatmap(self) -> np.ndarray:
        return self.records["heatmap"]

    @property
    def pose2d(self) -> np.ndarray:
        return self.records["pose2d"]

    @property
    def cameras(self) -> np.ndarray:
        return self.records["camera"]

    @property
    def root(self) -> int:
        return int(self.index.get("root", 0))

    def camera(self, i: int) -> CameraModel:
        return camera_from_row(self.records["camera"][i])


def load_dataset(path) -> Dataset:
    path = Path(path)
    index_path = path / INDEX
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("format") != FORMAT or index.get("version") != VERSION:
        raise ValueError(f"{index_path} is not a version {VERSION} {FORMAT} index")
    dtype = record_dtype(index["n_joints"], index["image_size"])
    if index["count"] == 0:
        return Dataset(np.zeros(0, dtype=dtype), index)
    blob = (path / RECORDS).read_bytes()
    if hashlib.sha256(blob).hexdigest() != index["sha256"]:
        raise ValueError("records file does not match the checksum in its index")
    records = np.frombuffer(blob, dtype=dtype).copy()
    if len(records) != index["count"]:
        raise ValueError("record count disagrees with the index")
    return Dataset(records, index)
