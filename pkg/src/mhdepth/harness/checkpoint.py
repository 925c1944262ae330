"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint32 version, uint64 header length,
a UTF-8 JSON header, then every array as raw little-endian float64 in header
order. The header carries the config hash; loading under a different config
is refused.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig

MAGIC = b"MHDCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def model_arrays(models) -> dict[str, np.ndarray]:
    arrays = {}
    arrays.update({f"det.{k}": v for k, v in models.detector.state().items()})
    arrays.update({f"phys.{k}": v for k, v in models.physique.state().items()})
    arrays.update({f"disc.{k}": v for k, v in models.disc.to_arrays().items()})
    for prefix, opt in (("opt_det", models.opt_det), ("opt_disc", models.opt_disc)):
        if opt is not None:
            arrays.update({f"{prefix}.{k}": v for k, v in opt.velocity.items()})
    return arrays


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs = [], []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({**meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    meta = json.loads(raw[start:start + hlen].decode())
    offset = start + hlen
    arrays = {}
    for entry in meta.pop("arrays"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(entry["shape"]).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after the last array")
    return meta, arrays


def save_checkpoint(path, cfg: ExperimentConfig, models, epoch: int, stage: int) -> None:
    meta = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "epoch": epoch, "stage": stage}
    write_checkpoint(path, model_arrays(models), meta)


def load_checkpoint(path, cfg: ExperimentConfig | None = None):
    """Rebuild the models stored at ``path``.

    With ``cfg`` given, its hash must match the one recorded at save time.
    Returns ``(cfg, models, meta)``.
    """
    from ..skeleton import SkeletonTopology
    from .train import build_models

    meta, arrays = read_checkpoint(path)
    if cfg is not None and cfg.hash() != meta["config_hash"]:
        raise CheckpointError(
            f"config hash {cfg.hash()} does not match checkpoint hash {meta['config_hash']}")
    cfg = cfg or ExperimentConfig.from_dict(meta["config"])
    models = build_models(cfg, SkeletonTopology.default())

    def part(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

    models.detector.load_state(part("det"))
    models.physique.load_state(part("phys"))
    disc = part("disc")
    for k, v in disc.items():
        if models.disc[k].shape != v.shape:
            raise CheckpointError(f"discriminator parameter {k} has shape {v.shape}")
    models.disc = type(models.disc).from_arrays(models.disc.dims, disc)
    # optimisers must track the freshly loaded tensors
    from .train import SGD
    det_params = {**{f"det.{k}": v for k, v in models.detector.params.items()},
                  **{f"phys.{k}": v for k, v in models.physique.params.items()}}
    o = cfg.optim
    models.opt_det = SGD(det_params, o.lr, o.momentum, o.grad_clip)
    models.opt_disc = SGD(models.disc.tensors, o.disc_lr, o.momentum, o.grad_clip)
    for prefix, opt in (("opt_det", models.opt_det), ("opt_disc", models.opt_disc)):
        for k, v in part(prefix).items():
            if k in opt.velocity:
                opt.velocity[k] = v
    return cfg, models, meta
