"""Heatmap fixture files: a one-line JSON header followed by raw little-endian float64."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

BIMODAL_NAME = "bimodal_heatmap.bin"


def write_heatmap(path, h: np.ndarray) -> None:
    h = np.ascontiguousarray(h, dtype="<f8")
    header = json.dumps({"dtype": "<f8", "shape": list(h.shape)}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(h.tobytes())


def read_heatmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise ValueError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: bad header: {exc}") from None
    if header.get("dtype") != "<f8":
        raise ValueError(f"{path}: expected <f8 data, header says {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    body = raw[end + 1:]
    if len(body) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).copy()


def bimodal_heatmap(n_joints: int = 2, depth: int = 64, height: int = 8, width: int = 8,
                    centres=(16.0, 48.0), heights=(1.0, 0.8), sigma: float = 3.0) -> np.ndarray:
    """Log-heatmap whose depth marginal is two Gaussian bumps, for every joint.

    The bumps are mixed in probability space and logged with ``logaddexp``, so
    the marginal has no flat plateaus and exactly one local maximum per bump.
    """
    z = np.arange(depth, dtype=np.float64)
    logs = [np.log(a) - 0.5 * ((z - c) / sigma) ** 2 for a, c in zip(heights, centres)]
    depth_log = np.logaddexp.reduce(np.stack(logs), axis=0)
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    h = np.empty((n_joints, depth, height, width))
    for j in range(n_joints):
        cy = 1.5 + (j % (height - 3))
        cx = 2.0 + 0.5 * j
        xy_log = -0.5 * ((ys - cy) ** 2 + (xs - cx) ** 2)
        h[j] = depth_log[:, None, None] + xy_log[None]
    return h


def bundled_bimodal_path():
    return resources.files("mhdepth.data").joinpath(BIMODAL_NAME)
