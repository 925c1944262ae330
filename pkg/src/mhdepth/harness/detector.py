"""Toy heatmap detector and the physique-mask reconstruction network.

The detector maps a 64x64 mask to per-joint logits along depth, height and
width. The 3D heatmap it stands for is their sum, ``H[j,z,y,x] = a[j,z] +
b[j,y] + c[j,x]``, so the joint softmax factorises into three 1-D softmaxes
and the depth marginal is exactly ``softmax(a)``. :meth:`ToyDetector.heatmap`
materialises the full ``J x D x H x W`` tensor when a caller needs it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def pool_masks(masks: np.ndarray, pool: int) -> np.ndarray:
    """Average-pool ``(B, S, S)`` masks over ``pool x pool`` patches and flatten."""
    masks = np.asarray(masks, dtype=np.float64)
    b, s, _ = masks.shape
    if s % pool:
        raise ValueError(f"image size {s} is not a multiple of pool {pool}")
    g = s // pool
    return masks.reshape(b, g, pool, g, pool).mean(axis=(2, 4)).reshape(b, g * g)


@dataclass
class HeatmapLogits:
    depth: dc.Tensor  # (B, J, D)
    y: dc.Tensor  # (B, J, H)
    x: dc.Tensor  # (B, J, W)


class ToyDetector:
    def __init__(self, n_joints: int, depth: int, height: int, width: int,
                 image_size: int = 64, pool: int = 8, hidden: int = 256, seed: int = 0):
        self.shape = (n_joints, depth, height, width)
        self.image_size = image_size
        self.pool = pool
        n_in = (image_size // pool) ** 2
        n_out = n_joints * (depth + height + width)
        rng = np.random.default_rng(seed)
        self.params = {
            "fc1.w": dc.Tensor.param(_xavier(rng, n_in, hidden)),
            "fc1.b": dc.Tensor.param(np.zeros(hidden)),
            "fc2.w": dc.Tensor.param(_xavier(rng, hidden, n_out)),
            "fc2.b": dc.Tensor.param(np.zeros(n_out)),
        }
        # fixed input standardisation, fitted once on the training masks
        self.norm_mean = np.zeros(n_in)
        self.norm_std = np.ones(n_in)

    def fit_normalizer(self, masks) -> None:
        pooled = pool_masks(masks, self.pool)
        self.norm_mean = pooled.mean(axis=0)
        self.norm_std = np.maximum(pooled.std(axis=0), 1e-3)

    def features(self, masks) -> np.ndarray:
        return (pool_masks(masks, self.pool) - self.norm_mean) / self.norm_std

    def forward(self, feats) -> HeatmapLogits:
        j, d, h, w = self.shape
        p = self.params
        hid = dc.relu(dc.matmul(dc.as_tensor(feats), p["fc1.w"]) + p["fc1.b"])
        out = dc.matmul(hid, p["fc2.w"]) + p["fc2.b"]
        out = dc.reshape(out, (out.shape[0], j, d + h + w))
        return HeatmapLogits(
            depth=dc.gather(out, np.arange(d), axis=2),
            y=dc.gather(out, np.arange(d, d + h), axis=2),
            x=dc.gather(out, np.arange(d + h, d + h + w), axis=2),
        )

    def heatmap(self, feats_row) -> np.ndarray:
        """Raw ``(J, D, H, W)`` responses for a single input."""
        logits = self.forward(np.asarray(feats_row)[None])
        a, b, c = logits.depth.data[0], logits.y.data[0], logits.x.data[0]
        return a[:, :, None, None] + b[:, None, :, None] + c[:, None, None, :]

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out["norm.mean"] = self.norm_mean.copy()
        out["norm.std"] = self.norm_std.copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        arrays = dict(arrays)
        for key, attr in (("norm.mean", "norm_mean"), ("norm.std", "norm_std")):
            if key in arrays:
                v = arrays.pop(key)
                if v.shape != getattr(self, attr).shape:
                    raise ValueError(f"{key}: checkpoint shape {v.shape} != {getattr(self, attr).shape}")
                setattr(self, attr, v.copy())
        for k, v in arrays.items():
            if k not in self.params:
                raise ValueError(f"unknown detector parameter {k}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {v.shape} != {self.params[k].shape}")
            self.params[k] = dc.Tensor.param(v)


class PhysiqueNet:
    """Two-layer perceptron from a skeleton mask to a physique mask (sigmoid output)."""

    def __init__(self, res: int = 32, hidden: int = 128, seed: int = 0):
        self.res = res
        rng = np.random.default_rng(seed)
        n = res * res
        self.params = {
            "fc1.w": dc.Tensor.param(_xavier(rng, n, hidden)),
            "fc1.b": dc.Tensor.param(np.zeros(hidden)),
            "fc2.w": dc.Tensor.param(_xavier(rng, hidden, n)),
            "fc2.b": dc.Tensor.param(np.zeros(n)),
        }

    def forward(self, skeleton_mask) -> dc.Tensor:
        m = dc.as_tensor(skeleton_mask)
        b = m.shape[0]
        p = self.params
        h = dc.relu(dc.matmul(dc.reshape(m, (b, self.res * self.res)), p["fc1.w"]) + p["fc1.b"])
        out = dc.sigmoid(dc.matmul(h, p["fc2.w"]) + p["fc2.b"])
        return dc.reshape(out, (b, self.res, self.res))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k] = dc.Tensor.param(v)
