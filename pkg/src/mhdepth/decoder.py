"""Soft-argmax and multi-hypothesis depth decoding of 3D joint heatmaps.

Heatmaps are stored as raw responses of shape ``(J, D, H, W)``; softmax is
applied over the ``D*H*W`` bins of each joint inside every operation.
Coordinates come back in heatmap units ordered ``(x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class DecoderConfig:
    n_hypo: int = 3
    n_w: int = 15

    def __post_init__(self):
        if self.n_hypo < 1:
            raise ValueError("n_hypo must be >= 1")
        if self.n_w < 1:
            raise ValueError("n_w must be >= 1")


@dataclass
class HypothesisSet:
    """Decoded candidates for one heatmap.

    ``poses`` is ``(n_hypo, J, 3)``. Slots past a joint's ``valid_count`` are
    not genuine peaks: they repeat the joint's first hypothesis and carry
    zero confidence, so confidences stay non-increasing along the hypothesis
    axis.
    """

    poses: np.ndarray
    confidences: np.ndarray
    valid_count: np.ndarray
    fallback: np.ndarray  # per joint: no interior peak, argmax used instead

    @property
    def n_hypo(self) -> int:
        return self.poses.shape[0]

    @property
    def n_pose_hypotheses(self) -> int:
        return int(self.valid_count.max())

    def to_json(self) -> dict:
        return {
            "poses": self.poses.tolist(),
            "confidences": self.confidences.tolist(),
            "valid_count": self.valid_count.tolist(),
            "fallback": self.fallback.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HypothesisSet":
        return cls(
            poses=np.asarray(obj["poses"], dtype=np.float64),
            confidences=np.asarray(obj["confidences"], dtype=np.float64),
            valid_count=np.asarray(obj["valid_count"], dtype=np.int64),
            fallback=np.asarray(obj["fallback"], dtype=bool),
        )


def _check_heatmap(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 4:
        raise ValueError(f"heatmap must be J x D x H x W, got shape {h.shape}")
    if h.shape[1] < 3:
        raise ValueError("heatmap needs at least 3 depth bins")
    if not np.all(np.isfinite(h)):
        raise ValueError("heatmap contains non-finite responses")
    return h


def _joint_softmax(h: np.ndarray) -> np.ndarray:
    flat = h.reshape(h.shape[0], -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(h.shape)


def soft_argmax_3d(h) -> np.ndarray:
    """Expected (x, y, z) bin position under the per-joint softmax."""
    p = _joint_softmax(_check_heatmap(h))
    _, d, hh, w = p.shape
    z = np.einsum("jzyx,z->j", p, np.arange(d, dtype=np.float64))
    y = np.einsum("jzyx,y->j", p, np.arange(hh, dtype=np.float64))
    x = np.einsum("jzyx,x->j", p, np.arange(w, dtype=np.float64))
    return np.stack([x, y, z], axis=1)


def marginalize_depth(h) -> np.ndarray:
    p = _joint_softmax(_check_heatmap(h))
    return p.sum(axis=(2, 3))


def _check_marginal(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    if m.ndim != 2:
        raise ValueError(f"depth marginal must be J x D, got shape {m.shape}")
    if m.shape[1] < 3:
        raise ValueError("peak detection needs at least 3 depth bins")
    return m


def candidate_peaks(m) -> np.ndarray:
    """Element-wise scan: interior bins that are >= both neighbours."""
    m = _check_marginal(m)
    j, d = m.shape
    mask = np.zeros((j, d), dtype=bool)
    for row in range(j):
        for i in range(1, d - 1):
            mask[row, i] = m[row, i] >= m[row, i - 1] and m[row, i] >= m[row, i + 1]
    return mask


def candidate_peaks_matrix(m) -> np.ndarray:
    """Same mask as :func:`candidate_peaks` from shifted-slice comparisons."""
    m = _check_marginal(m)
    centre = m[:, 1:-1]
    inner = (centre >= m[:, :-2]) & (centre >= m[:, 2:])
    mask = np.zeros(m.shape, dtype=bool)
    mask[:, 1:-1] = inner
    return mask


def top_k_peaks(m, mask, k: int) -> tuple[list[list[int]], np.ndarray, np.ndarray]:
    """Up to ``k`` candidate indices per joint, highest marginal first.

    Returns ``(peaks, valid_count, fallback)``. A row without any candidate
    falls back to its global argmax and is flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m = _check_marginal(m)
    mask = np.asarray(mask, dtype=bool).reshape(m.shape)
    peaks: list[list[int]] = []
    fallback = np.zeros(m.shape[0], dtype=bool)
    for row in range(m.shape[0]):
        idx = np.flatnonzero(mask[row])
        if idx.size == 0:
            peaks.append([int(np.argmax(m[row]))])
            fallback[row] = True
            continue
        # stable sort on -value keeps the lower index first among ties
        order = np.argsort(-m[row, idx], kind="stable")
        peaks.append([int(i) for i in idx[order[:k]]])
    valid = np.array([len(p) for p in peaks], dtype=np.int64)
    return peaks, valid, fallback


def window_bounds(peak: int, n_w: int, depth: int) -> tuple[int, int]:
    return max(0, peak - n_w), min(depth - 1, peak + n_w)


def refine_depth(m_row, peaks, n_w: int) -> np.ndarray:
    """Windowed centre of mass around each peak (window clamped to the row)."""
    m_row = np.asarray(m_row, dtype=np.float64)
    d = m_row.shape[0]
    idx = np.arange(d, dtype=np.float64)
    out = np.empty(len(peaks), dtype=np.float64)
    for h, peak in enumerate(peaks):
        lo, hi = window_bounds(int(peak), n_w, d)
        w = m_row[lo:hi + 1]
        den = float(w.sum())
        out[h] = float(idx[lo:hi + 1] @ w) / den if den > 0 else float(peak)
    return out


def _avg_pool_1d(x: np.ndarray, window: int, pad: int) -> np.ndarray:
    # stride 1, zero padding of ``pad`` on both sides
    padded = np.pad(x, (pad, pad))
    return np.convolve(padded, np.ones(window), mode="valid") / window


def refine_depth_pooled(m_row, peaks, n_w: int) -> np.ndarray:
    """Windowed centre of mass through two average-pooling passes.

    Pooling ``i * m`` and ``m`` with window ``2*n_w + 1`` and stride 1 gives
    the windowed sums up to a common factor, which cancels in the ratio.
    Zero padding contributes nothing to either sum, which is exactly the
    clamped window at the row edges.
    """
    m_row = np.asarray(m_row, dtype=np.float64)
    d = m_row.shape[0]
    idx = np.arange(d, dtype=np.float64)
    window = 2 * n_w + 1
    num = _avg_pool_1d(idx * m_row, window, n_w)
    den = _avg_pool_1d(m_row, window, n_w)
    peaks = np.asarray(peaks, dtype=np.intp)
    n, s = num[peaks], den[peaks]
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, n / safe, peaks.astype(np.float64))


def decode_marginals(xy: np.ndarray, m: np.ndarray, cfg: DecoderConfig) -> HypothesisSet:
    """Multi-hypothesis decoding from per-joint (x, y) and the depth marginal."""
    xy = np.asarray(xy, dtype=np.float64)
    m = _check_marginal(m)
    j = m.shape[0]
    mask = candidate_peaks_matrix(m)
    peaks, valid, fallback = top_k_peaks(m, mask, cfg.n_hypo)
    poses = np.empty((cfg.n_hypo, j, 3))
    conf = np.zeros((cfg.n_hypo, j))
    poses[:, :, 0] = xy[:, 0]
    poses[:, :, 1] = xy[:, 1]
    for row in range(j):
        z = refine_depth(m[row], peaks[row], cfg.n_w)
        n = len(z)
        poses[:n, row, 2] = z
        poses[n:, row, 2] = z[0]
        conf[:n, row] = m[row, peaks[row]]
    return HypothesisSet(poses=poses, confidences=conf, valid_count=valid, fallback=fallback)


def decode(h, cfg: DecoderConfig) -> HypothesisSet:
    h = _check_heatmap(h)
    xyz = soft_argmax_3d(h)
    return decode_marginals(xyz[:, :2], marginalize_depth(h), cfg)


# -- differentiable pieces used in training -----------------------------------
def hypothesis_windows(m: np.ndarray, cfg: DecoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Window masks for a batch of marginals.

    ``m`` is ``(B, J, D)``. Returns ``(windows, valid)`` with ``windows`` of
    shape ``(B, n_hypo, J, D)`` (0/1 entries) and per-sample pose-level
    hypothesis counts ``valid`` of shape ``(B,)``. Missing peaks reuse the
    joint's first window, mirroring :func:`decode_marginals`.
    """
    b, j, d = m.shape
    windows = np.zeros((b, cfg.n_hypo, j, d))
    valid = np.zeros(b, dtype=np.int64)
    for s in range(b):
        mask = candidate_peaks_matrix(m[s])
        peaks, counts, _ = top_k_peaks(m[s], mask, cfg.n_hypo)
        valid[s] = counts.max()
        for row, plist in enumerate(peaks):
            for h in range(cfg.n_hypo):
                peak = plist[h] if h < len(plist) else plist[0]
                lo, hi = window_bounds(peak, cfg.n_w, d)
                windows[s, h, row, lo:hi + 1] = 1.0
    return windows, valid


def windowed_depth(m: dc.Tensor, windows: np.ndarray) -> dc.Tensor:
    """Differentiable windowed centre of mass: ``(B, J, D)`` -> ``(B, n_hypo, J)``."""
    d = m.shape[-1]
    idx = np.arange(d, dtype=np.float64)
    mw = dc.reshape(m, (m.shape[0], 1, m.shape[1], d)) * windows
    num = dc.sum_(mw * idx, axis=-1)
    den = dc.sum_(mw, axis=-1)
    return num / den


def expected_index(p: dc.Tensor) -> dc.Tensor:
    """Soft-argmax along the last axis of an already-normalised distribution."""
    idx = np.arange(p.shape[-1], dtype=np.float64)
    return dc.sum_(p * idx, axis=-1)
