"""Training objectives: winner-takes-all reduction, mask, LS-GAN and render losses.

All functions accept numpy arrays or diffcore tensors and return diffcore
tensors so they can sit anywhere in a differentiable graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 2e-2
    lambda_g: float = 1.0
    lambda_r: float = 0.5
    lambda_s: float = 1.0
    lambda_p: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def _valid_mask(shape: tuple[int, ...], valid) -> np.ndarray | None:
    if valid is None:
        return None
    valid = np.asarray(valid)
    n = shape[-1]
    return np.arange(n) < valid[..., None]


def wta_index(values: np.ndarray, valid=None) -> np.ndarray:
    """Index of the winning (smallest) hypothesis along the last axis; ties go low."""
    values = np.asarray(values, dtype=np.float64)
    mask = _valid_mask(values.shape, valid)
    if mask is not None:
        values = np.where(mask, values, np.inf)
    return np.argmin(values, axis=-1)


def wta(values, valid=None) -> dc.Tensor:
    """Minimum over the last (hypothesis) axis; only the winner gets gradient.

    ``valid`` optionally limits each row to its first ``valid`` entries.
    """
    values = dc.as_tensor(values)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise ValueError("wta needs at least one hypothesis")
    idx = wta_index(values.data, valid)
    onehot = np.zeros(values.shape)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return dc.sum_(values * onehot, axis=-1)


def _mse(a, b) -> dc.Tensor:
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return dc.mean(dc.square(a - b))


def mask_loss(m_gt, m_s, m_p, w: LossWeights) -> dc.Tensor:
    loss = _mse(m_gt, m_s) * w.lambda_s
    if m_p is not None:
        loss = loss + _mse(m_gt, m_p) * w.lambda_p
    return loss


def _scores_2d(scores) -> dc.Tensor:
    scores = dc.as_tensor(scores)
    if scores.ndim == 1:
        scores = dc.reshape(scores, (scores.shape[0], 1))
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("fake scores must be a non-empty samples x hypotheses array")
    return scores


def lsgan_discriminator_loss(real_scores, fake_scores, valid=None) -> dc.Tensor:
    real = dc.as_tensor(real_scores)
    if real.size == 0:
        raise ValueError("need at least one real score")
    fake = _scores_2d(fake_scores)
    real_term = dc.mean(dc.square(real - 1.0))
    fake_term = dc.mean(wta(dc.square(fake), valid))
    return real_term * 0.5 + fake_term * 0.5


def lsgan_generator_wta_loss(fake_scores, valid=None) -> dc.Tensor:
    fake = _scores_2d(fake_scores)
    return dc.mean(wta(dc.square(fake - 1.0), valid)) * 0.5


def hypothesis_pose_errors(x_synth, hypo_poses) -> dc.Tensor:
    """Mean over joints of squared distance, one value per hypothesis.

    ``x_synth`` is ``(..., J, 3)`` and ``hypo_poses`` ``(..., N, J, 3)``.
    """
    target = dc.as_tensor(x_synth)
    hypo = dc.as_tensor(hypo_poses)
    if hypo.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"pose shapes differ: {target.shape} vs {hypo.shape}")
    lead = target.shape[:-2]
    target = dc.reshape(target, lead + (1,) + target.shape[-2:])
    sq = dc.sum_(dc.square(hypo - target), axis=-1)
    return dc.mean(sq, axis=-1)


def render_wta_loss(x_synth, hypo_poses, valid=None) -> dc.Tensor:
    """Best-hypothesis squared pose error, averaged over any batch axes."""
    return dc.mean(wta(hypothesis_pose_errors(x_synth, hypo_poses), valid))


def total_loss(mask, gen, render, w: LossWeights) -> dc.Tensor:
    return (dc.as_tensor(mask) * w.lambda_m + dc.as_tensor(gen) * w.lambda_g
            + dc.as_tensor(render) * w.lambda_r)
