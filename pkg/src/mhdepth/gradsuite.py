"""Finite-difference gradient checks for every differentiable piece of the model.

Each case is a scalar function of one array plus the point to check it at.
``run_suite`` returns the relative error per case (see ``diffcore.grad_check``).
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import diffcore as dc
from .decoder import DecoderConfig, expected_index, hypothesis_windows, windowed_depth
from .discriminator import DiscriminatorDims, discriminator_forward, init_params, score_poses
from .losses import (LossWeights, lsgan_discriminator_loss, lsgan_generator_wta_loss, mask_loss,
                     render_wta_loss)
from .sampler import KinematicTemplate, PoseParams, forward_kinematics, render_skeleton_mask
from .skeleton import SkeletonTopology, build_dual_graph

Case = tuple[str, Callable[[dc.Tensor], dc.Tensor], np.ndarray]

STEP = 1e-5
TOLERANCE = 1e-4


def _mask_cases(rng) -> list[Case]:
    gt = rng.uniform(0, 1, (2, 6, 6))
    w = LossWeights(lambda_s=1.0, lambda_p=0.7)
    return [
        ("mask loss", lambda x: mask_loss(gt, dc.sigmoid(x), dc.sigmoid(x * 0.5 + 0.2), w),
         rng.normal(size=(2, 6, 6))),
    ]


def _gan_cases(rng) -> list[Case]:
    real = rng.normal(size=4)
    fake = rng.normal(size=(4, 3))
    valid = np.array([3, 2, 1, 3])
    return [
        ("lsgan discriminator loss (fake)", lambda x: lsgan_discriminator_loss(real, x, valid), fake),
        ("lsgan discriminator loss (real)", lambda x: lsgan_discriminator_loss(x, fake, valid), real),
        ("lsgan generator wta loss", lambda x: lsgan_generator_wta_loss(x, valid), fake),
    ]


def _render_cases(rng) -> list[Case]:
    target = rng.normal(size=(2, 5, 3))
    hypo = target[:, None] + rng.normal(scale=0.5, size=(2, 3, 5, 3))
    topo = SkeletonTopology.default()
    pose2d = rng.uniform(2, 10, (topo.j, 2))
    weights = rng.uniform(0, 1, (12, 12))
    return [
        ("render wta loss", lambda x: render_wta_loss(target, x, np.array([3, 2])), hypo),
        ("skeleton mask rendering",
         lambda x: dc.sum_(render_skeleton_mask(x, topo, 1.5, 12) * weights), pose2d),
    ]


def _decoder_cases(rng) -> list[Case]:
    logits = rng.normal(size=(2, 3, 32))
    m = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    windows, _ = hypothesis_windows(m, DecoderConfig(n_hypo=3, n_w=4))
    w = rng.normal(size=(2, 3, 3))
    return [
        ("windowed depth", lambda x: dc.sum_(windowed_depth(dc.softmax(x, -1), windows) * w), logits),
        ("soft-argmax", lambda x: dc.sum_(expected_index(dc.softmax(x, -1)) * w[:, 0]), logits),
    ]


def _discriminator_cases(rng) -> list[Case]:
    topo = SkeletonTopology.default()
    dims = DiscriminatorDims(n_joints=topo.j, hidden=16, n_blocks=2, out_dim=8, header_hidden=16)
    params = init_params(dims, seed=3)
    template = KinematicTemplate.default()
    pose = forward_kinematics(PoseParams.rest(topo.names), template) + rng.normal(scale=20, size=(topo.j, 3))
    graph = build_dual_graph(pose * 1e-3, topo)

    def with_param(name):
        def f(x):
            tensors = dict(params.tensors)
            tensors[name] = x
            return discriminator_forward(graph, type(params)(dims, tensors))
        return f

    cases: list[Case] = [
        ("discriminator forward (pose)",
         lambda x: score_poses(x, topo, params), pose),
    ]
    for name in ("kp.lift.w", "kp.block0.sage1.w_neigh", "bone.block1.sage2.w_self",
                 "bone.block0.ln1.gamma", "kp.block1.ln2.beta", "kp.final.w_self", "head.fc1.w", "head.fc2.b"):
        cases.append((f"discriminator forward ({name})", with_param(name), params[name].data))
    return cases


def suite_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    return (_mask_cases(rng) + _gan_cases(rng) + _render_cases(rng) + _decoder_cases(rng)
            + _discriminator_cases(rng))


def run_suite(seed: int = 0, step: float = STEP) -> dict[str, float]:
    return {name: dc.grad_check(f, x, step) for name, f, x in suite_cases(seed)}


def main_report(seed: int = 0) -> tuple[float, str]:
    t0 = time.perf_counter()
    errors = run_suite(seed)
    lines = [f"{name:50s} {err:.3e}" for name, err in errors.items()]
    worst = max(errors.values())
    lines.append(f"max relative error {worst:.3e} ({time.perf_counter() - t0:.1f} s)")
    return worst, "\n".join(lines)
