"""Alternating adversarial training of the toy detector.

One iteration = ``disc_steps`` discriminator updates on the LS-GAN
discriminator loss (sampled synthetic poses as real, detached decoded
hypotheses as fake), then one detector update on
``lambda_m * mask + lambda_g * generator + lambda_r * render``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..config import ExperimentConfig
from ..decoder import expected_index, hypothesis_windows, windowed_depth
from ..discriminator import DiscriminatorDims, init_params, score_poses
from ..losses import (lsgan_discriminator_loss, lsgan_generator_wta_loss, mask_loss,
                      render_wta_loss, total_loss)
from ..sampler import render_skeleton_mask
from ..skeleton import SkeletonTopology
from .dataset import Dataset
from .detector import PhysiqueNet, ToyDetector

log = logging.getLogger(__name__)

LOG_FIELDS = ["stage", "epoch", "lr", "total", "mask", "gen", "render", "disc",
              "val_mpjpe_conf", "val_mpjpe_best"]


class NumericError(RuntimeError):
    pass


class SGD:
    """Heavy-ball momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, params: dict[str, dc.Tensor], lr: float, momentum: float = 0.9,
                 grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if self.grad_clip > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            p.data = p.data - self.lr * v


def learning_rate(cfg: ExperimentConfig, stage: int, epoch: int) -> float:
    o = cfg.optim
    if stage == 2:
        return o.lr_stage2
    return o.lr * (o.decay_factor if epoch >= o.decay_epoch else 1.0)


@dataclass
class BatchResult:
    total: dc.Tensor
    mask: float
    gen: float
    render: float
    hyp_mm: np.ndarray  # (B, N, J, 3) detached
    valid: np.ndarray


@dataclass
class Models:
    detector: ToyDetector
    physique: PhysiqueNet
    disc: object  # DiscriminatorParams
    opt_det: SGD = None
    opt_disc: SGD = None
    history: list = field(default_factory=list)


def build_models(cfg: ExperimentConfig, topo: SkeletonTopology) -> Models:
    g, m = cfg.grid, cfg.model
    det = ToyDetector(topo.j, g.depth, g.height, g.width, image_size=cfg.data.image_size,
                      pool=m.pool, hidden=m.hidden, seed=cfg.seeds.model)
    phys = PhysiqueNet(res=m.mask_res, hidden=m.physique_hidden, seed=cfg.seeds.model + 1)
    dims = DiscriminatorDims(n_joints=topo.j, hidden=m.disc_hidden, n_blocks=m.disc_blocks,
                             out_dim=m.disc_out, header_hidden=m.disc_header)
    disc = init_params(dims, seed=cfg.seeds.model + 2)
    models = Models(det, phys, disc)
    models.opt_det = SGD({**{f"det.{k}": v for k, v in det.params.items()},
                          **{f"phys.{k}": v for k, v in phys.params.items()}},
                         cfg.optim.lr, cfg.optim.momentum, cfg.optim.grad_clip)
    models.opt_disc = SGD(disc.tensors, cfg.optim.disc_lr, cfg.optim.momentum, cfg.optim.grad_clip)
    return models


def lowres_masks(ds: Dataset, topo: SkeletonTopology, res: int, thickness: float) -> np.ndarray:
    k = res / ds.index["image_size"]
    out = np.empty((len(ds), res, res))
    for start in range(0, len(ds), 64):
        sl = slice(start, start + 64)
        out[sl] = render_skeleton_mask(ds.pose2d[sl] * k, topo, thickness * k, res)
    return out


class Trainer:
    def __init__(self, cfg: ExperimentConfig, train_set: Dataset, topo: SkeletonTopology,
                 val_set: Dataset | None = None, models: Models | None = None):
        if len(train_set) == 0:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.ds = train_set
        self.val = val_set
        self.topo = topo
        self.models = models or build_models(cfg, topo)
        if models is None:
            self.models.detector.fit_normalizer(train_set.masks)
        self.feats = self.models.detector.features(train_set.masks)
        self.mask_gt = lowres_masks(train_set, topo, cfg.model.mask_res, cfg.data.thickness)
        cams = train_set.cameras
        self.fx, self.fy, self.cx, self.cy = (cams[:, i] for i in range(4))
        self.root_depth = train_set.pose3d[:, topo.root, 2]
        self.rng = np.random.default_rng(cfg.seeds.shuffle)

    # -- pieces -----------------------------------------------------------------
    def _to_mm(self, xs, ys, zh, idx):
        """Heatmap-unit hypotheses -> camera-frame mm, differentiably."""
        g, s = self.cfg.grid, self.ds.index["image_size"]
        shape = (len(idx), 1, 1)
        fx, fy = self.fx[idx].reshape(shape), self.fy[idx].reshape(shape)
        cx, cy = self.cx[idx].reshape(shape), self.cy[idx].reshape(shape)
        z0 = self.root_depth[idx].reshape(shape)
        depth = zh * (2.0 * g.depth_range_mm / (g.depth - 1)) + (z0 - g.depth_range_mm)
        u = xs * (s / g.width)
        v = ys * (s / g.height)
        x_mm = (u - cx) * depth / fx
        y_mm = (v - cy) * depth / fy
        n = zh.shape[1]
        b, j = len(idx), zh.shape[2]
        parts = [dc.reshape(t, (b, n, j, 1)) for t in (x_mm, y_mm, depth)]
        return dc.concat(parts, axis=-1)

    def forward_batch(self, idx: np.ndarray) -> BatchResult:
        cfg = self.cfg
        det = self.models.detector
        n = cfg.decoder.n_hypo
        logits = det.forward(self.feats[idx])
        m = dc.softmax(logits.depth, axis=-1)
        xs = expected_index(dc.softmax(logits.x, axis=-1))  # (B, J)
        ys = expected_index(dc.softmax(logits.y, axis=-1))
        windows, valid = hypothesis_windows(m.data, cfg.decoder)
        zh = windowed_depth(m, windows)  # (B, N, J)
        b, j = xs.shape
        xs_n = dc.reshape(xs, (b, 1, j)) + np.zeros((1, n, 1))
        ys_n = dc.reshape(ys, (b, 1, j)) + np.zeros((1, n, 1))
        hyp = dc.concat([dc.reshape(t, (b, n, j, 1)) for t in (xs_n, ys_n, zh)], axis=-1)

        render = render_wta_loss(self.ds.heatmap[idx], hyp, valid)

        k = cfg.model.mask_res / self.ds.index["image_size"]
        xy = dc.concat([dc.reshape(xs, (b, j, 1)), dc.reshape(ys, (b, j, 1))], axis=-1)
        pix = xy * (self.ds.index["image_size"] / cfg.grid.width * k)
        m_s = render_skeleton_mask(pix, self.topo, cfg.data.thickness * k, cfg.model.mask_res)
        m_p = self.models.physique.forward(m_s) if cfg.losses.lambda_p > 0 else None
        mask = mask_loss(self.mask_gt[idx], m_s, m_p, cfg.losses)

        hyp_mm = self._to_mm(xs_n, ys_n, zh, idx)
        if cfg.model.use_gan and cfg.losses.lambda_g > 0:
            gen = lsgan_generator_wta_loss(score_poses(hyp_mm, self.topo, self.models.disc), valid)
        else:
            gen = dc.Tensor(0.0)
        total = total_loss(mask, gen, render, cfg.losses)
        return BatchResult(total=total, mask=mask.item(), gen=gen.item(), render=render.item(),
                           hyp_mm=hyp_mm.data, valid=valid)

    def discriminator_step(self, fake_mm: np.ndarray, valid: np.ndarray) -> float:
        models = self.models
        real_idx = self.rng.choice(len(self.ds), size=fake_mm.shape[0], replace=False)
        real = score_poses(self.ds.pose3d[real_idx], self.topo, models.disc)
        fake = score_poses(fake_mm, self.topo, models.disc)
        loss = lsgan_discriminator_loss(real, fake, valid)
        models.opt_disc.zero_grad()
        loss.backward()
        models.opt_disc.step()
        return loss.item()

    def train_step(self, idx: np.ndarray) -> dict:
        models = self.models
        res = self.forward_batch(idx)
        if not np.isfinite(res.total.item()):
            raise NumericError("non-finite training loss")
        disc = 0.0
        if self.cfg.model.use_gan and self.cfg.losses.lambda_g > 0:
            for _ in range(self.cfg.optim.disc_steps):
                disc = self.discriminator_step(res.hyp_mm, res.valid)
        models.opt_det.zero_grad()
        res.total.backward()
        models.opt_det.step()
        return {"total": res.total.item(), "mask": res.mask, "gen": res.gen,
                "render": res.render, "disc": disc}

    def run_epoch(self, stage: int, epoch: int) -> dict:
        lr = learning_rate(self.cfg, stage, epoch)
        self.models.opt_det.lr = lr
        order = self.rng.permutation(len(self.ds))
        bs = self.cfg.optim.batch_size
        sums = dict.fromkeys(["total", "mask", "gen", "render", "disc"], 0.0)
        steps = 0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            out = self.train_step(idx)
            for key in sums:
                sums[key] += out[key]
            steps += 1
        row = {"stage": stage, "epoch": epoch, "lr": lr}
        row.update({k: v / steps for k, v in sums.items()})
        return row


def train(cfg: ExperimentConfig, train_set: Dataset, topo: SkeletonTopology | None = None,
          val_set: Dataset | None = None, out_dir=None, validate_every: int = 1,
          val_limit: int = 200, progress=None):
    """Run both stages. Returns the trained :class:`Models` and the per-epoch log rows.

    With ``out_dir`` set, writes ``train_log.csv`` and one checkpoint per stage.
    A non-finite loss stops training, keeps the last good checkpoint on disk
    and raises :class:`NumericError`.
    """
    from .checkpoint import save_checkpoint
    from .evaluate import evaluate_models

    topo = topo or SkeletonTopology.default()
    trainer = Trainer(cfg, train_set, topo, val_set)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    epoch_total = 0
    schedule = [(1, cfg.optim.epochs_stage1), (2, cfg.optim.epochs_stage2)]
    for stage, n_epochs in schedule:
        for epoch in range(n_epochs):
            try:
                row = trainer.run_epoch(stage, epoch)
            except NumericError:
                if out:
                    _write_log(out / "train_log.csv", rows)
                raise
            if val_set is not None and len(val_set) and (epoch + 1) % validate_every == 0:
                sub = Dataset(val_set.records[:val_limit], val_set.index)
                reports = evaluate_models(cfg, trainer.models, sub, topo, protocols=("conf", "best"))
                row["val_mpjpe_conf"] = reports["conf"].mpjpe
                row["val_mpjpe_best"] = reports["best"].mpjpe
            rows.append(row)
            epoch_total += 1
            if progress:
                progress(row)
            log.info("stage %d epoch %d: %s", stage, epoch, row)
        if out and n_epochs > 0:
            save_checkpoint(out / f"stage{stage}.ckpt", cfg, trainer.models, epoch_total, stage)
    if out:
        _write_log(out / "train_log.csv", rows)
    trainer.models.history = rows
    return trainer.models, rows


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                             for k, v in row.items() if k in LOG_FIELDS})
