"""Decode a dataset with a trained detector and score it."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from ..decoder import HypothesisSet, decode_marginals
from ..metrics import MetricsReport, aggregate, reports_to_csv, select_hypothesis
from ..sampler import heatmap_to_pose
from ..skeleton import SkeletonTopology
from .dataset import Dataset


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_dataset(cfg: ExperimentConfig, detector, ds: Dataset, batch: int = 256) -> list[HypothesisSet]:
    """Hypotheses in heatmap units for every sample.

    Uses the factorised logits directly: the depth marginal of the summed
    heatmap is ``softmax(depth logits)`` and the soft-argmax x, y are the
    expectations of the width/height softmaxes.
    """
    out = []
    feats = detector.features(ds.masks)
    for start in range(0, len(ds), batch):
        logits = detector.forward(feats[start:start + batch])
        m = _softmax(logits.depth.data)
        px, py = _softmax(logits.x.data), _softmax(logits.y.data)
        xs = px @ np.arange(px.shape[-1], dtype=np.float64)
        ys = py @ np.arange(py.shape[-1], dtype=np.float64)
        for i in range(m.shape[0]):
            xy = np.stack([xs[i], ys[i]], axis=1)
            out.append(decode_marginals(xy, m[i], cfg.decoder))
    return out


def hypotheses_to_mm(cfg: ExperimentConfig, ds: Dataset, i: int, hyp: HypothesisSet) -> HypothesisSet:
    cam = ds.camera(i)
    root_depth = float(ds.pose3d[i, ds.root, 2])
    poses = heatmap_to_pose(hyp.poses, cam, root_depth, ds.index["image_size"], cfg.grid)
    return HypothesisSet(poses=poses, confidences=hyp.confidences,
                         valid_count=hyp.valid_count, fallback=hyp.fallback)


def evaluate_hypotheses(cfg: ExperimentConfig, ds: Dataset, hyps: list[HypothesisSet],
                        protocols=("single", "conf", "best")) -> dict[str, MetricsReport]:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    root = ds.root
    mm = [hypotheses_to_mm(cfg, ds, i, h) for i, h in enumerate(hyps)]
    reports = {}
    for protocol in protocols:
        preds = [select_hypothesis(h, ds.pose3d[i], protocol, root) for i, h in enumerate(mm)]
        reports[protocol] = aggregate(preds, ds.pose3d, protocol, root)
    return reports


def evaluate_models(cfg: ExperimentConfig, models, ds: Dataset, topo: SkeletonTopology | None = None,
                    protocols=("single", "conf", "best")) -> dict[str, MetricsReport]:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    g = ds.index["grid"]
    if (g["depth"], g["height"], g["width"]) != models.detector.shape[1:]:
        raise ValueError("dataset heatmap grid does not match the detector")
    if ds.index["n_joints"] != models.detector.shape[0]:
        raise ValueError("dataset joint count does not match the detector")
    hyps = decode_dataset(cfg, models.detector, ds)
    return evaluate_hypotheses(cfg, ds, hyps, protocols)


def write_reports(reports: dict[str, MetricsReport], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = [reports[k] for k in reports]
    (out / "metrics.csv").write_text(reports_to_csv(ordered))
    payload = [json.loads(r.to_json()) for r in ordered]
    (out / "metrics.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
