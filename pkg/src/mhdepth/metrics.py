"""Pose error metrics and hypothesis selection protocols.

Poses are ``(J, 3)`` arrays in millimetres. Every metric root-centres both
poses first, so the scale-only and similarity alignments start from the
same frame as plain MPJPE.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize_scalar

PROTOCOLS = ("single", "conf", "best")
PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.linspace(5.0, 150.0, 30)


def _pair(pred, gt, root: int = 0):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint count mismatch: {pred.shape} vs {gt.shape}")
    return pred - pred[..., root:root + 1, :], gt - gt[..., root:root + 1, :]


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    pred, gt = _pair(pred, gt, root)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(joint_errors(pred, gt, root).mean())


def optimal_scale(pred, gt) -> tuple[float, bool]:
    """Least-squares scale of ``pred`` onto ``gt``; ``(1, True)`` if undefined."""
    denom = float(np.sum(pred * pred))
    if denom <= 0.0:
        return 1.0, True
    return float(np.sum(pred * gt)) / denom, False


def _scaled_error(s: float, pred, gt) -> float:
    return float(np.linalg.norm(s * pred - gt, axis=-1).mean())


def best_scale(pred, gt) -> float:
    """Scale minimising the mean joint distance (a convex 1-D problem).

    The least-squares scale seeds the search; the returned scale is never
    worse than it or than leaving the prediction unscaled.
    """
    s_ls, degenerate = optimal_scale(pred, gt)
    if degenerate:
        return 1.0
    candidates = [1.0, max(s_ls, 1e-12)]
    hi = 2.0 * max(candidates) + 1.0
    res = minimize_scalar(_scaled_error, bounds=(0.0, hi), args=(pred, gt), method="bounded",
                          options={"xatol": 1e-10})
    if res.x > 0:
        candidates.append(float(res.x))
    return min(candidates, key=lambda s: _scaled_error(s, pred, gt))


def n_mpjpe(pred, gt, root: int = 0) -> float:
    pred, gt = _pair(pred, gt, root)
    return _scaled_error(best_scale(pred, gt), pred, gt)


def procrustes_align(pred, gt) -> tuple[np.ndarray, bool]:
    """Similarity-align ``pred`` to ``gt`` (rotation, uniform scale, translation).

    Returns the aligned prediction and a flag set when ``pred`` collapses to a
    single point, in which case it is mapped onto the centroid of ``gt``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    var_p = float(np.sum(p0 * p0))
    if var_p <= 1e-300:
        return np.broadcast_to(mu_g, gt.shape).copy(), True
    u, sig, vt = np.linalg.svd(p0.T @ g0)
    d = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        d[-1] = -1.0
    rot = (u * d) @ vt
    scale = float(np.sum(sig * d)) / var_p
    return scale * p0 @ rot + mu_g, False


def p_mpjpe(pred, gt, root: int = 0) -> float:
    """Mean joint distance after similarity alignment.

    Candidates are the Procrustes solution and the scale-only alignment used
    by :func:`n_mpjpe` (itself a similarity transform); the smaller error wins.
    """
    pred, gt = _pair(pred, gt, root)
    aligned, _ = procrustes_align(pred, gt)
    procrustes_err = float(np.linalg.norm(aligned - gt, axis=-1).mean())
    return min(procrustes_err, _scaled_error(best_scale(pred, gt), pred, gt))


def pck(pred, gt, threshold: float = PCK_THRESHOLD_MM, root: int = 0) -> float:
    return float(np.mean(joint_errors(pred, gt, root) < threshold))


def auc(pred, gt, root: int = 0) -> float:
    err = joint_errors(pred, gt, root)
    return float(np.mean([np.mean(err < t) for t in AUC_THRESHOLDS_MM]))


def select_hypothesis(hypos, gt=None, protocol: str = "conf", root: int = 0) -> np.ndarray:
    """Pick one pose from a :class:`~mhdepth.decoder.HypothesisSet`.

    Only the first ``max(valid_count)`` pose hypotheses take part; ``conf``
    maximises mean per-joint confidence and ``best`` minimises MPJPE to ``gt``.
    """
    n = max(1, int(np.max(hypos.valid_count)))
    poses = np.asarray(hypos.poses)[:n]
    if protocol == "single" or n == 1:
        if protocol == "best" and gt is None:
            raise ValueError("best protocol needs the ground-truth pose")
        return poses[0]
    if protocol == "conf":
        return poses[int(np.argmax(np.asarray(hypos.confidences)[:n].mean(axis=1)))]
    if protocol == "best":
        if gt is None:
            raise ValueError("best protocol needs the ground-truth pose")
        return poses[int(np.argmin([mpjpe(p, gt, root) for p in poses]))]
    raise ValueError(f"unknown protocol {protocol!r}")


@dataclass
class MetricsReport:
    protocol: str
    mpjpe: float
    n_mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    count: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def csv_header() -> list[str]:
        return ["protocol", "mpjpe", "n_mpjpe", "p_mpjpe", "pck", "auc", "count"]

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.csv_header()]


def aggregate(preds, gts, protocol: str, root: int = 0) -> MetricsReport:
    preds = list(preds)
    gts = list(gts)
    if not preds:
        raise ValueError("no samples to evaluate")
    rows = np.array([
        (mpjpe(p, g, root), n_mpjpe(p, g, root), p_mpjpe(p, g, root), pck(p, g, root=root),
         auc(p, g, root))
        for p, g in zip(preds, gts)
    ])
    m = rows.mean(axis=0)
    return MetricsReport(protocol=protocol, mpjpe=float(m[0]), n_mpjpe=float(m[1]),
                         p_mpjpe=float(m[2]), pck=float(m[3]), auc=float(m[4]), count=len(preds))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricsReport.csv_header())
    for r in reports:
        writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r.csv_row()])
    return buf.getvalue()
