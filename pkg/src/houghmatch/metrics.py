"""Correspondence metrics: PCK, PCR, mIoU@k and area under the PCR curve.

PCK counts keypoints whose warped position lies within ``tau`` (inclusive)
of the ground truth, distances divided by the target-image diagonal.  PCR
counts regions whose ``1 - IoU`` with the true correspondent is strictly
below ``tau``.  Dataset-level values are unweighted means over pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowField, warp_points
from .geometry import ImageSize

__all__ = [
    "default_taus",
    "rowwise_iou",
    "pck",
    "pck_curve",
    "pcr",
    "pcr_curve",
    "miou_at_k",
    "miou_curve",
    "auc",
    "EvalReport",
    "PairResult",
    "aggregate",
]

PCK_THRESHOLDS = (0.05, 0.1, 0.15)


def default_taus(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def rowwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between ``a[k]`` and ``b[k]`` for every row ``k``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return inter / union


def _keypoint_errors(flow: FlowField, keypoints: np.ndarray, size_b: ImageSize) -> np.ndarray:
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 4)
    warped = warp_points(flow, kp[:, :2])
    d = warped - kp[:, 2:]
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) / size_b.diagonal


def pck(flow: FlowField, keypoints: np.ndarray, size_b: ImageSize, tau: float) -> float:
    return float(pck_curve(flow, keypoints, size_b, np.array([tau]))[0])


def pck_curve(flow: FlowField, keypoints: np.ndarray, size_b: ImageSize, taus: np.ndarray) -> np.ndarray:
    err = _keypoint_errors(flow, keypoints, size_b)
    if len(err) == 0:
        raise ValueError("PCK needs at least one keypoint pair")
    return (err[None, :] <= np.asarray(taus)[:, None]).mean(axis=1)


def pcr(pred_boxes: np.ndarray, true_boxes: np.ndarray, tau: float) -> float:
    return float(pcr_curve(pred_boxes, true_boxes, np.array([tau]))[0])


def pcr_curve(pred_boxes: np.ndarray, true_boxes: np.ndarray, taus: np.ndarray) -> np.ndarray:
    err = 1.0 - rowwise_iou(pred_boxes, true_boxes)
    if len(err) == 0:
        return np.zeros(len(np.asarray(taus)))
    return (err[None, :] < np.asarray(taus)[:, None]).mean(axis=1)


def miou_at_k(ious_by_score: np.ndarray, k: int) -> float:
    """Mean IoU of the ``k`` best-scored matches (all of them if fewer)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ious = np.asarray(ious_by_score, dtype=np.float64)
    if len(ious) == 0:
        return 0.0
    return float(np.mean(ious[:k]))


def miou_curve(ious_by_score: np.ndarray, K: int) -> np.ndarray:
    ious = np.asarray(ious_by_score, dtype=np.float64)
    if len(ious) == 0:
        return np.zeros(K)
    csum = np.cumsum(ious)
    n = np.minimum(np.arange(1, K + 1), len(ious))
    return csum[n - 1] / n


def auc(curve: np.ndarray, taus: np.ndarray | None = None) -> float:
    """Trapezoidal area under a curve sampled on ``taus`` (uniform on [0, 1] by default).

    Interval areas are summed left to right, so the result does not depend
    on numpy's pairwise-summation blocking.
    """
    curve = np.asarray(curve, dtype=np.float64)
    taus = default_taus(len(curve)) if taus is None else np.asarray(taus, dtype=np.float64)
    if len(curve) != len(taus):
        raise ValueError("curve and taus differ in length")
    if len(curve) < 2:
        return 0.0
    pieces = (taus[1:] - taus[:-1]) * (curve[1:] + curve[:-1]) / 2.0
    return float(np.cumsum(pieces)[-1])


@dataclass
class PairResult:
    name: str
    pck: np.ndarray
    pcr: np.ndarray
    miou: np.ndarray


@dataclass
class EvalReport:
    taus: np.ndarray
    pck: np.ndarray
    pcr: np.ndarray
    miou: np.ndarray
    auc: float
    per_pair: list[PairResult] = field(default_factory=list)

    def pck_at(self, tau: float) -> float:
        """Dataset PCK at an arbitrary threshold (mean of per-pair values)."""
        i = np.flatnonzero(np.isclose(self.taus, tau))
        if len(i):
            return float(self.pck[i[0]])
        raise KeyError(f"tau={tau} not on the evaluation grid")

    def summary(self) -> dict[str, float]:
        out = {f"pck@{t:g}": self.pck_at(t) for t in PCK_THRESHOLDS if np.isclose(self.taus, t).any()}
        out["pcr_auc"] = self.auc
        for k in (1, 10, 100):
            if k <= len(self.miou):
                out[f"miou@{k}"] = float(self.miou[k - 1])
        out["pairs"] = float(len(self.per_pair))
        return out

    def write(self, out_dir: str | Path, prefix: str = "") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / f"{prefix}curve.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", "pcr", "pck"])
            for t, r, k in zip(self.taus, self.pcr, self.pck):
                w.writerow([repr(float(t)), repr(float(r)), repr(float(k))])
        with (out_dir / f"{prefix}summary.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for key, val in self.summary().items():
                w.writerow([key, repr(float(val))])
        with (out_dir / f"{prefix}miou.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "miou"])
            for k, v in enumerate(self.miou, start=1):
                w.writerow([k, repr(float(v))])


def aggregate(results: list[PairResult], taus: np.ndarray) -> EvalReport:
    if not results:
        raise ValueError("no pairs to aggregate")
    pck_mean = np.mean([r.pck for r in results], axis=0)
    pcr_mean = np.mean([r.pcr for r in results], axis=0)
    miou_mean = np.mean([r.miou for r in results], axis=0)
    return EvalReport(taus, pck_mean, pcr_mean, miou_mean, auc(pcr_mean, taus), results)
