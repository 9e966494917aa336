"""Normalized mean error metrics and the yaw-bucketed evaluation report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cascade import CascadeModel, run_cascade_batch
from .synthdata import LandmarkDataset

BUCKET_EDGES_DEG = (0.0, 30.0, 60.0, 90.0)
BUCKET_LABELS = ("[0,30)", "[30,60)", "[60,90]")


def _per_landmark_mean_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def nme_interpupil(pred, gt, pupil_left: int, pupil_right: int) -> float:
    """Mean per-landmark distance over the ground-truth inter-pupil distance."""
    gt_pts = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pupil_left == pupil_right:
        raise ValueError("pupil indices must name two distinct landmarks")
    denom = float(np.linalg.norm(gt_pts[pupil_left] - gt_pts[pupil_right]))
    if denom == 0.0:
        raise ValueError("coincident pupils: inter-pupil distance is zero")
    return _per_landmark_mean_distance(pred, gt) / denom


def nme_bbox(pred, gt, box_h: float, box_w: float) -> float:
    """Mean per-landmark distance over sqrt(box height * box width)."""
    if box_h <= 0.0 or box_w <= 0.0:
        raise ValueError(f"face box must have positive extents, got h={box_h}, w={box_w}")
    return _per_landmark_mean_distance(pred, gt) / math.sqrt(box_h * box_w)


def yaw_bucket(yaw_rad: float) -> int:
    """Bucket index for |yaw|: [0,30) -> 0, [30,60) -> 1, [60,90] -> 2."""
    a = abs(math.degrees(yaw_rad))
    if a < 30.0:
        return 0
    if a < 60.0:
        return 1
    return 2


@dataclass
class SampleResult:
    sample_id: str
    yaw_deg: float
    nme_bbox_pct: float
    nme_interpupil_pct: float


@dataclass
class EvalReport:
    """Bucketed NME summary; all NME figures are percentages (bbox-normalized)."""

    overall_nme: float
    bucket_nme: list[float | None]
    bucket_counts: list[int]
    bucket_mean: float
    num_samples: int
    per_sample: list[SampleResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def evaluate(model: CascadeModel, dataset: LandmarkDataset, *,
             batch_size: int = 128) -> EvalReport:
    """Run the cascade over a dataset and report yaw-bucketed bbox NME."""
    samples = dataset.samples
    if len(samples) == 0:
        raise ValueError("evaluation set is empty")
    tpl = dataset.template
    preds, _ = run_cascade_batch(model, samples, batch_size=batch_size)
    rows: list[SampleResult] = []
    per_bucket: list[list[float]] = [[], [], []]
    for s, pred in zip(samples, preds):
        bb = nme_bbox(pred, s.landmarks, s.bbox.h, s.bbox.w) * 100.0
        ip = nme_interpupil(pred, s.landmarks, tpl.pupil_left, tpl.pupil_right) * 100.0
        rows.append(SampleResult(sample_id=s.sample_id,
                                 yaw_deg=math.degrees(s.pose.yaw),
                                 nme_bbox_pct=bb, nme_interpupil_pct=ip))
        per_bucket[yaw_bucket(s.pose.yaw)].append(bb)
    bucket_nme: list[float | None] = []
    warnings: list[str] = []
    for label, vals in zip(BUCKET_LABELS, per_bucket):
        if vals:
            bucket_nme.append(float(np.mean(vals)))
        else:
            bucket_nme.append(None)
            warnings.append(f"yaw bucket {label} is empty")
    non_empty = [v for v in bucket_nme if v is not None]
    return EvalReport(
        overall_nme=float(np.mean([r.nme_bbox_pct for r in rows])),
        bucket_nme=bucket_nme,
        bucket_counts=[len(v) for v in per_bucket],
        bucket_mean=float(np.mean(non_empty)),
        num_samples=len(rows),
        per_sample=rows,
        warnings=warnings,
    )
