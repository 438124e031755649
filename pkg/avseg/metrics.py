"""Region metrics on binary masks.

Counts are exact integers and every score is a single ratio of them.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import torch
from pydantic import BaseModel

from .errors import ConfigError, DataError, ShapeError


class SampleMetrics(BaseModel):
    id: str
    iou: float
    fscore: float


class MetricsReport(BaseModel):
    miou: float
    fscore: float
    beta_sq: float
    threshold: float
    n_pairs: int
    per_sample: list[SampleMetrics]


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f'prediction {pred.shape} and ground truth {gt.shape} differ')
    return pred, gt


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def miou(pairs: Sequence[tuple]) -> float:
    if not pairs:
        raise DataError('no evaluation pairs')
    return math.fsum(iou(pred, gt) for pred, gt in pairs) / len(pairs)


def confusion(pred, gt) -> tuple[int, int, int]:
    pred, gt = _pair(pred, gt)
    tp = int(np.logical_and(pred, gt).sum())
    return tp, int(pred.sum()) - tp, int(gt.sum()) - tp


def f_score(pred, gt, beta_sq: float = 0.3) -> float:
    if beta_sq <= 0:
        raise ConfigError(f'beta_sq must be > 0, got {beta_sq}')
    tp, fp, fn = confusion(pred, gt)
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def evaluate_pairs(pairs: Sequence[tuple[str, object, object]], beta_sq: float = 0.3,
                   threshold: float = 0.5, workers: int = 1) -> MetricsReport:
    """`pairs` holds (sample id, binary prediction, binary ground truth); shards keep input order."""
    if not pairs:
        raise DataError('no evaluation pairs')

    def score(item) -> SampleMetrics:
        sample_id, pred, gt = item
        return SampleMetrics(id=sample_id, iou=iou(pred, gt), fscore=f_score(pred, gt, beta_sq))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_sample = list(pool.map(score, pairs))
    return MetricsReport(
        miou=math.fsum(s.iou for s in per_sample) / len(per_sample),
        fscore=math.fsum(s.fscore for s in per_sample) / len(per_sample),
        beta_sq=beta_sq,
        threshold=threshold,
        n_pairs=len(per_sample),
        per_sample=per_sample,
    )
