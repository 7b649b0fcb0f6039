# evaluator.py
"""IoU matching, average precision and model-level mAP"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core_model import BoundingBox, Detection, InvalidInputError, VideoRecord
from detector import GridDetector, ParameterVector, iou

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchResult:
    """Confidence and TP/FP flag per detection of one frame, plus its ground-truth count"""
    confidences: Tuple[float, ...]
    true_positive: Tuple[bool, ...]
    n_ground_truth: int

    @property
    def n_true_positive(self) -> int:
        return sum(self.true_positive)


@dataclass(frozen=True)
class EvaluationResult:
    mean_ap: float
    recall: np.ndarray
    precision: np.ndarray
    n_ground_truth: int
    n_detections: int
    n_frames: int


def match(dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_thr: float) -> MatchResult:
    """Greedy one-to-one matching in descending confidence against still unmatched ground truths"""
    ordered = sorted(dets, key=lambda d: (-d.confidence, d.cell_index))
    matched = [False] * len(gts)
    flags = []
    for det in ordered:
        best_iou, best_k = -1.0, -1
        for k, gt in enumerate(gts):
            if matched[k]:
                continue
            overlap = iou(det.box, gt)
            if overlap > best_iou:
                best_iou, best_k = overlap, k
        if best_k >= 0 and best_iou >= iou_thr:
            matched[best_k] = True
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(tuple(d.confidence for d in ordered), tuple(flags), len(gts))


def precision_recall_curve(results: Sequence[MatchResult]) -> Tuple[np.ndarray, np.ndarray, int]:
    """Pooled recall and precision at every confidence cutoff"""
    n_gt = sum(r.n_ground_truth for r in results)
    if n_gt == 0:
        raise InvalidInputError("average precision is undefined without ground truths")
    conf = np.array([c for r in results for c in r.confidences], dtype=np.float64)
    flags = np.array([f for r in results for f in r.true_positive], dtype=bool)
    order = np.argsort(-conf, kind='mergesort')
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / float(n_gt)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision, n_gt


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP with the precision envelope"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))

    # precision envelope
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = np.maximum(mpre[i - 1], mpre[i])

    # points where recall changes
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(results: Sequence[MatchResult]) -> float:
    recall, precision, _ = precision_recall_curve(results)
    return voc_ap(recall, precision)


def evaluate_detections(dets_per_frame: Sequence[Sequence[Detection]],
                        gts_per_frame: Sequence[Sequence[BoundingBox]],
                        iou_thr: float = 0.5) -> EvaluationResult:
    if len(dets_per_frame) != len(gts_per_frame):
        raise InvalidInputError(f"{len(dets_per_frame)} detection frames for {len(gts_per_frame)} ground-truth frames")
    results = [match(d, g, iou_thr) for d, g in zip(dets_per_frame, gts_per_frame)]
    recall, precision, n_gt = precision_recall_curve(results)
    return EvaluationResult(
        mean_ap=voc_ap(recall, precision),
        recall=recall,
        precision=precision,
        n_ground_truth=n_gt,
        n_detections=int(recall.size),
        n_frames=len(results),
    )


def evaluate_detailed(detector: GridDetector, params: ParameterVector, dataset: Sequence[VideoRecord],
                      conf_floor: float = 0.001, nms_thr: float = 0.45, iou_thr: float = 0.5) -> EvaluationResult:
    """Run the detector on every annotated frame and pool the matches (single class, so mAP = AP)"""
    dets_per_frame: List[List[Detection]] = []
    gts_per_frame: List[Tuple[BoundingBox, ...]] = []
    for video in dataset:
        if video.annotations is None:
            raise InvalidInputError(f"{video.video_id} has no frame annotations to evaluate against")
        dets_per_frame.extend(detector.detect_batch(params, video.frames, conf_floor, nms_thr))
        gts_per_frame.extend(video.annotation_for(t).boxes for t in range(video.n_frames))
    return evaluate_detections(dets_per_frame, gts_per_frame, iou_thr)


def evaluate_model(detector: GridDetector, params: ParameterVector, dataset: Sequence[VideoRecord],
                   conf_floor: float = 0.001, nms_thr: float = 0.45, iou_thr: float = 0.5) -> float:
    return evaluate_detailed(detector, params, dataset, conf_floor, nms_thr, iou_thr).mean_ap


def write_eval_report(result: EvaluationResult, output_dir: Union[str, Path], extra: Optional[Dict] = None):
    """eval.json (mAP, counts, PR points) and pr_curve.csv"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    report = {
        'mAP': result.mean_ap,
        'n_ground_truth': result.n_ground_truth,
        'n_detections': result.n_detections,
        'n_frames': result.n_frames,
        'pr_points': [[float(r), float(p)] for r, p in zip(result.recall, result.precision)],
    }
    report.update(extra or {})
    with open(output_dir / 'eval.json', 'w') as f:
        json.dump(report, f, indent=2)
    pd.DataFrame({'recall': result.recall, 'precision': result.precision}).to_csv(
        output_dir / 'pr_curve.csv', index=False)
    logger.info(f"Evaluation report written to {output_dir} (mAP={result.mean_ap:.4f})")
