# losses.py
"""Detection, semi-supervised and video-level weak losses"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import LossWeights
from core_model import BoundingBox, Detection, FrameAnnotation, InvalidInputError
from detector import GridDetector, ParameterVector, RawPrediction
from pseudo_labels import PseudoLabelSet

logger = logging.getLogger(__name__)

EPS = 1e-7

Scalar = Union[float, torch.Tensor]
Params = Union[ParameterVector, torch.Tensor]


@dataclass(frozen=True)
class VideoConfidence:
    """Per-frame maximum confidence and their mean over the sub-clip"""
    per_frame_max: Tuple[float, ...]
    video_score: float


def assign_targets(boxes: Sequence[BoundingBox], grid_size: int) -> List[Tuple[int, int]]:
    """(cell_index, box_index) pairs; a box supervises the cell holding its center"""
    taken = {}
    for k, box in enumerate(boxes):
        gx = min(int(box.cx * grid_size), grid_size - 1)
        gy = min(int(box.cy * grid_size), grid_size - 1)
        cell = gy * grid_size + gx
        if cell in taken:
            logger.debug(f"Box {k} shares cell {cell} with box {taken[cell]}, dropped")
            continue
        taken[cell] = k
    return sorted(taken.items(), key=lambda item: item[1])


def ciou(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Complete-IoU overlap of (..., 4) center-size boxes.

    ciou = IoU - rho^2 / c^2 - a * v
      rho^2 = squared distance between centers
      c^2   = squared diagonal of the smallest enclosing box
      v     = 4 / pi^2 * (atan(w_t / h_t) - atan(w_p / h_p))^2
      a     = v / (1 - IoU + v + eps)
    """
    px1, px2 = pred[..., 0] - pred[..., 2] / 2, pred[..., 0] + pred[..., 2] / 2
    py1, py2 = pred[..., 1] - pred[..., 3] / 2, pred[..., 1] + pred[..., 3] / 2
    tx1, tx2 = target[..., 0] - target[..., 2] / 2, target[..., 0] + target[..., 2] / 2
    ty1, ty2 = target[..., 1] - target[..., 3] / 2, target[..., 1] + target[..., 3] / 2

    inter_w = torch.clamp(torch.minimum(px2, tx2) - torch.maximum(px1, tx1), min=0.0)
    inter_h = torch.clamp(torch.minimum(py2, ty2) - torch.maximum(py1, ty1), min=0.0)
    inter = inter_w * inter_h
    union = pred[..., 2] * pred[..., 3] + target[..., 2] * target[..., 3] - inter
    overlap = inter / union

    rho2 = (pred[..., 0] - target[..., 0]) ** 2 + (pred[..., 1] - target[..., 1]) ** 2
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    c2 = cw ** 2 + ch ** 2

    v = (4.0 / math.pi ** 2) * (torch.atan(target[..., 2] / target[..., 3])
                                 - torch.atan(pred[..., 2] / pred[..., 3])) ** 2
    alpha = v / (1.0 - overlap + v + eps)
    return overlap - rho2 / c2 - alpha * v


def _box_weights(n: int, box_weights: Optional[Sequence[float]]) -> Sequence[float]:
    if box_weights is None:
        return [1.0] * n
    if len(box_weights) != n:
        raise InvalidInputError(f"{len(box_weights)} weights for {n} boxes")
    return box_weights


def loss_coord(pred: RawPrediction, targets: FrameAnnotation,
               box_weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Mean (1 - CIoU) over assigned cells, each term scaled by its box weight"""
    g = pred.grid_size
    assigned = assign_targets(targets.boxes, g)
    if not assigned:
        return pred.raw.sum() * 0.0
    weights = _box_weights(len(targets.boxes), box_weights)
    decoded = pred.boxes.reshape(-1, 4)
    cells = torch.tensor([cell for cell, _ in assigned])
    target = torch.tensor([targets.boxes[k].to_list() for _, k in assigned], dtype=decoded.dtype)
    w = torch.tensor([weights[k] for _, k in assigned], dtype=decoded.dtype)
    terms = 1.0 - ciou(decoded[cells], target)
    return (w * terms).sum() / len(assigned)


def loss_conf(pred: RawPrediction, targets: FrameAnnotation,
              box_weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Mean BCE over all G*G cells; assigned cells are positives scaled by their box weight"""
    g = pred.grid_size
    conf = torch.clamp(pred.confidence.reshape(-1), EPS, 1.0 - EPS)
    labels = torch.zeros(g * g, dtype=conf.dtype)
    cell_weights = torch.ones(g * g, dtype=conf.dtype)
    weights = _box_weights(len(targets.boxes), box_weights)
    for cell, k in assign_targets(targets.boxes, g):
        labels[cell] = 1.0
        cell_weights[cell] = weights[k]
    bce = -(labels * torch.log(conf) + (1.0 - labels) * torch.log(1.0 - conf))
    return (cell_weights * bce).sum() / (g * g)


def frame_detection_loss(pred: RawPrediction, targets: FrameAnnotation, weights: LossWeights,
                         box_weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    return (weights.lambda_coord * loss_coord(pred, targets, box_weights)
            + weights.lambda_conf * loss_conf(pred, targets, box_weights))


def loss_f_sup(params: Params, frames: Sequence[np.ndarray], annotations: Sequence[FrameAnnotation],
               weights: LossWeights, detector: GridDetector) -> torch.Tensor:
    """Frame-level supervised loss summed over the batch"""
    if len(frames) != len(annotations):
        raise InvalidInputError(f"{len(frames)} frames but {len(annotations)} annotations")
    total = torch.zeros((), dtype=torch.float64)
    for pred, ann in zip(detector.forward_batch(params, frames), annotations):
        total = total + frame_detection_loss(pred, ann, weights)
    return total


def semi_loss_from_predictions(preds: Sequence[RawPrediction], pseudo_labels: Sequence[PseudoLabelSet],
                               weights: LossWeights, soft: bool) -> torch.Tensor:
    """Pseudo-label detection loss over already computed student predictions (video-major order)"""
    total = torch.zeros((), dtype=torch.float64)
    i = 0
    for labels in pseudo_labels:
        for t, frame_labels in enumerate(labels.frames):
            targets = FrameAnnotation(t, tuple(label.box for label in frame_labels))
            box_weights = [label.confidence ** 2 for label in frame_labels] if soft else None
            total = total + frame_detection_loss(preds[i], targets, weights, box_weights)
            i += 1
    if i != len(preds):
        raise InvalidInputError(f"{len(preds)} predictions for {i} pseudo-labelled frames")
    return total


def loss_f_semi(params: Params, subclips: Sequence[Sequence[np.ndarray]],
                pseudo_labels: Sequence[PseudoLabelSet], weights: LossWeights,
                detector: GridDetector, soft: bool = False) -> torch.Tensor:
    """Student detection loss against teacher pseudo-labels; soft scales each label by confidence^2"""
    if len(subclips) != len(pseudo_labels):
        raise InvalidInputError(f"{len(subclips)} sub-clips but {len(pseudo_labels)} pseudo-label sets")
    for clip, labels in zip(subclips, pseudo_labels):
        if len(clip) != len(labels.frames):
            raise InvalidInputError("sub-clip and pseudo-label frame counts differ")
    frames = [frame for clip in subclips for frame in clip]
    preds = detector.forward_batch(params, frames)
    return semi_loss_from_predictions(preds, pseudo_labels, weights, soft)


def aggregate_video_confidence(dets_per_frame: Sequence[Sequence[Detection]]) -> VideoConfidence:
    """Max confidence per frame (0 for empty frames), averaged over frames"""
    if len(dets_per_frame) == 0:
        raise InvalidInputError("cannot aggregate an empty frame list")
    per_frame = tuple(max((d.confidence for d in dets), default=0.0) for dets in dets_per_frame)
    return VideoConfidence(per_frame, sum(per_frame) / len(per_frame))


def select_frame_maxima(dets_per_frame: Sequence[Sequence[Detection]]) -> List[Optional[int]]:
    """Cell index of each frame's top detection, None for empty frames"""
    selections = []
    for dets in dets_per_frame:
        if not dets:
            selections.append(None)
            continue
        best = min(dets, key=lambda d: (-d.confidence, d.cell_index))
        selections.append(best.cell_index)
    return selections


def video_score_tensor(preds: Sequence[RawPrediction], selections: Sequence[Optional[int]]) -> torch.Tensor:
    """Differentiable video score; selections are held fixed, so gradient reaches only selected logits"""
    if len(preds) == 0 or len(preds) != len(selections):
        raise InvalidInputError(f"{len(preds)} predictions for {len(selections)} selections")
    total = torch.zeros((), dtype=torch.float64)
    for pred, cell in zip(preds, selections):
        if cell is not None:
            total = total + pred.confidence.reshape(-1)[cell]
    return total / len(preds)


def loss_v_weak(video_scores: Sequence[Scalar], labels: Sequence[int]) -> torch.Tensor:
    """Video-level BCE summed over videos"""
    if len(video_scores) != len(labels):
        raise InvalidInputError(f"{len(video_scores)} scores but {len(labels)} labels")
    if len(video_scores) == 0:
        return torch.zeros((), dtype=torch.float64)
    scores = torch.stack([torch.as_tensor(s, dtype=torch.float64) for s in video_scores])
    scores = torch.clamp(scores, EPS, 1.0 - EPS)
    z = torch.tensor([float(label) for label in labels], dtype=torch.float64)
    return -(z * torch.log(scores) + (1.0 - z) * torch.log(1.0 - scores)).sum()


def loss_combined(l_sup: Scalar, l_semi: Scalar, l_weak: Scalar, weights: LossWeights) -> Scalar:
    return (weights.lambda_f_sup * l_sup
            + weights.lambda_f_semi * l_semi
            + weights.lambda_v_weak * l_weak)
