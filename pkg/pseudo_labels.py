# pseudo_labels.py
"""Teacher pseudo-labels with weak-label filtering and soft confidence weights"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import PseudoLabelConfig
from core_model import BoundingBox, Detection, FrameAnnotation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabel:
    box: BoundingBox
    confidence: float
    weight: float = 1.0
    cell_index: int = -1


def _rank(label: PseudoLabel):
    return (-label.confidence, label.cell_index)


@dataclass(frozen=True)
class PseudoLabelSet:
    """Pseudo-labels of every frame of one sub-clip"""
    frames: Tuple[Tuple[PseudoLabel, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, 'frames', tuple(tuple(f) for f in self.frames))

    @classmethod
    def empty(cls, n_frames: int) -> 'PseudoLabelSet':
        return cls(tuple(() for _ in range(n_frames)))

    @property
    def n_labels(self) -> int:
        return sum(len(f) for f in self.frames)

    def counts(self) -> List[int]:
        return [len(f) for f in self.frames]

    def to_annotations(self) -> List[FrameAnnotation]:
        return [FrameAnnotation(t, tuple(label.box for label in labels)) for t, labels in enumerate(self.frames)]


@dataclass
class PseudoLabelStats:
    """Running counters over one epoch"""
    videos: int = 0
    unlabeled_videos: int = 0
    kept: int = 0
    removed_negative: int = 0
    rescued: int = 0
    cache_hits: int = 0

    def merge(self, other: 'PseudoLabelStats'):
        self.videos += other.videos
        self.unlabeled_videos += other.unlabeled_videos
        self.kept += other.kept
        self.removed_negative += other.removed_negative
        self.rescued += other.rescued
        self.cache_hits += other.cache_hits


def from_detections(dets_per_frame: Sequence[Sequence[Detection]], threshold: float) -> PseudoLabelSet:
    """Keep detections with confidence strictly above threshold, highest confidence first"""
    frames = []
    for dets in dets_per_frame:
        labels = [PseudoLabel(d.box, d.confidence, 1.0, d.cell_index) for d in dets if d.confidence > threshold]
        frames.append(tuple(sorted(labels, key=_rank)))
    return PseudoLabelSet(tuple(frames))


def generate(teacher_params, subclip: Sequence[np.ndarray], config: PseudoLabelConfig, detector,
             nms_iou: Optional[float] = None) -> PseudoLabelSet:
    """Teacher forward + decode + NMS per frame.

    With weak filtering on, candidates down to beta_l are retained so the
    positive-video fallback can pick from them.
    """
    threshold = config.candidate_threshold
    dets = detector.detect_batch(teacher_params, subclip, conf_threshold=threshold, nms_iou=nms_iou)
    return from_detections(dets, threshold)


def apply_threshold(labels: PseudoLabelSet, beta: float) -> PseudoLabelSet:
    return PseudoLabelSet(tuple(
        tuple(label for label in frame if label.confidence > beta) for frame in labels.frames
    ))


def weak_filter(labels: PseudoLabelSet, video_label: int, config: PseudoLabelConfig,
                stats: Optional[PseudoLabelStats] = None) -> PseudoLabelSet:
    """Negative videos lose every label; positive frames fall back to their best candidate above beta_l"""
    if video_label == 0:
        if stats is not None:
            stats.removed_negative += labels.n_labels
        return PseudoLabelSet.empty(len(labels.frames))

    frames = []
    for frame in labels.frames:
        confident = tuple(label for label in frame if label.confidence > config.beta)
        if confident:
            frames.append(confident)
            continue
        candidates = [label for label in frame if label.confidence > config.beta_l]
        if candidates:
            frames.append((min(candidates, key=_rank),))
            if stats is not None:
                stats.rescued += 1
        else:
            frames.append(())
    return PseudoLabelSet(tuple(frames))


def apply_soft_weights(labels: PseudoLabelSet) -> PseudoLabelSet:
    return PseudoLabelSet(tuple(
        tuple(replace(label, weight=label.confidence ** 2) for label in frame) for frame in labels.frames
    ))


def build_pseudo_labels(teacher_params, subclip: Sequence[np.ndarray], video_label: Optional[int],
                        config: PseudoLabelConfig, detector, nms_iou: Optional[float] = None,
                        stats: Optional[PseudoLabelStats] = None) -> PseudoLabelSet:
    """generate -> weak_filter (labelled videos) or plain beta threshold -> soft weights"""
    labels = generate(teacher_params, subclip, config, detector, nms_iou)
    if stats is not None:
        stats.videos += 1
        if video_label is None:
            stats.unlabeled_videos += 1

    if config.use_weak_filtering and video_label is not None:
        labels = weak_filter(labels, video_label, config, stats)
    elif config.use_weak_filtering:
        labels = apply_threshold(labels, config.beta)

    if config.use_soft_weights:
        labels = apply_soft_weights(labels)
    if stats is not None:
        stats.kept += labels.n_labels
    return labels


def dump_jsonl(path: Union[str, Path], records: Iterable[Tuple[str, PseudoLabelSet]], epoch: int):
    """Append one line per (video, frame) for offline inspection"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a') as f:
        for video_id, labels in records:
            for t, frame in enumerate(labels.frames):
                f.write(json.dumps({
                    'epoch': epoch,
                    'video_id': video_id,
                    'frame': t,
                    'labels': [{'box': l.box.to_list(), 'confidence': l.confidence, 'weight': l.weight}
                               for l in frame],
                }) + '\n')
