# core_model.py
"""Domain types shared by every stage: boxes, detections, annotations, videos and splits"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class InvalidInputError(ValueError):
    """A precondition of an operation was violated"""


class DataError(RuntimeError):
    """Dataset, checkpoint or report files are missing or inconsistent"""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite"""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class UsageError(ValueError):
    """Bad command-line usage"""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized center-size form"""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidInputError(f"box center outside [0,1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise InvalidInputError(f"box size outside (0,1]: ({self.w}, {self.h})")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> 'BoundingBox':
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    def to_corners(self, clip: bool = True) -> Tuple[float, float, float, float]:
        x1, y1 = self.cx - self.w / 2.0, self.cy - self.h / 2.0
        x2, y2 = self.cx + self.w / 2.0, self.cy + self.h / 2.0
        if clip:
            x1, y1 = max(0.0, x1), max(0.0, y1)
            x2, y2 = min(1.0, x2), min(1.0, y2)
        return x1, y1, x2, y2

    def to_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]

    def flipped_horizontal(self) -> 'BoundingBox':
        return replace(self, cx=1.0 - self.cx)


@dataclass(frozen=True)
class Detection:
    """A scored box; cell_index is the grid cell it was decoded from (-1 if none)"""
    box: BoundingBox
    confidence: float
    cell_index: int = -1

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence outside [0,1]: {self.confidence}")


@dataclass(frozen=True)
class FrameAnnotation:
    """Ground-truth boxes of one frame"""
    frame_index: int
    boxes: Tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'boxes', tuple(self.boxes))
        if self.frame_index < 0:
            raise InvalidInputError(f"negative frame index {self.frame_index}")
        if len(set(self.boxes)) != len(self.boxes):
            raise InvalidInputError(f"duplicate boxes in frame {self.frame_index}")

    def flipped_horizontal(self) -> 'FrameAnnotation':
        return FrameAnnotation(self.frame_index, tuple(b.flipped_horizontal() for b in self.boxes))


@dataclass(frozen=True, eq=False)
class VideoRecord:
    """Ordered grayscale frames plus frame-level boxes or a single video label"""
    video_id: str
    frames: Tuple[np.ndarray, ...]
    annotations: Optional[Tuple[FrameAnnotation, ...]] = None
    video_label: Optional[int] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        for frame in frames:
            frame.setflags(write=False)
        object.__setattr__(self, 'frames', frames)
        if self.annotations is not None:
            object.__setattr__(self, 'annotations', tuple(self.annotations))
        if self.video_label is not None and self.video_label not in (0, 1):
            raise InvalidInputError(f"video label must be 0 or 1, got {self.video_label}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return self.frames[0].shape if self.frames else (0, 0)

    @property
    def is_positive(self) -> bool:
        if self.video_label is not None:
            return self.video_label == 1
        return any(ann.boxes for ann in (self.annotations or ()))

    def annotation_for(self, frame_index: int) -> FrameAnnotation:
        """Annotation of a frame; frames without a record are empty"""
        for ann in self.annotations or ():
            if ann.frame_index == frame_index:
                return ann
        return FrameAnnotation(frame_index)

    def with_video_label(self, label: Optional[int]) -> 'VideoRecord':
        return VideoRecord(self.video_id, self.frames, None, label)

    def as_weak(self) -> 'VideoRecord':
        """Drop frame-level boxes and keep only the derived video label"""
        return self.with_video_label(int(self.is_positive))


@dataclass(frozen=True)
class DatasetSplit:
    """The four data partitions: D_f, D_w, validation and test"""
    fully_labeled: Tuple[VideoRecord, ...] = ()
    weakly_labeled: Tuple[VideoRecord, ...] = ()
    validation: Tuple[VideoRecord, ...] = ()
    test: Tuple[VideoRecord, ...] = ()

    def __post_init__(self):
        for name in ('fully_labeled', 'weakly_labeled', 'validation', 'test'):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def roles(self) -> Iterator[Tuple[str, Tuple[VideoRecord, ...]]]:
        yield 'fully_labeled', self.fully_labeled
        yield 'weakly_labeled', self.weakly_labeled
        yield 'validation', self.validation
        yield 'test', self.test

    @property
    def n_fully_labeled_frames(self) -> int:
        return sum(v.n_frames for v in self.fully_labeled)

    def exploded_frames(self) -> List[Tuple[np.ndarray, FrameAnnotation]]:
        """D_f as a flat frame pool, in video then frame order"""
        pool = []
        for video in self.fully_labeled:
            for t, frame in enumerate(video.frames):
                pool.append((frame, video.annotation_for(t)))
        return pool

    def with_label_fraction(self, fraction: float, seed: int) -> 'DatasetSplit':
        """Keep video labels on a `fraction` share of D_w and withhold the rest"""
        if not 0.0 <= fraction <= 1.0:
            raise InvalidInputError(f"label fraction must lie in [0,1], got {fraction}")
        n = len(self.weakly_labeled)
        n_keep = int(round(fraction * n))
        order = np.random.default_rng(seed).permutation(n)
        keep = set(order[:n_keep].tolist())
        weak = tuple(v if i in keep else v.with_video_label(None)
                     for i, v in enumerate(self.weakly_labeled))
        logger.info(f"Video labels kept for {n_keep}/{n} weak videos (fraction {fraction})")
        return replace(self, weakly_labeled=weak)


def validate_split(split: DatasetSplit) -> List[str]:
    """Return human-readable invariant violations; empty when the split is well formed"""
    violations = []
    seen: Dict[str, str] = {}

    for role, videos in split.roles():
        for video in videos:
            vid = video.video_id
            if vid in seen:
                violations.append(f"{vid}: appears in both {seen[vid]} and {role}")
            else:
                seen[vid] = role

            if video.n_frames < 1:
                violations.append(f"{vid}: has no frames")
                continue
            shapes = {f.shape for f in video.frames}
            if len(shapes) > 1:
                violations.append(f"{vid}: frames differ in size {sorted(shapes)}")

            if role == 'weakly_labeled':
                if video.annotations is not None:
                    violations.append(f"{vid}: weak video carries frame annotations")
            else:
                if video.annotations is None:
                    violations.append(f"{vid}: {role} video has no frame annotations")
                if video.video_label is not None:
                    violations.append(f"{vid}: {role} video carries a video label")
                for ann in video.annotations or ():
                    if ann.frame_index >= video.n_frames:
                        violations.append(f"{vid}: annotation for missing frame {ann.frame_index}")

    return violations
