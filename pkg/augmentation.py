# augmentation.py
"""Sub-clip sampling and frame augmentation (strong T_s / reduced T_r)"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from config import AugmentationSpec
from core_model import FrameAnnotation, InvalidInputError, VideoRecord

logger = logging.getLogger(__name__)


def subclip_indices(n_frames: int, n_fpv: int) -> List[int]:
    """Evenly spaced indices round(t * (T - 1) / (n_fpv - 1)), halves rounded up"""
    if n_frames < 1:
        raise InvalidInputError("cannot sample a sub-clip from an empty video")
    if n_fpv < 1:
        raise InvalidInputError(f"n_fpv must be >= 1, got {n_fpv}")
    if n_fpv == 1:
        return [0]
    step = (n_frames - 1) / (n_fpv - 1)
    return [int(math.floor(t * step + 0.5)) for t in range(n_fpv)]


def sample_subclip(video: VideoRecord, n_fpv: int, rng: Optional[np.random.Generator] = None,
                   jitter: int = 0) -> List[np.ndarray]:
    """N_fpv evenly spaced frames; rng only moves indices when jitter > 0"""
    indices = subclip_indices(video.n_frames, n_fpv)
    if jitter > 0 and rng is not None:
        offsets = rng.integers(-jitter, jitter + 1, size=len(indices))
        indices = [int(np.clip(i + o, 0, video.n_frames - 1)) for i, o in zip(indices, offsets)]
    return [video.frames[i] for i in indices]


def apply_augmentation(frame: np.ndarray, ann: Optional[FrameAnnotation], spec: AugmentationSpec,
                       rng: np.random.Generator) -> Tuple[np.ndarray, Optional[FrameAnnotation]]:
    """Flip moves boxes with the pixels; brightness, contrast and noise leave boxes alone"""
    if spec.is_identity:
        return frame, ann

    out = np.asarray(frame, dtype=np.float64)
    if spec.flip_prob > 0 and rng.random() < spec.flip_prob:
        out = out[:, ::-1]
        if ann is not None:
            ann = ann.flipped_horizontal()

    if spec.contrast > 0:
        gain = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast)
        mean = out.mean()
        out = (out - mean) * gain + mean
    if spec.brightness > 0:
        out = out + rng.uniform(-spec.brightness, spec.brightness)
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)

    return np.clip(out, 0.0, 1.0), ann
