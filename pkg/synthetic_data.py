# synthetic_data.py
"""Deterministic generator of lung-like synthetic videos with drifting target blobs"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from config import GeneratorConfig
from core_model import BoundingBox, DatasetSplit, FrameAnnotation, VideoRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TargetTrack:
    """Analytic pixel-space trajectory of one target blob"""
    centers: Tuple[Tuple[float, float], ...]  # (x, y) per frame, pixel units
    sigma: Tuple[float, float]
    contrast: float
    visible: Tuple[bool, ...]

    def extent(self, t: int, image_size: int) -> BoundingBox:
        """Normalized +-2 sigma box of frame t"""
        x, y = self.centers[t]
        sx, sy = self.sigma
        return BoundingBox(x / image_size, y / image_size, 4.0 * sx / image_size, 4.0 * sy / image_size)


def _gaussian(xx: np.ndarray, yy: np.ndarray, x: float, y: float, sx: float, sy: float) -> np.ndarray:
    return np.exp(-((xx - x) ** 2 / (2.0 * sx ** 2) + (yy - y) ** 2 / (2.0 * sy ** 2)))


class SyntheticVideoGenerator:
    """Bright elliptical targets over speckle, with dark-blob and line distractors"""

    def __init__(self, config: GeneratorConfig, max_workers: int = 4):
        self.config = config
        self.max_workers = max_workers
        size = config.image_size
        # pixel centers
        coords = np.arange(size, dtype=np.float64) + 0.5
        self._yy, self._xx = np.meshgrid(coords, coords, indexing='ij')

    def _background(self, rng: np.random.Generator, n_frames: int) -> np.ndarray:
        cfg = self.config
        size = cfg.image_size
        tissue = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=6.0)
        tissue = 0.2 + 0.08 * tissue / max(np.abs(tissue).max(), 1e-12)
        # depth attenuation
        tissue = tissue * np.linspace(1.0, 0.7, size)[:, None]
        frames = np.empty((n_frames, size, size))
        for t in range(n_frames):
            speckle = gaussian_filter(rng.rayleigh(cfg.speckle_level, (size, size)), sigma=0.7)
            frames[t] = tissue + speckle
        return frames

    def _track(self, rng: np.random.Generator, n_frames: int) -> TargetTrack:
        cfg = self.config
        size = cfg.image_size
        sx = rng.uniform(*cfg.target_sigma_range)
        sy = rng.uniform(*cfg.target_sigma_range)
        contrast = rng.uniform(*cfg.target_contrast_range)
        lo = np.array([2.0 * sx, 2.0 * sy])
        hi = size - lo
        pos = rng.uniform(lo, hi)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        velocity = cfg.drift_speed * np.array([math.cos(angle), math.sin(angle)])

        centers = []
        for _ in range(n_frames):
            centers.append((float(pos[0]), float(pos[1])))
            pos = pos + velocity + rng.normal(0.0, cfg.jitter, 2)
            # reflect at the borders so the +-2 sigma extent stays inside the frame
            for axis in range(2):
                if pos[axis] < lo[axis]:
                    pos[axis] = 2 * lo[axis] - pos[axis]
                    velocity[axis] = -velocity[axis]
                elif pos[axis] > hi[axis]:
                    pos[axis] = 2 * hi[axis] - pos[axis]
                    velocity[axis] = -velocity[axis]
                pos[axis] = float(np.clip(pos[axis], lo[axis], hi[axis]))

        n_visible = min(n_frames, max(1, math.ceil(rng.uniform(cfg.min_visible_fraction, 1.0) * n_frames)))
        start = int(rng.integers(0, n_frames - n_visible + 1))
        visible = tuple(start <= t < start + n_visible for t in range(n_frames))
        return TargetTrack(tuple(centers), (sx, sy), contrast, visible)

    def _add_distractors(self, rng: np.random.Generator, frames: np.ndarray):
        cfg = self.config
        size = cfg.image_size
        n_frames = frames.shape[0]
        for _ in range(int(rng.poisson(cfg.distractor_density))):
            if rng.random() < 0.5:
                # dark blob
                sx, sy = rng.uniform(3.0, 6.0, 2)
                amplitude = -rng.uniform(0.12, 0.22)
            else:
                # elongated horizontal line
                sx, sy = rng.uniform(8.0, 16.0), rng.uniform(0.8, 1.2)
                amplitude = rng.uniform(0.12, 0.28)
            x, y = rng.uniform(0.0, size, 2)
            dx, dy = rng.normal(0.0, 0.2, 2)
            for t in range(n_frames):
                frames[t] += amplitude * _gaussian(self._xx, self._yy, x + dx * t, y + dy * t, sx, sy)

    def generate_video(self, positive: bool, rng: np.random.Generator, video_id: str = 'video',
                       weak: bool = False) -> VideoRecord:
        """A frame-annotated video, or a video-labelled one when weak is set"""
        return self.generate_video_with_tracks(positive, rng, video_id, weak)[0]

    def generate_video_with_tracks(self, positive: bool, rng: np.random.Generator, video_id: str = 'video',
                                   weak: bool = False) -> Tuple[VideoRecord, List[TargetTrack]]:
        cfg = self.config
        n_frames = cfg.frames_per_video
        frames = self._background(rng, n_frames)
        tracks = [self._track(rng, n_frames)] if positive else []
        self._add_distractors(rng, frames)

        boxes: List[List[BoundingBox]] = [[] for _ in range(n_frames)]
        for track in tracks:
            for t in range(n_frames):
                if not track.visible[t]:
                    continue
                x, y = track.centers[t]
                frames[t] += track.contrast * _gaussian(self._xx, self._yy, x, y, *track.sigma)
                boxes[t].append(track.extent(t, cfg.image_size))

        # 8-bit quantisation keeps the PGM round trip exact
        frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0
        frame_list = [frames[t].copy() for t in range(n_frames)]
        if weak:
            record = VideoRecord(video_id, frame_list, None, int(positive))
        else:
            annotations = [FrameAnnotation(t, tuple(b)) for t, b in enumerate(boxes)]
            record = VideoRecord(video_id, frame_list, annotations, None)
        return record, tracks

    def _split_jobs(self, role: str, count: int, seed_seq: np.random.SeedSequence) -> List[Tuple[str, bool, np.random.SeedSequence]]:
        cfg = self.config
        children = seed_seq.spawn(count + 1)
        # half-up rounding; any positive fraction yields at least one positive video
        n_positive = math.floor(cfg.positive_fraction * count + 0.5)
        if cfg.positive_fraction > 0 and count > 0:
            n_positive = max(1, n_positive)
        labels = np.array([True] * n_positive + [False] * (count - n_positive), dtype=bool)
        labels = np.random.default_rng(children[-1]).permutation(labels)
        return [(f"{role}_{i:04d}", bool(labels[i]), children[i]) for i in range(count)]

    def generate_splits(self) -> DatasetSplit:
        cfg = self.config
        roles = [
            ('fully_labeled', cfg.n_fully_labeled, False),
            ('weakly_labeled', cfg.n_weak, True),
            ('validation', cfg.n_validation, False),
            ('test', cfg.n_test, False),
        ]
        role_seeds = np.random.SeedSequence(cfg.seed).spawn(len(roles))
        videos = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            for (role, count, weak), seed_seq in zip(roles, role_seeds):
                jobs = self._split_jobs(role, count, seed_seq)
                videos[role] = list(executor.map(
                    lambda job, weak=weak: self.generate_video(job[1], np.random.default_rng(job[2]), job[0], weak),
                    jobs,
                ))
                logger.info(f"Generated {count} {role} videos "
                            f"({sum(job[1] for job in jobs)} positive)")
        return DatasetSplit(**videos)
