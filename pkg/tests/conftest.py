"""Shared fixtures: a tiny detector and a tiny synthetic dataset that train in seconds"""

import numpy as np
import pytest
import torch

from config import Config, DetectorConfig, GeneratorConfig
from core_model import BoundingBox, FrameAnnotation, VideoRecord
from detector import GridDetector
from synthetic_data import SyntheticVideoGenerator

TINY_DETECTOR = {'image_size': 16, 'grid_size': 2, 'channels': [3, 4, 4], 'pool_factors': [4, 2]}

TINY_GENERATOR = {
    'image_size': 16,
    'n_fully_labeled': 3,
    'n_weak': 4,
    'n_validation': 2,
    'n_test': 2,
    'frames_per_video': 6,
    'target_sigma_range': [1.0, 2.0],
    'seed': 7,
}


def tiny_config_dict(**sections) -> dict:
    data = {
        'detector': dict(TINY_DETECTOR),
        'generator': dict(TINY_GENERATOR),
        'training': {
            'frames_per_video': 3,
            'epochs_burn_in': 2,
            'epochs_mutual': 2,
            'batch_size': 6,
            'weak_videos_per_batch': 2,
        },
        'experiment': {'repeats': 2},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return data


def central_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def tiny_config() -> Config:
    return Config.from_dict(tiny_config_dict())


@pytest.fixture
def tiny_detector() -> GridDetector:
    return GridDetector(DetectorConfig(**TINY_DETECTOR))


@pytest.fixture
def tiny_split(tiny_config):
    return SyntheticVideoGenerator(tiny_config.generator, max_workers=2).generate_splits()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def make_video():
    def _make(video_id='v', n_frames=3, size=16, boxes=None, label=None, weak=False):
        frames = [np.full((size, size), 0.1 * (t + 1)) for t in range(n_frames)]
        if weak:
            return VideoRecord(video_id, frames, None, label)
        boxes = boxes or {}
        annotations = [FrameAnnotation(t, tuple(boxes.get(t, ()))) for t in range(n_frames)]
        return VideoRecord(video_id, frames, annotations, None)
    return _make


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)
