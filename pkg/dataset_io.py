# dataset_io.py
"""On-disk dataset layout: PGM frames, JSONL annotations and per-split manifests"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from core_model import (BoundingBox, DataError, DatasetSplit, FrameAnnotation, VideoRecord,
                        validate_split)

logger = logging.getLogger(__name__)

ROLES = ('fully_labeled', 'weakly_labeled', 'validation', 'test')


def save_frame_pgm(frame: np.ndarray, path: Union[str, Path]):
    """8-bit grayscale PGM"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def load_frame_pgm(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Frame not found: {path}")
    with Image.open(path) as image:
        if image.mode != 'L':
            raise DataError(f"{path} is not an 8-bit grayscale image (mode {image.mode})")
        return np.asarray(image, dtype=np.uint8) / 255.0


def annotation_lines(video: VideoRecord) -> List[Dict]:
    """JSONL records of one video: one per frame for annotated videos, one per video otherwise"""
    if video.annotations is not None:
        return [{'video_id': video.video_id,
                 'frame_index': t,
                 'boxes': [b.to_list() for b in video.annotation_for(t).boxes]}
                for t in range(video.n_frames)]
    return [{'video_id': video.video_id, 'video_label': video.video_label}]


def parse_annotation_lines(lines: List[Dict]) -> Dict[str, Dict]:
    """Group JSONL records by video: {'annotations': {t: boxes}} or {'video_label': z}"""
    grouped: Dict[str, Dict] = {}
    for record in lines:
        vid = record['video_id']
        entry = grouped.setdefault(vid, {})
        if 'video_label' in record:
            entry['video_label'] = record['video_label']
        else:
            boxes = tuple(BoundingBox(*b) for b in record.get('boxes', []))
            entry.setdefault('annotations', {})[int(record['frame_index'])] = boxes
    return grouped


class DatasetStore:
    """Reads and writes a DatasetSplit under one root directory"""

    def __init__(self, root: Union[str, Path], max_workers: int = 8):
        self.root = Path(root)
        self.max_workers = max_workers

    def _frame_path(self, video_id: str, frame_index: int) -> Path:
        return self.root / 'frames' / video_id / f"{frame_index}.pgm"

    def _annotation_path(self, role: str) -> Path:
        return self.root / f"{role}.jsonl"

    def _manifest_path(self, role: str) -> Path:
        return self.root / f"{role}_manifest.json"

    def exists(self) -> bool:
        return any(self._manifest_path(role).exists() for role in ROLES)

    def write_split(self, split: DatasetSplit, force: bool = False):
        if self.exists() and not force:
            raise DataError(f"Dataset already present in {self.root}; use --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)

        jobs = [(frame, self._frame_path(video.video_id, t))
                for _, videos in split.roles() for video in videos
                for t, frame in enumerate(video.frames)]
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            list(executor.map(lambda job: save_frame_pgm(*job), jobs))

        for role, videos in split.roles():
            with open(self._annotation_path(role), 'w') as f:
                for video in videos:
                    for line in annotation_lines(video):
                        f.write(json.dumps(line) + '\n')
            manifest = {
                'split': role,
                'annotations': self._annotation_path(role).name,
                'videos': [{'video_id': v.video_id,
                            'n_frames': v.n_frames,
                            'height': v.frame_shape[0],
                            'width': v.frame_shape[1]} for v in videos],
            }
            with open(self._manifest_path(role), 'w') as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Wrote {len(jobs)} frames of {sum(len(v) for _, v in split.roles())} videos to {self.root}")

    def _read_manifest(self, role: str) -> Dict:
        path = self._manifest_path(role)
        if not path.exists():
            raise DataError(f"Manifest not found: {path}")
        with open(path) as f:
            return json.load(f)

    def _read_annotations(self, role: str) -> Dict[str, Dict]:
        path = self._annotation_path(role)
        if not path.exists():
            raise DataError(f"Annotation file not found: {path}")
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        return parse_annotation_lines(lines)

    def _load_video(self, entry: Dict, labels: Dict) -> VideoRecord:
        vid = entry['video_id']
        frames = [load_frame_pgm(self._frame_path(vid, t)) for t in range(entry['n_frames'])]
        if 'annotations' in labels:
            boxes = labels['annotations']
            annotations = [FrameAnnotation(t, boxes.get(t, ())) for t in range(entry['n_frames'])]
            return VideoRecord(vid, frames, annotations, None)
        return VideoRecord(vid, frames, None, labels.get('video_label'))

    def read_split(self, validate: bool = True) -> DatasetSplit:
        videos = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            for role in ROLES:
                manifest = self._read_manifest(role)
                labels = self._read_annotations(role)
                entries = manifest['videos']
                missing = [e['video_id'] for e in entries if e['video_id'] not in labels]
                if missing:
                    raise DataError(f"{role}: no annotation records for {missing[:5]}")
                videos[role] = list(executor.map(lambda e: self._load_video(e, labels[e['video_id']]), entries))
                logger.info(f"Loaded {len(entries)} {role} videos from {self.root}")
        split = DatasetSplit(**videos)
        if validate:
            violations = validate_split(split)
            if violations:
                raise DataError(f"Dataset in {self.root} violates {len(violations)} invariants, first: {violations[0]}")
        return split

    def manifest_hash(self) -> str:
        """SHA-256 over all manifests and annotation files"""
        digest = hashlib.sha256()
        for role in ROLES:
            for path in (self._manifest_path(role), self._annotation_path(role)):
                digest.update(path.read_bytes())
        return digest.hexdigest()
