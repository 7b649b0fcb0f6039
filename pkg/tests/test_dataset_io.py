import json

import numpy as np
import pytest

from core_model import DataError, DatasetSplit
from dataset_io import DatasetStore, load_frame_pgm, save_frame_pgm


def test_pgm_round_trip_is_exact_for_quantised_frames(tmp_path, rng):
    frame = np.round(rng.random((16, 16)) * 255.0) / 255.0
    path = tmp_path / 'frame.pgm'
    save_frame_pgm(frame, path)
    assert path.read_bytes().startswith(b'P5')
    assert np.array_equal(load_frame_pgm(path), frame)


def test_missing_frame(tmp_path):
    with pytest.raises(DataError):
        load_frame_pgm(tmp_path / 'nope.pgm')


def test_split_round_trip(tmp_path, tiny_split):
    store = DatasetStore(tmp_path / 'data', max_workers=2)
    store.write_split(tiny_split)
    loaded = store.read_split()
    for (role, original), (_, back) in zip(tiny_split.roles(), loaded.roles()):
        assert [v.video_id for v in back] == [v.video_id for v in original], role
        for a, b in zip(original, back):
            assert a.video_label == b.video_label
            assert a.annotations == b.annotations
            assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_refuses_to_overwrite_without_force(tmp_path, tiny_split):
    store = DatasetStore(tmp_path, max_workers=2)
    store.write_split(tiny_split)
    before = store.manifest_hash()
    with pytest.raises(DataError):
        store.write_split(tiny_split)
    store.write_split(tiny_split, force=True)
    assert store.manifest_hash() == before


def test_same_split_same_manifest_hash(tmp_path, tiny_split):
    a, b = DatasetStore(tmp_path / 'a'), DatasetStore(tmp_path / 'b')
    a.write_split(tiny_split)
    b.write_split(tiny_split)
    assert a.manifest_hash() == b.manifest_hash()


def test_weak_records_carry_only_labels(tmp_path, tiny_split):
    store = DatasetStore(tmp_path)
    store.write_split(tiny_split)
    lines = [json.loads(line) for line in (tmp_path / 'weakly_labeled.jsonl').read_text().splitlines()]
    assert len(lines) == len(tiny_split.weakly_labeled)
    assert all(set(line) == {'video_id', 'video_label'} for line in lines)


def test_unlabeled_weak_video_survives_round_trip(tmp_path, tiny_split):
    split = tiny_split.with_label_fraction(0.0, 0)
    store = DatasetStore(tmp_path)
    store.write_split(split)
    assert all(v.video_label is None for v in store.read_split().weakly_labeled)


def test_missing_dataset(tmp_path):
    store = DatasetStore(tmp_path / 'empty')
    assert not store.exists()
    with pytest.raises(DataError):
        store.read_split()


def test_corrupt_annotations_are_reported(tmp_path, tiny_split):
    store = DatasetStore(tmp_path)
    store.write_split(tiny_split)
    (tmp_path / 'test.jsonl').write_text('')
    with pytest.raises(DataError):
        store.read_split()


def test_invalid_split_is_rejected_on_read(tmp_path, make_video):
    split = DatasetSplit(fully_labeled=[make_video('x')], validation=[make_video('x')])
    store = DatasetStore(tmp_path)
    store.write_split(split)
    with pytest.raises(DataError):
        store.read_split()
    assert len(store.read_split(validate=False).validation) == 1
