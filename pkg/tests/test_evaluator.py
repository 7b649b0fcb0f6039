import json

import numpy as np
import pandas as pd
import pytest

from core_model import BoundingBox, Detection, InvalidInputError
from detector import ParameterVector
from evaluator import (MatchResult, average_precision, evaluate_detailed, evaluate_detections, evaluate_model,
                       match, write_eval_report)

GT = BoundingBox.from_corners(0.0, 0.0, 0.5, 0.5)


def det(box, conf, cell=0):
    return Detection(box, conf, cell)


def brute_force_ap(results):
    """Enumerate every confidence cutoff, then integrate the best precision at each recall step"""
    n_gt = sum(r.n_ground_truth for r in results)
    pairs = sorted(((c, f) for r in results for c, f in zip(r.confidences, r.true_positive)), key=lambda p: -p[0])
    points = []
    for k in range(1, len(pairs) + 1):
        tp = sum(f for _, f in pairs[:k])
        points.append((tp / n_gt, tp / k))
    ap, prev_recall = 0.0, 0.0
    for recall, _ in points:
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(p for r, p in points if r >= recall)
            prev_recall = recall
    return ap


def test_match_examples():
    single = match([det(GT, 0.9)], [GT], 0.5)
    assert single.true_positive == (True,) and single.n_true_positive == 1

    double = match([det(GT, 0.9), det(GT, 0.8, 1)], [GT], 0.5)
    assert double.true_positive == (True, False)

    shifted = BoundingBox.from_corners(0.25, 0.25, 0.75, 0.75)
    assert match([det(shifted, 0.9)], [GT], 0.5).true_positive == (False,)


def test_match_orders_by_confidence():
    result = match([det(GT, 0.3, 2), det(GT, 0.8, 1)], [GT], 0.5)
    assert result.confidences == (0.8, 0.3)
    assert result.true_positive == (True, False)


def test_match_prefers_higher_iou():
    other = BoundingBox.from_corners(0.02, 0.0, 0.52, 0.5)
    result = match([det(GT, 0.9), det(other, 0.8, 1)], [other, GT], 0.5)
    assert result.n_true_positive == 2


def test_average_precision_examples():
    perfect = [MatchResult((0.9, 0.8), (True, True), 2)]
    assert average_precision(perfect) == pytest.approx(1.0)
    assert average_precision([MatchResult((), (), 3)]) == 0.0
    mixed = [MatchResult((0.9, 0.8, 0.7), (True, False, True), 2)]
    assert average_precision(mixed) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_average_precision_requires_ground_truth():
    with pytest.raises(InvalidInputError):
        average_precision([MatchResult((0.5,), (False,), 0)])


def _random_instance(rng):
    results = []
    for _ in range(rng.integers(1, 4)):
        n_gt = int(rng.integers(0, 3))
        n_det = int(rng.integers(0, 3))
        flags = [bool(rng.random() < 0.6) for _ in range(n_det)]
        # one-to-one matching caps true positives at the ground-truth count
        for i in np.flatnonzero(flags)[n_gt:]:
            flags[i] = False
        results.append(MatchResult(tuple(rng.uniform(0.01, 1.0, n_det)), tuple(flags), n_gt))
    if sum(r.n_ground_truth for r in results) == 0:
        results.append(MatchResult((), (), 1))
    return results


def test_average_precision_matches_brute_force(rng):
    for _ in range(200):
        results = _random_instance(rng)
        assert average_precision(results) == pytest.approx(brute_force_ap(results), abs=1e-9)


def test_average_precision_depends_only_on_ranking(rng):
    for _ in range(50):
        results = _random_instance(rng)
        cubed = [MatchResult(tuple(c ** 3 for c in r.confidences), r.true_positive, r.n_ground_truth)
                 for r in results]
        assert average_precision(cubed) == pytest.approx(average_precision(results), abs=1e-12)


def test_oracle_detections_score_one():
    gts = [[GT], [], [BoundingBox(0.7, 0.7, 0.2, 0.2)]]
    dets = [[det(b, 0.9) for b in frame] for frame in gts]
    assert evaluate_detections(dets, gts).mean_ap == pytest.approx(1.0)


def test_three_frame_toy_set_matches_oracle():
    b = BoundingBox(0.7, 0.7, 0.2, 0.2)
    gts = [[GT], [b], [GT, b]]
    dets = [
        [det(GT, 0.95), det(b, 0.4, 1)],
        [det(GT, 0.6)],
        [det(b, 0.8), det(b, 0.3, 1)],
    ]
    result = evaluate_detections(dets, gts)
    oracle = brute_force_ap([match(d, g, 0.5) for d, g in zip(dets, gts)])
    assert result.mean_ap == pytest.approx(oracle, abs=1e-12)
    assert result.n_ground_truth == 4 and result.n_detections == 5


def test_evaluate_detections_length_mismatch():
    with pytest.raises(InvalidInputError):
        evaluate_detections([[]], [[], []])


def test_detector_emitting_nothing_scores_zero(tiny_detector, tiny_split):
    values = np.zeros(tiny_detector.parameter_count)
    values[tiny_detector.offsets['head.bias'].start] = -50.0
    params = ParameterVector(values)
    videos = [v for v in tiny_split.test if v.is_positive] or list(tiny_split.validation)
    assert evaluate_model(tiny_detector, params, videos) == 0.0


def test_evaluate_model_is_pure(tiny_detector, tiny_split):
    params = tiny_detector.init_params(0)
    videos = list(tiny_split.test) + list(tiny_split.validation)
    first = evaluate_model(tiny_detector, params, videos)
    assert 0.0 <= first <= 1.0
    assert evaluate_model(tiny_detector, params, videos) == first


def test_evaluate_rejects_weak_videos(tiny_detector, tiny_split):
    with pytest.raises(InvalidInputError):
        evaluate_model(tiny_detector, tiny_detector.init_params(0), tiny_split.weakly_labeled)


def test_write_eval_report(tmp_path):
    result = evaluate_detections([[det(GT, 0.9), det(GT, 0.5, 1)]], [[GT]])
    write_eval_report(result, tmp_path, extra={'split': 'test'})
    report = json.loads((tmp_path / 'eval.json').read_text())
    assert report['mAP'] == pytest.approx(1.0)
    assert report['split'] == 'test'
    assert len(report['pr_points']) == 2
    curve = pd.read_csv(tmp_path / 'pr_curve.csv')
    assert list(curve.columns) == ['recall', 'precision']
    assert curve['precision'].tolist() == pytest.approx([1.0, 0.5])
