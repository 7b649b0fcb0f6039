import logging
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

import trainer as trainer_module
from config import Config
from core_model import DatasetSplit, InvalidInputError, NumericError, UsageError
from ema_schedules import ModelState
from synthetic_data import SyntheticVideoGenerator
from trainer import CURVE_COLUMNS, Trainer

from conftest import tiny_config_dict


def make_config(**sections) -> Config:
    return Config.from_dict(tiny_config_dict(**sections))


def test_zero_epochs_returns_initial_state(tiny_split):
    config = make_config(training={'epochs_burn_in': 0})
    trainer = Trainer(config)
    init = trainer.initial_state()
    assert trainer.run_burn_in(tiny_split, init) is init
    assert trainer.epochs_completed == 0


def test_burn_in_needs_labelled_frames(tiny_split):
    with pytest.raises(InvalidInputError):
        Trainer(make_config()).run_burn_in(replace(tiny_split, fully_labeled=()))


def test_burn_in_is_deterministic(tiny_split):
    config = make_config()
    a = Trainer(config).run_burn_in(tiny_split)
    b = Trainer(config).run_burn_in(tiny_split)
    for name, vector in a.vectors().items():
        assert vector.equals(b.vectors()[name]), name


def test_burn_in_moves_parameters(tiny_split):
    trainer = Trainer(make_config())
    init = trainer.initial_state()
    state = trainer.run_burn_in(tiny_split, init)
    assert not state.theta.equals(init.theta)
    assert state.optimizer_state['step'] == 2 * 3


def test_zero_learning_rate_decays_averages_geometrically(tiny_split, tiny_detector):
    config = make_config(training={'learning_rate': 0.0, 'ema_warmup': False})
    trainer = Trainer(config, tiny_detector)
    theta = tiny_detector.init_params(0)
    zeros = type(theta).zeros(len(theta))
    state = trainer.run_burn_in(tiny_split, ModelState(theta, zeros, zeros, {'step': 0}))
    assert state.theta.equals(theta)
    # 2 epochs x 3 iterations of keep rate 0.99 toward a fixed theta
    assert np.allclose(state.theta_iter.values - theta.values, -(0.99 ** 6) * theta.values)
    gap = np.linalg.norm(state.theta_epoch.values - theta.values)
    assert gap < np.linalg.norm(theta.values)


def test_without_hierarchical_ema_averages_track_theta(tiny_split):
    trainer = Trainer(make_config(training={'hierarchical_ema': False}))
    state = trainer.run_burn_in(tiny_split)
    assert state.theta_iter.equals(state.theta)
    assert state.theta_epoch.equals(state.theta)


def test_burn_in_artifacts(tmp_path, tiny_split):
    run_dir = tmp_path / 'run'
    Trainer(make_config(), run_dir=run_dir).run_burn_in(tiny_split)
    assert (run_dir / 'config.json').exists()
    curves = pd.read_csv(run_dir / 'curves.csv')
    assert list(curves.columns) == CURVE_COLUMNS
    assert curves['epoch'].tolist() == [1, 2]
    assert (curves['stage'] == 'burn_in').all()
    assert curves[['map_theta', 'map_iter', 'map_epoch']].apply(lambda c: c.between(0, 1)).all().all()
    for epoch in (0, 1, 2):
        for suffix in ('theta', 'theta_iter', 'theta_epoch'):
            assert (run_dir / 'checkpoints' / f"epoch_{epoch}.{suffix}").exists()
    assert (run_dir / 'checkpoints' / 'last_good.theta').exists()


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, tiny_split, monkeypatch):
    def broken_loss(theta, *args, **kwargs):
        return theta.sum() * float('nan')

    monkeypatch.setattr(trainer_module, 'loss_f_sup', broken_loss)
    run_dir = tmp_path / 'run'
    with pytest.raises(NumericError) as excinfo:
        Trainer(make_config(), run_dir=run_dir).run_burn_in(tiny_split)
    assert excinfo.value.checkpoint.endswith('last_good')
    assert (run_dir / 'checkpoints' / 'last_good.theta').exists()


def _mutual(config, split, init=None):
    trainer = Trainer(config)
    init = init or trainer.initial_state()
    return trainer, trainer.run_mutual_learning(split, init)


def test_mutual_learning_starts_from_the_epoch_average(tiny_split, tiny_detector):
    config = make_config(training={'epochs_mutual': 0})
    trainer = Trainer(config, tiny_detector)
    a, b = tiny_detector.init_params(1), tiny_detector.init_params(2)
    state = trainer.run_mutual_learning(tiny_split, ModelState(a, a, b))
    for vector in state.vectors().values():
        assert vector.equals(b)


def test_mutual_learning_is_deterministic(tiny_split):
    config = make_config(pseudo={'use_weak_filtering': True})
    _, a = _mutual(config, tiny_split)
    _, b = _mutual(config, tiny_split)
    for name, vector in a.vectors().items():
        assert vector.equals(b.vectors()[name]), name


def test_disabled_weak_losses_equal_supervised_continuation(tiny_split):
    config = make_config(weights={'lambda_f_semi': 0.0, 'lambda_v_weak': 0.0}, tsmr={'adaptive': False})
    _, with_weak = _mutual(config, tiny_split)
    _, without_weak = _mutual(config, replace(tiny_split, weakly_labeled=()))
    for name, vector in with_weak.vectors().items():
        assert vector.equals(without_weak.vectors()[name]), name


def test_frozen_teacher_stays_bit_identical(tiny_split):
    config = make_config(weights={'lambda_f_semi': 0.0, 'lambda_v_weak': 0.0},
                         tsmr={'adaptive': False, 'alpha_e_fixed': 1.0})
    trainer = Trainer(config)
    init = trainer.initial_state()
    state = trainer.run_mutual_learning(tiny_split, init)
    assert state.theta_epoch.equals(init.theta_epoch)
    assert not state.theta.equals(init.theta)


def test_mutual_learning_artifacts(tmp_path, tiny_split):
    run_dir = tmp_path / 'run'
    config = make_config(pseudo={'use_weak_filtering': True, 'use_soft_weights': True, 'beta': 0.1},
                         training={'dump_pseudo_labels': True})
    trainer = Trainer(config, run_dir=run_dir)
    state = trainer.run_burn_in(tiny_split)
    state = trainer.run_mutual_learning(tiny_split, state)
    for vector in state.vectors().values():
        assert np.all(np.isfinite(vector.values))

    curves = pd.read_csv(run_dir / 'curves.csv')
    assert curves['stage'].tolist() == ['burn_in', 'burn_in', 'mutual', 'mutual']
    assert curves['epoch'].tolist() == [1, 2, 3, 4]
    assert (curves.loc[curves['stage'] == 'mutual', 'loss_total'] > 0).all()

    schedule = pd.read_csv(run_dir / 'schedule.csv')
    assert schedule['epoch'].tolist() == [3, 4]
    assert schedule['alpha_e'].between(0.75, 0.99).all()
    assert schedule['alpha_inv'].between(0.85, 1.0).all()
    assert (run_dir / 'pseudo_labels.jsonl').exists()
    assert (run_dir / 'checkpoints' / 'epoch_4.theta_epoch').exists()


def test_empty_weak_set_still_trains(tiny_split):
    _, state = _mutual(make_config(), replace(tiny_split, weakly_labeled=()))
    assert all(np.all(np.isfinite(v.values)) for v in state.vectors().values())


def test_evaluate_without_videos_is_zero(tiny_detector):
    trainer = Trainer(make_config(), tiny_detector)
    assert trainer.evaluate(tiny_detector.init_params(0), []) == 0.0


def has_truths(video) -> bool:
    return any(ann.boxes for ann in video.annotations)


def test_single_validation_video_trains():
    config = make_config(generator={'n_validation': 1})
    split = SyntheticVideoGenerator(config.generator, max_workers=2).generate_splits()
    trainer = Trainer(config)
    trainer.run_burn_in(split)
    assert trainer.recorder.curves()['map_epoch'].between(0, 1).all()


def test_validation_without_truths_is_rejected(tiny_split):
    negatives = tuple(v for v in tiny_split.validation if not has_truths(v))
    assert negatives
    split = replace(tiny_split, validation=negatives)
    trainer = Trainer(make_config())
    with pytest.raises(UsageError):
        trainer.run_burn_in(split)
    with pytest.raises(UsageError):
        trainer.run_mutual_learning(split, trainer.initial_state())


def test_evaluate_without_truths_is_nan(tiny_split, tiny_detector):
    negatives = [v for v in tiny_split.validation if not has_truths(v)]
    trainer = Trainer(make_config(), tiny_detector)
    assert np.isnan(trainer.evaluate(tiny_detector.init_params(0), negatives))


def test_averaging_never_feeds_back_into_raw_weights(tiny_split):
    with_he = Trainer(make_config()).run_burn_in(tiny_split)
    without_he = Trainer(make_config(training={'hierarchical_ema': False})).run_burn_in(tiny_split)
    assert with_he.theta.equals(without_he.theta)
    assert not with_he.theta_epoch.equals(with_he.theta)


def test_cached_pseudo_labels_are_counted(tiny_split, caplog):
    caplog.set_level(logging.INFO, logger='trainer')
    _mutual(make_config(), tiny_split)
    # 3 iterations x 2 weak videos over a 4-video set: two repeats per epoch
    assert caplog.text.count('over 6 clips (2 from cache)') == 2


def reduced_config() -> Config:
    return Config.from_dict({
        'generator': {'n_fully_labeled': 40, 'n_weak': 0, 'n_validation': 10, 'n_test': 0,
                      'frames_per_video': 15, 'seed': 11},
        'training': {'epochs_burn_in': 10, 'epochs_mutual': 0, 'save_checkpoints': False},
    })


@pytest.mark.slow
def test_burn_in_learns_and_epoch_average_is_stable():
    config = reduced_config()
    split = SyntheticVideoGenerator(config.generator).generate_splits()
    trainer = Trainer(config)
    trainer.run_burn_in(split)
    curves = trainer.recorder.curves()
    theta = curves['map_theta'].to_numpy()
    epoch_avg = curves['map_epoch'].to_numpy()

    assert theta[-1] > max(theta[0], 0.05)
    assert np.var(np.diff(epoch_avg)) < np.var(np.diff(theta))
    # the run without averaging trains the same raw weights, so theta is its final model
    assert epoch_avg[-1] >= theta[-1] - 0.15


def test_sgd_step_clips_gradient_norm(tiny_detector):
    trainer = Trainer(make_config(training={'learning_rate': 0.5, 'grad_clip_norm': 2.0}), tiny_detector)
    state = trainer.initial_state()
    n = len(state.theta)
    grad = type(state.theta)(np.full(n, 100.0 / np.sqrt(n)))
    stepped = trainer._sgd_step(state, grad)
    assert np.linalg.norm(stepped.theta.values - state.theta.values) == pytest.approx(0.5 * 2.0, rel=1e-5)
    assert stepped.optimizer_state == {'step': 1}

    small = type(state.theta)(np.full(n, 0.1 / np.sqrt(n)))
    unclipped = trainer._sgd_step(state, small)
    assert np.allclose(unclipped.theta.values, state.theta.values - 0.5 * small.values, atol=1e-15)
